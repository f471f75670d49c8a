"""Model builders: image-to-image generators, dual-head discriminators,
baseline classifiers, and the frozen feature-loss network.

All public modules take NHWC images in [0,1] and permute to NCHW internally.
Builders are deterministic: the same (profile, scale, seed) yields bitwise
identical parameters. ``scale="paper"`` selects the reference architectures;
``scale="mini"`` selects width/depth-reduced stand-ins for fast tests. The
toy profile has a single tiny architecture regardless of scale.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .data import DatasetProfile, get_profile
from .errors import ConfigError, ContractError
from .seeding import torch_generator

SCALES = ("paper", "mini")


def _nhwc_to_nchw(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 3, 1, 2)


def _nchw_to_nhwc(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 2, 3, 1)


class UnitTanh(nn.Module):
    """Tanh squashed into [0,1]: keeps the nonlinearity while meeting the
    unit-interval output contract."""

    def forward(self, x):
        return (torch.tanh(x) + 1.0) / 2.0


class ResidualBlock(nn.Module):
    """Two 3x3 stride-1 convs with batch norm, identity skip, final ReLU."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, padding=1)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, padding=1)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + x)


def _conv_block(cin, cout, kernel, stride, act):
    return [nn.Conv2d(cin, cout, kernel, stride, padding=1), nn.BatchNorm2d(cout), act()]


def _tconv_block(cin, cout, kernel, act):
    # kernel 3 needs output_padding 1 for exact doubling; kernel 4 does not
    opad = 1 if kernel == 3 else 0
    return [nn.ConvTranspose2d(cin, cout, kernel, 2, padding=1, output_padding=opad),
            nn.BatchNorm2d(cout), act()]


class Generator(nn.Module):
    """Fully convolutional image-to-image network with unit-interval output."""

    def __init__(self, profile: DatasetProfile, body: nn.Sequential, scale: str):
        super().__init__()
        self.profile = profile
        self.scale = scale
        self.name = f"{profile.name}-generator"
        self.body = body

    def forward(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.profile.image_shape):
            raise ContractError(
                f"{self.name}: expected input (N,{','.join(map(str, self.profile.image_shape))}), "
                f"got {tuple(x.shape)}"
            )
        return _nchw_to_nhwc(self.body(_nhwc_to_nchw(x)))


def _generator_body(profile: DatasetProfile, scale: str) -> nn.Sequential:
    c = profile.channels
    relu = nn.ReLU
    lrelu = lambda: nn.LeakyReLU(0.2)  # noqa: E731
    if profile.name == "toy":
        layers = (
            _conv_block(c, 3, 3, 1, relu)
            + _conv_block(3, 6, 3, 2, relu)
            + [ResidualBlock(6)]
            + _tconv_block(6, 3, 3, relu)
            + [nn.Conv2d(3, c, 3, 1, padding=1), UnitTanh()]
        )
    elif profile.name == "mnist":
        if scale == "paper":
            # 28 -> 14 -> 7, four residual blocks, 7 -> 14 -> 28
            layers = (
                _conv_block(c, 8, 3, 1, relu)
                + _conv_block(8, 16, 3, 2, relu)
                + _conv_block(16, 32, 3, 2, relu)
                + [ResidualBlock(32) for _ in range(4)]
                + _tconv_block(32, 16, 3, relu)
                + _tconv_block(16, 8, 3, relu)
                + [nn.Conv2d(8, c, 3, 1, padding=1), UnitTanh()]
            )
        else:
            layers = (
                _conv_block(c, 4, 3, 1, relu)
                + _conv_block(4, 8, 3, 2, relu)
                + [ResidualBlock(8)]
                + _tconv_block(8, 4, 3, relu)
                + [nn.Conv2d(4, c, 3, 1, padding=1), UnitTanh()]
            )
    elif profile.name == "svhn":
        w = 64 if scale == "paper" else 8
        layers = (
            [nn.Conv2d(c, w, 4, 2, padding=1), nn.BatchNorm2d(w), lrelu()]
            + [nn.Conv2d(w, 2 * w, 4, 2, padding=1), nn.BatchNorm2d(2 * w), lrelu()]
            + [nn.ConvTranspose2d(2 * w, 2 * w, 4, 2, padding=1), nn.BatchNorm2d(2 * w), lrelu()]
            + [nn.ConvTranspose2d(2 * w, w, 4, 2, padding=1), nn.BatchNorm2d(w), lrelu()]
            + [nn.Conv2d(w, c, 3, 1, padding=1), UnitTanh()]
        )
    elif profile.name == "cifar10":
        w = 128 if scale == "paper" else 16
        down, up = [], []
        cin = c
        for _ in range(3):
            down += [nn.Conv2d(cin, w, 4, 2, padding=1), nn.BatchNorm2d(w), lrelu()]
            cin = w
        for _ in range(3):
            up += [nn.ConvTranspose2d(w, w, 4, 2, padding=1), nn.BatchNorm2d(w), lrelu()]
        layers = down + up + [nn.Conv2d(w, c, 3, 1, padding=1), UnitTanh()]
    else:
        raise ConfigError(f"no generator architecture for profile {profile.name!r}")
    return nn.Sequential(*layers)


class _DenseLayer(nn.Module):
    def __init__(self, cin, growth):
        super().__init__()
        self.bn = nn.BatchNorm2d(cin)
        self.conv = nn.Conv2d(cin, growth, 3, 1, padding=1)

    def forward(self, x):
        out = self.conv(torch.relu(self.bn(x)))
        return torch.cat([x, out], dim=1)


def _dense_block(cin, layers, growth):
    mods = []
    for i in range(layers):
        mods.append(_DenseLayer(cin + i * growth, growth))
    return nn.Sequential(*mods), cin + layers * growth


class _Transition(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.bn = nn.BatchNorm2d(channels)
        self.conv = nn.Conv2d(channels, channels, 1, 1)
        self.pool = nn.AvgPool2d(2)

    def forward(self, x):
        return self.pool(self.conv(torch.relu(self.bn(x))))


class _BasicResBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, padding=1)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, padding=1)
        self.bn2 = nn.BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride), nn.BatchNorm2d(cout))
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.skip(x))


class _GlobalAvgPool(nn.Module):
    def forward(self, x):
        return x.mean(dim=(2, 3))


def _backbone(profile: DatasetProfile, scale: str):
    """Build the shared trunk for discriminators/classifiers.

    Returns (trunk, tap_len): trunk maps NCHW images to a flat feature
    vector; the first ``tap_len`` trunk modules form the early-feature
    prefix used by the loss network.
    """
    c = profile.channels
    if profile.name == "toy":
        trunk = nn.Sequential(
            nn.Conv2d(c, 4, 3, 2, padding=1), nn.ReLU(),
            nn.Conv2d(4, 8, 3, 2, padding=1), nn.ReLU(),
            nn.Flatten(), nn.LazyLinear(16), nn.ReLU(),
        )
        tap_len = 2
    elif profile.name == "mnist":
        if scale == "paper":
            # plain stacked-conv CNN: two conv pairs with max pooling, two
            # fully connected layers of 200 units
            trunk = nn.Sequential(
                nn.Conv2d(c, 32, 3, 1), nn.ReLU(),
                nn.Conv2d(32, 32, 3, 1), nn.ReLU(), nn.MaxPool2d(2),
                nn.Conv2d(32, 64, 3, 1), nn.ReLU(),
                nn.Conv2d(64, 64, 3, 1), nn.ReLU(), nn.MaxPool2d(2),
                nn.Flatten(), nn.LazyLinear(200), nn.ReLU(),
                nn.Linear(200, 200), nn.ReLU(),
            )
        else:
            trunk = nn.Sequential(
                nn.Conv2d(c, 8, 3, 2, padding=1), nn.ReLU(),
                nn.Conv2d(8, 16, 3, 2, padding=1), nn.ReLU(),
                nn.Flatten(), nn.LazyLinear(32), nn.ReLU(),
            )
        tap_len = 2
    elif profile.name == "svhn":
        # densely connected trunk, depth 40 at paper scale
        growth, per_block, width = (12, 12, 16) if scale == "paper" else (4, 2, 8)
        mods = [nn.Conv2d(c, width, 3, 1, padding=1)]
        channels = width
        for i in range(3):
            block, channels = _dense_block(channels, per_block, growth)
            mods.append(block)
            if i < 2:
                mods.append(_Transition(channels))
        mods += [nn.BatchNorm2d(channels), nn.ReLU(), _GlobalAvgPool()]
        trunk = nn.Sequential(*mods)
        tap_len = 2  # initial conv plus the first dense block
    elif profile.name == "cifar10":
        if scale == "paper":
            widths, blocks = (64, 128, 256, 512), 2
        else:
            widths, blocks = (8, 16), 1
        mods = [nn.Conv2d(c, widths[0], 3, 1, padding=1),
                nn.BatchNorm2d(widths[0]), nn.ReLU()]
        cin = widths[0]
        for stage, w in enumerate(widths):
            for b in range(blocks):
                stride = 2 if (stage > 0 and b == 0) else 1
                mods.append(_BasicResBlock(cin, w, stride))
                cin = w
        mods.append(_GlobalAvgPool())
        trunk = nn.Sequential(*mods)
        tap_len = 3  # first conv, batch norm, relu
    else:
        raise ConfigError(f"no discriminator architecture for profile {profile.name!r}")
    return trunk, tap_len


class DualHeadDiscriminator(nn.Module):
    """Shared trunk with a k-class scores head and a scalar real/fake head."""

    def __init__(self, profile: DatasetProfile, trunk: nn.Sequential, tap_len: int,
                 feature_dim: int, scale: str):
        super().__init__()
        self.profile = profile
        self.scale = scale
        self.name = f"{profile.name}-discriminator"
        self.trunk = trunk
        self.tap_len = tap_len
        self.class_head = nn.Linear(feature_dim, profile.num_classes)
        self.disc_head = nn.Linear(feature_dim, 1)

    def forward(self, x):
        """Return (class_scores (N,k), disc_logit (N,)). Raw scores; softmax
        or sigmoid materialization is the caller's choice."""
        feats = self.trunk(_nhwc_to_nchw(_check_input(self, x)))
        return self.class_head(feats), self.disc_head(feats).squeeze(-1)

    def class_scores(self, x):
        return self.forward(x)[0]

    def disc_logit(self, x):
        return self.forward(x)[1]


class ConvClassifier(nn.Module):
    """Trunk plus classification head only: the baseline-model and
    loss-network architecture."""

    def __init__(self, profile: DatasetProfile, trunk: nn.Sequential, tap_len: int,
                 feature_dim: int, scale: str):
        super().__init__()
        self.profile = profile
        self.scale = scale
        self.name = f"{profile.name}-cnn"
        self.trunk = trunk
        self.tap_len = tap_len
        self.class_head = nn.Linear(feature_dim, profile.num_classes)

    def forward(self, x):
        return self.class_head(self.trunk(_nhwc_to_nchw(_check_input(self, x))))

    def class_scores(self, x):
        return self.forward(x)


class FeatureLossNetwork(nn.Module):
    """Frozen early-feature extractor taken from a pretrained classifier.

    Parameters are frozen at construction and the module is pinned to eval
    mode; ``features`` returns the NCHW activation map after the designated
    trunk prefix.
    """

    def __init__(self, classifier: ConvClassifier, tap_len: int | None = None):
        super().__init__()
        import copy

        self.profile = classifier.profile
        self.name = f"{classifier.profile.name}-lossnet"
        tap = tap_len if tap_len is not None else classifier.tap_len
        # deep copy: freezing must not alias a classifier that may keep training
        self.prefix = copy.deepcopy(nn.Sequential(*[classifier.trunk[i] for i in range(tap)]))
        for p in self.prefix.parameters():
            p.requires_grad_(False)
        super().train(False)
        params = list(self.prefix.parameters())
        probe = torch.zeros((1, *self.profile.image_shape),
                            dtype=params[0].dtype if params else torch.float32)
        with torch.no_grad():
            fmap = self.prefix(_nhwc_to_nchw(probe))
        self.feature_shape = tuple(fmap.shape[1:])  # (C, H, W)

    def train(self, mode: bool = True):
        return super().train(False)  # frozen: never leaves eval mode

    def features(self, x):
        return self.prefix(_nhwc_to_nchw(_check_input(self, x)))

    def forward(self, x):
        return self.features(x)


def _check_input(module, x):
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(module.profile.image_shape):
        raise ContractError(
            f"{module.name}: expected input (N,{','.join(map(str, module.profile.image_shape))}), "
            f"got {tuple(x.shape)}"
        )
    return x


def _fan_in(weight: torch.Tensor) -> int:
    return weight.numel() // weight.shape[0]


def _init_module(module: nn.Module, seed: int, scheme: str) -> None:
    """Deterministic parameter init from a single generator.

    scheme "gan": truncated normal std 0.02 for every weight matrix;
    scheme "fan_in": He-style fan-in-scaled normals. Norm scales go to 1,
    every bias to 0.
    """
    gen = torch_generator(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.ndim >= 2:
                if scheme == "gan":
                    nn.init.trunc_normal_(p, mean=0.0, std=0.02, a=-0.04, b=0.04, generator=gen)
                else:
                    p.normal_(0.0, math.sqrt(2.0 / _fan_in(p)), generator=gen)
            elif name.endswith("weight"):
                p.fill_(1.0)  # norm scale
            else:
                p.zero_()


def _materialize_lazy(module: nn.Module, profile: DatasetProfile) -> None:
    probe = torch.zeros((1, *profile.image_shape))
    was_training = module.training
    module.eval()
    with torch.no_grad():
        module(probe)
    module.train(was_training)


def build_generator(profile: DatasetProfile | str, seed: int, scale: str = "paper") -> Generator:
    """Image-to-image generator for the profile, deterministically initialized."""
    profile = get_profile(profile) if isinstance(profile, str) else profile
    _check_scale(scale)
    gen = Generator(profile, _generator_body(profile, scale), scale)
    _init_module(gen, seed, "gan")
    return gen


def build_discriminator(profile: DatasetProfile | str, seed: int, scale: str = "paper") -> DualHeadDiscriminator:
    """Dual-head discriminator for the profile."""
    profile = get_profile(profile) if isinstance(profile, str) else profile
    _check_scale(scale)
    trunk, tap_len = _backbone(profile, scale)
    feature_dim = _probe_feature_dim(trunk, profile)
    disc = DualHeadDiscriminator(profile, trunk, tap_len, feature_dim, scale)
    _init_module(disc, seed, "fan_in")
    return disc


def build_classifier(profile: DatasetProfile | str, seed: int, scale: str = "paper") -> ConvClassifier:
    """Plain classifier: the discriminator architecture minus the real/fake head."""
    profile = get_profile(profile) if isinstance(profile, str) else profile
    _check_scale(scale)
    trunk, tap_len = _backbone(profile, scale)
    feature_dim = _probe_feature_dim(trunk, profile)
    clf = ConvClassifier(profile, trunk, tap_len, feature_dim, scale)
    _init_module(clf, seed, "fan_in")
    return clf


def build_loss_network(profile: DatasetProfile | str, pretrained: ConvClassifier,
                       tap_len: int | None = None) -> FeatureLossNetwork:
    """Freeze a pretrained classifier's early features as the perceptual-loss
    extractor. The classifier must match the profile."""
    profile = get_profile(profile) if isinstance(profile, str) else profile
    if not isinstance(pretrained, ConvClassifier):
        raise ConfigError("build_loss_network requires a pretrained ConvClassifier")
    if pretrained.profile.name != profile.name or tuple(pretrained.profile.image_shape) != tuple(profile.image_shape):
        raise ConfigError(
            f"pretrained classifier profile {pretrained.profile.name!r} does not match {profile.name!r}"
        )
    return FeatureLossNetwork(pretrained, tap_len)


def _probe_feature_dim(trunk: nn.Sequential, profile: DatasetProfile) -> int:
    probe = torch.zeros((1, *profile.image_shape))
    trunk.eval()
    with torch.no_grad():
        out = trunk(_nhwc_to_nchw(probe))
    trunk.train()
    if out.ndim != 2:
        raise ConfigError(f"trunk must emit a flat feature vector, got shape {tuple(out.shape)}")
    return out.shape[1]


def _check_scale(scale: str) -> None:
    if scale not in SCALES:
        raise ConfigError(f"unknown model scale {scale!r}; choose one of {SCALES}")


def parameter_vector(module: nn.Module) -> torch.Tensor:
    """Flat copy of all parameters, used for bitwise comparisons."""
    return torch.cat([p.detach().reshape(-1).clone() for p in module.parameters()])


def state_hash(module: nn.Module, include_buffers: bool = True) -> str:
    """Order-stable hash of parameters (and optionally buffers)."""
    import hashlib

    param_names = {name for name, _ in module.named_parameters()}
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        if not include_buffers and name not in param_names:
            continue
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
