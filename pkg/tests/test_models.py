"""Model architecture, determinism, and differentiability tests."""

import pytest
import torch
from torch import nn

from atgan import models
from atgan.data import get_profile, make_toy_dataset, toy_profile
from atgan.errors import ConfigError, ContractError
from atgan.gradcheck import compare_gradients, module_parameter_map, randomize_for_check

TOL = 1e-4


def toy_batch(n=2, seed=0, dtype=torch.float64):
    train, _ = make_toy_dataset(seed)
    return train.images[:n].to(dtype), train.labels[:n]


@pytest.fixture(scope="module")
def tiny_models():
    g = models.build_generator("toy", 11).double()
    d = models.build_discriminator("toy", 12).double()
    randomize_for_check(g, 21)
    randomize_for_check(d, 22)
    g.eval()
    d.eval()
    return g, d


class TestGeneratorShapes:
    @pytest.mark.parametrize("profile,scale", [
        ("toy", "mini"), ("mnist", "mini"), ("mnist", "paper"),
        ("svhn", "mini"), ("svhn", "paper"),
        ("cifar10", "mini"), ("cifar10", "paper"),
    ])
    def test_output_shape_equals_input_shape(self, profile, scale):
        p = get_profile(profile)
        g = models.build_generator(p, 0, scale)
        g.eval()
        x = torch.rand(2, *p.image_shape)
        with torch.no_grad():
            out = g(x)
        assert out.shape == x.shape

    def test_outputs_bounded(self):
        g = models.build_generator("toy", 0)
        g.eval()
        for x in (torch.zeros(3, 8, 8, 1), torch.ones(3, 8, 8, 1), torch.rand(3, 8, 8, 1)):
            with torch.no_grad():
                out = g(x)
            assert out.min().item() >= 0.0 and out.max().item() <= 1.0

    def test_cifar_has_three_downsamples_and_three_upsamples(self):
        g = models.build_generator("cifar10", 0, "paper")
        down = [m for m in g.body if isinstance(m, nn.Conv2d) and m.stride == (2, 2)]
        up = [m for m in g.body if isinstance(m, nn.ConvTranspose2d)]
        assert len(down) == 3 and len(up) == 3

    def test_mnist_paper_structure(self):
        g = models.build_generator("mnist", 0, "paper")
        res = [m for m in g.body if isinstance(m, models.ResidualBlock)]
        assert len(res) == 4
        convs = [m for m in g.body if isinstance(m, nn.Conv2d)]
        assert convs[0].out_channels == 8
        assert convs[-1].out_channels == 1  # grayscale output despite 3-channel table entry

    def test_shape_contract_error(self):
        g = models.build_generator("toy", 0)
        with pytest.raises(ContractError, match="expected input"):
            g(torch.rand(2, 9, 9, 1))

    def test_batch_size_preserved(self):
        g = models.build_generator("toy", 0)
        g.eval()
        with torch.no_grad():
            assert g(torch.rand(5, 8, 8, 1)).shape[0] == 5


class TestDiscriminator:
    @pytest.mark.parametrize("profile,scale,k", [
        ("toy", "mini", 2), ("mnist", "paper", 10),
        ("svhn", "mini", 10), ("cifar10", "mini", 10),
    ])
    def test_head_shapes(self, profile, scale, k):
        p = get_profile(profile)
        d = models.build_discriminator(p, 0, scale)
        d.eval()
        x = torch.rand(3, *p.image_shape)
        with torch.no_grad():
            scores, logit = d(x)
        assert scores.shape == (3, k)
        assert logit.shape == (3,)
        probs = torch.softmax(scores, dim=1)
        assert torch.allclose(probs.sum(dim=1), torch.ones(3), atol=1e-6)
        sig = torch.sigmoid(logit)
        assert (sig > 0).all() and (sig < 1).all()

    def test_unknown_profile(self):
        with pytest.raises(ConfigError):
            models.build_generator("imagenet", 0)
        with pytest.raises(ConfigError):
            models.build_discriminator("toy", 0, scale="huge")


class TestDeterminism:
    def test_same_seed_same_parameters(self):
        a = models.build_discriminator("toy", 5)
        b = models.build_discriminator("toy", 5)
        assert models.state_hash(a) == models.state_hash(b)
        c = models.build_discriminator("toy", 6)
        assert models.state_hash(a) != models.state_hash(c)

    def test_eval_forward_bitwise_stable(self):
        g = models.build_generator("toy", 3)
        g.eval()
        x = torch.rand(4, 8, 8, 1, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            assert torch.equal(g(x), g(x))

    def test_init_scheme_zero_biases(self):
        d = models.build_discriminator("mnist", 0, "mini")
        for name, p in d.named_parameters():
            if name.endswith("bias"):
                assert torch.equal(p, torch.zeros_like(p))


class TestGradients:
    """Analytic gradients of a scalar probe against central differences."""

    def test_generator_input_and_parameter_gradients(self, tiny_models):
        g, _ = tiny_models
        x = toy_batch()[0].clone().requires_grad_(True)

        def probe():
            return g(x).sum()

        wrt = {"input": x}
        wrt.update(module_parameter_map(g, "g"))
        errors = compare_gradients(probe, wrt)
        worst = max(errors, key=errors.get)
        assert errors[worst] < TOL, f"{worst}: rel err {errors[worst]:.3g}"

    def test_discriminator_gradients(self, tiny_models):
        _, d = tiny_models
        x = toy_batch()[0].clone().requires_grad_(True)

        def probe():
            scores, logit = d(x)
            return scores.sum() + logit.sum()

        wrt = {"input": x}
        wrt.update(module_parameter_map(d, "d"))
        errors = compare_gradients(probe, wrt)
        worst = max(errors, key=errors.get)
        assert errors[worst] < TOL, f"{worst}: rel err {errors[worst]:.3g}"


class TestLossNetwork:
    def test_tap_is_first_conv_block(self):
        clf = models.build_classifier("toy", 0)
        net = models.build_loss_network("toy", clf)
        assert isinstance(net.prefix[0], nn.Conv2d)
        assert net.feature_shape == (4, 4, 4)  # channels, H/2, W/2 for the toy trunk

    def test_frozen_and_deterministic(self):
        clf = models.build_classifier("toy", 1)
        net = models.build_loss_network("toy", clf)
        assert all(not p.requires_grad for p in net.parameters())
        net.train()  # must stay pinned to eval
        assert not net.training
        x = torch.rand(2, 8, 8, 1, generator=torch.Generator().manual_seed(1))
        assert torch.equal(net.features(x), net.features(x))

    def test_freeze_isolated_from_classifier_updates(self):
        clf = models.build_classifier("toy", 2)
        net = models.build_loss_network("toy", clf)
        before = models.state_hash(net)
        with torch.no_grad():
            for p in clf.parameters():
                p.add_(1.0)
        assert models.state_hash(net) == before

    def test_profile_mismatch(self):
        clf = models.build_classifier("toy", 0)
        with pytest.raises(ConfigError, match="does not match"):
            models.build_loss_network("mnist", clf)

    def test_requires_classifier(self):
        with pytest.raises(ConfigError):
            models.build_loss_network("toy", models.build_generator("toy", 0))


class TestClassifier:
    def test_matches_discriminator_minus_head(self):
        clf = models.build_classifier("mnist", 0, "mini")
        disc = models.build_discriminator("mnist", 0, "mini")
        clf_convs = [m for m in clf.trunk if isinstance(m, nn.Conv2d)]
        disc_convs = [m for m in disc.trunk if isinstance(m, nn.Conv2d)]
        assert len(clf_convs) == len(disc_convs)
        assert not hasattr(clf, "disc_head")

    def test_toy_class_count(self):
        clf = models.build_classifier(toy_profile(num_classes=2), 0)
        with torch.no_grad():
            assert clf(torch.rand(2, 8, 8, 1)).shape == (2, 2)
