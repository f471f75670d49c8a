"""Dataset parsing and batch iteration.

Benchmark loaders parse the raw distribution files bit-exactly (MNIST IDX,
SVHN cropped-digit .mat containers, CIFAR-10 binary batches) and normalize
pixels to [0,1] by dividing by 255. No mean/std standardization happens
anywhere: perturbation budgets are specified in raw pixel units and must not
be rescaled. Synthetic fixtures (``make_toy_dataset``, ``make_digits_dataset``)
provide deterministic data for tests that must not depend on downloads.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ContractError, DataFormatError
from .seeding import numpy_generator

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 channel-planar pixels


@dataclass(frozen=True)
class DatasetProfile:
    """Static facts about one dataset: shape, class count, split sizes."""

    name: str
    image_shape: tuple  # (height, width, channels)
    num_classes: int
    train_count: int
    test_count: int

    @property
    def channels(self) -> int:
        return self.image_shape[2]


PROFILES = {
    "mnist": DatasetProfile("mnist", (28, 28, 1), 10, 60000, 10000),
    "svhn": DatasetProfile("svhn", (32, 32, 3), 10, 73257, 26032),
    "cifar10": DatasetProfile("cifar10", (32, 32, 3), 10, 50000, 10000),
    "toy": DatasetProfile("toy", (8, 8, 1), 2, 200, 50),
}


def get_profile(name: str) -> DatasetProfile:
    if name not in PROFILES:
        raise ConfigError(
            f"unknown dataset profile {name!r}; choose one of {sorted(PROFILES)}"
        )
    return PROFILES[name]


def toy_profile(image_shape=(8, 8, 1), num_classes=2, train_count=200, test_count=50):
    """Toy profile with non-default geometry or class count."""
    return DatasetProfile("toy", tuple(image_shape), num_classes, train_count, test_count)


@dataclass
class LabeledBatch:
    """Images (N,H,W,C) in [0,1] with integer labels (N,).

    A whole dataset split is represented as one large LabeledBatch; the
    batch iterator slices it into mini-batches of the same type.
    """

    images: torch.Tensor
    labels: torch.Tensor

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, index) -> "LabeledBatch":
        return LabeledBatch(self.images[index], self.labels[index])

    def to(self, dtype: torch.dtype) -> "LabeledBatch":
        return LabeledBatch(self.images.to(dtype), self.labels)


def validate_batch(batch: LabeledBatch, num_classes: int | None = None) -> None:
    """Check the LabeledBatch invariants, raising ContractError on violation."""
    images, labels = batch.images, batch.labels
    if images.ndim != 4:
        raise ContractError(f"images must be (N,H,W,C), got shape {tuple(images.shape)}")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise ContractError(
            f"labels shape {tuple(labels.shape)} does not match batch size {images.shape[0]}"
        )
    if not torch.isfinite(images).all():
        raise ContractError("images contain non-finite values")
    lo, hi = images.min().item(), images.max().item()
    if lo < 0.0 or hi > 1.0:
        raise ContractError(f"pixel values outside [0,1]: min={lo}, max={hi}")
    if num_classes is not None and len(labels) > 0:
        if labels.min().item() < 0 or labels.max().item() >= num_classes:
            raise ContractError(
                f"labels outside [0,{num_classes}): "
                f"min={labels.min().item()}, max={labels.max().item()}"
            )


def _pixels_to_batch(pixels: np.ndarray, labels: np.ndarray) -> LabeledBatch:
    images = torch.from_numpy(pixels.astype(np.float32) / 255.0)
    return LabeledBatch(images, torch.from_numpy(labels.astype(np.int64)))


def _open_maybe_gzip(path: str):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path: str, expected_magic: int, dims: int) -> np.ndarray:
    """Read one big-endian IDX file and return its payload array."""
    with _open_maybe_gzip(path) as f:
        header = f.read(4 * (1 + dims))
        if len(header) < 4 * (1 + dims):
            raise DataFormatError(
                f"{path}: truncated IDX header at offset {len(header)}"
            )
        fields = struct.unpack(f">{1 + dims}I", header)
        magic, shape = fields[0], fields[1:]
        if magic != expected_magic:
            raise DataFormatError(
                f"{path}: bad IDX magic 0x{magic:08x} at offset 0, "
                f"expected 0x{expected_magic:08x}"
            )
        count = int(np.prod(shape))
        payload = f.read(count + 1)  # read one extra byte to detect overlong files
        if len(payload) < count:
            raise DataFormatError(
                f"{path}: truncated IDX payload at offset {4 * (1 + dims) + len(payload)}, "
                f"expected {count} bytes"
            )
        return np.frombuffer(payload[:count], dtype=np.uint8).reshape(shape)


def _resolve(root_path: str, candidates) -> str:
    for name in candidates:
        p = os.path.join(root_path, name)
        if os.path.exists(p):
            return p
    raise DataFormatError(
        f"none of {list(candidates)} found under {root_path!r}"
    )


def load_mnist(root_path: str, split: str, strict_counts: bool = True) -> LabeledBatch:
    """Load one MNIST split from IDX files under root_path.

    Accepts the canonical file names with either ``-idx3-`` or ``.idx3-``
    separators, raw or gzipped.
    """
    stem = {"train": "train", "test": "t10k"}[split]
    image_path = _resolve(root_path, [
        f"{stem}-images-idx3-ubyte", f"{stem}-images.idx3-ubyte",
        f"{stem}-images-idx3-ubyte.gz", f"{stem}-images.idx3-ubyte.gz",
    ])
    label_path = _resolve(root_path, [
        f"{stem}-labels-idx1-ubyte", f"{stem}-labels.idx1-ubyte",
        f"{stem}-labels-idx1-ubyte.gz", f"{stem}-labels.idx1-ubyte.gz",
    ])
    pixels = _read_idx(image_path, IDX_IMAGE_MAGIC, dims=3)
    labels = _read_idx(label_path, IDX_LABEL_MAGIC, dims=1)
    if pixels.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"image/label count mismatch: {pixels.shape[0]} images in {image_path} "
            f"vs {labels.shape[0]} labels in {label_path}"
        )
    if strict_counts:
        expected = PROFILES["mnist"].train_count if split == "train" else PROFILES["mnist"].test_count
        if pixels.shape[0] != expected:
            raise DataFormatError(
                f"{image_path}: {split} split has {pixels.shape[0]} samples, expected {expected}"
            )
    return _pixels_to_batch(pixels[..., None], labels)


def load_svhn(root_path: str, split: str, strict_counts: bool = True) -> LabeledBatch:
    """Load one SVHN cropped-digits split from its .mat container.

    Upstream labels use 10 to denote digit 0; they are remapped so every
    label lives in [0,10).
    """
    from scipy.io import loadmat

    path = _resolve(root_path, [f"{split}_32x32.mat"])
    container = loadmat(path)
    if "X" not in container or "y" not in container:
        raise DataFormatError(
            f"{path}: missing key(s) {sorted({'X', 'y'} - set(container))} in SVHN container"
        )
    pixels = container["X"]  # (32,32,3,N)
    labels = container["y"].reshape(-1).astype(np.int64)
    labels[labels == 10] = 0
    pixels = np.transpose(pixels, (3, 0, 1, 2))
    if pixels.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{path}: image/label count mismatch: {pixels.shape[0]} vs {labels.shape[0]}"
        )
    if strict_counts:
        expected = PROFILES["svhn"].train_count if split == "train" else PROFILES["svhn"].test_count
        if pixels.shape[0] != expected:
            raise DataFormatError(
                f"{path}: {split} split has {pixels.shape[0]} samples, expected {expected}"
            )
    return _pixels_to_batch(pixels, labels)


def load_cifar10(root_path: str, split: str, strict_counts: bool = True) -> LabeledBatch:
    """Load one CIFAR-10 split from the 3073-byte-record binary batches."""
    if split == "train":
        names = [f"data_batch_{i}.bin" for i in range(1, 6)]
    else:
        names = ["test_batch.bin"]
    for sub in ("", "cifar10", "cifar-10-batches-bin"):
        base = os.path.join(root_path, sub)
        if all(os.path.exists(os.path.join(base, n)) for n in names):
            break
    else:
        raise DataFormatError(f"CIFAR-10 batch files {names} not found under {root_path!r}")

    pixel_parts, label_parts = [], []
    for name in names:
        path = os.path.join(base, name)
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size % CIFAR_RECORD_BYTES != 0:
            raise DataFormatError(
                f"{path}: size {raw.size} is not a multiple of the "
                f"{CIFAR_RECORD_BYTES}-byte record length"
            )
        records = raw.reshape(-1, CIFAR_RECORD_BYTES)
        label_parts.append(records[:, 0].astype(np.int64))
        # channel-planar bytes: 1024 red, 1024 green, 1024 blue
        planes = records[:, 1:].reshape(-1, 3, 32, 32)
        pixel_parts.append(np.transpose(planes, (0, 2, 3, 1)))
    pixels = np.concatenate(pixel_parts)
    labels = np.concatenate(label_parts)
    if strict_counts:
        expected = PROFILES["cifar10"].train_count if split == "train" else PROFILES["cifar10"].test_count
        if pixels.shape[0] != expected:
            raise DataFormatError(
                f"{base}: {split} split has {pixels.shape[0]} samples, expected {expected}"
            )
    return _pixels_to_batch(pixels, labels)


def _toy_templates(profile: DatasetProfile) -> np.ndarray:
    """Per-class pixel templates: brightness rises with the class index and
    stripe orientation alternates, so classes are linearly separable."""
    h, w, c = profile.image_shape
    k = profile.num_classes
    templates = np.zeros((k, h, w, c), dtype=np.float64)
    for cls in range(k):
        base = 0.2 + 0.6 * (cls / max(k - 1, 1))
        stripe = np.zeros((h, w))
        if cls % 2 == 0:
            stripe[::2, :] = 1.0
        else:
            stripe[:, ::2] = 1.0
        templates[cls] = (base + 0.1 * (stripe - 0.5))[..., None]
    return np.clip(templates, 0.05, 0.95)


def make_toy_dataset(seed: int, profile: DatasetProfile | None = None):
    """Deterministic two-class (by default) synthetic dataset.

    Returns (train, test) LabeledBatch pairs. Same seed, same bytes.
    """
    profile = profile or PROFILES["toy"]
    if profile.name != "toy":
        raise ContractError(f"make_toy_dataset requires the toy profile, got {profile.name!r}")
    rng = numpy_generator(seed)
    templates = _toy_templates(profile)

    def draw(count: int) -> LabeledBatch:
        labels = rng.integers(0, profile.num_classes, size=count)
        images = templates[labels]
        noise = rng.normal(0.0, 0.05, size=images.shape)
        images = np.clip(images + noise, 0.0, 1.0).astype(np.float32)
        return LabeledBatch(torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64)))

    return draw(profile.train_count), draw(profile.test_count)


_DIGIT_GLYPHS = [
    (" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "),
    ("  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "),
    (" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"),
    (" ### ", "#   #", "    #", " ### ", "    #", "#   #", " ### "),
    ("   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "),
    ("#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "),
    (" ### ", "#    ", "#    ", "#### ", "#   #", "#   #", " ### "),
    ("#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "),
    (" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "),
    (" ### ", "#   #", "#   #", " ####", "    #", "    #", " ### "),
]


def make_digits_dataset(seed: int, train_count: int = 5000, test_count: int = 1000):
    """Deterministic 10-class MNIST-shaped fixture: rendered digit glyphs with
    random placement, intensity jitter, and pixel noise.

    Stands in for real MNIST files in tests and demos where downloads are
    unavailable; works with models built for the ``mnist`` profile.
    """
    rng = numpy_generator(seed)
    glyphs = np.zeros((10, 21, 15), dtype=np.float64)
    for digit, rows in enumerate(_DIGIT_GLYPHS):
        bitmap = np.array([[ch == "#" for ch in row] for row in rows], dtype=np.float64)
        glyphs[digit] = np.kron(bitmap, np.ones((3, 3)))

    def draw(count: int) -> LabeledBatch:
        labels = rng.integers(0, 10, size=count)
        images = np.zeros((count, 28, 28), dtype=np.float64)
        rows = rng.integers(0, 8, size=count)
        cols = rng.integers(0, 14, size=count)
        # low stroke contrast plus noise keeps margins realistic: a plain
        # CNN trained on this is as attackable as on real handwriting
        intensity = rng.uniform(0.5, 0.85, size=count)
        for i in range(count):
            images[i, rows[i]:rows[i] + 21, cols[i]:cols[i] + 15] = intensity[i] * glyphs[labels[i]]
        images += rng.normal(0.0, 0.12, size=images.shape)
        images = np.clip(images, 0.0, 1.0).astype(np.float32)
        return LabeledBatch(torch.from_numpy(images[..., None]), torch.from_numpy(labels.astype(np.int64)))

    return draw(train_count), draw(test_count)


def batch_iterator(stream: LabeledBatch, batch_size: int, shuffle_seed: int | None = None):
    """Yield mini-batches; with a seed the order is a seeded permutation,
    otherwise insertion order. The final partial batch is emitted."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    n = len(stream)
    if shuffle_seed is None:
        order = torch.arange(n)
    else:
        order = torch.from_numpy(numpy_generator(shuffle_seed).permutation(n))
    for start in range(0, n, batch_size):
        yield stream.take(order[start:start + batch_size])


def stratified_subset(data: LabeledBatch, count: int) -> LabeledBatch:
    """Fixed class-balanced subset: the first ceil(count/k) samples of each
    class in dataset order, trimmed to ``count``. Deterministic."""
    if count >= len(data):
        return data
    labels = data.labels.numpy()
    classes = np.unique(labels)
    per_class = -(-count // len(classes))
    chosen = []
    for cls in classes:
        chosen.extend(np.flatnonzero(labels == cls)[:per_class])
    chosen = np.sort(np.array(chosen))[:count]
    return data.take(torch.from_numpy(chosen))


EXPECTED_FILES = {
    "mnist": ["train-images-idx3-ubyte[.gz]", "train-labels-idx1-ubyte[.gz]",
              "t10k-images-idx3-ubyte[.gz]", "t10k-labels-idx1-ubyte[.gz]"],
    "svhn": ["train_32x32.mat", "test_32x32.mat"],
    "cifar10": ["data_batch_1.bin ... data_batch_5.bin", "test_batch.bin"],
}


def load_dataset(profile_name: str, root_path: str | None, split: str,
                 seed: int = 0, synthetic: bool = False) -> LabeledBatch:
    """Dataset dispatch for the CLI. ``synthetic=True`` substitutes the
    deterministic digits fixture for MNIST when no files are present."""
    profile = get_profile(profile_name)
    if profile.name == "toy":
        train, test = make_toy_dataset(seed, profile)
        return train if split == "train" else test
    if root_path is None or not os.path.isdir(root_path):
        if synthetic and profile.name == "mnist":
            train, test = make_digits_dataset(seed)
            return train if split == "train" else test
        raise ConfigError(
            f"data root {root_path!r} not found; expected {profile_name} files: "
            f"{EXPECTED_FILES[profile_name]} (loaders never download)"
        )
    loader = {"mnist": load_mnist, "svhn": load_svhn, "cifar10": load_cifar10}[profile.name]
    try:
        return loader(root_path, split)
    except DataFormatError:
        if synthetic and profile.name == "mnist":
            train, test = make_digits_dataset(seed)
            return train if split == "train" else test
        raise
