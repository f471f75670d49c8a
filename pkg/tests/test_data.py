"""Dataset parser and batch iteration tests, driven by synthesized format
fixtures so no benchmark downloads are needed."""

import gzip
import struct

import numpy as np
import pytest
import torch

from atgan import data
from atgan.errors import ContractError, DataFormatError
from atgan.tensorio import load_tensors, save_tensors


def write_idx_images(path, pixels):
    """pixels: uint8 array (n, h, w)."""
    n, h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", data.IDX_IMAGE_MAGIC, n, h, w))
        f.write(pixels.tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", data.IDX_LABEL_MAGIC, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


@pytest.fixture
def mnist_fixture(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(7, 28, 28), dtype=np.uint8)
    pixels[0, 0, 0] = 255
    pixels[0, 0, 1] = 0
    labels = rng.integers(0, 10, size=7).astype(np.uint8)
    write_idx_images(tmp_path / "train-images-idx3-ubyte", pixels)
    write_idx_labels(tmp_path / "train-labels-idx1-ubyte", labels)
    return tmp_path, pixels, labels


class TestMnistLoader:
    def test_loads_shapes_and_values(self, mnist_fixture):
        root, pixels, labels = mnist_fixture
        batch = data.load_mnist(str(root), "train", strict_counts=False)
        assert batch.images.shape == (7, 28, 28, 1)
        assert batch.labels.tolist() == labels.tolist()
        # scaling endpoints are exact
        assert batch.images[0, 0, 0, 0].item() == 1.0
        assert batch.images[0, 0, 1, 0].item() == 0.0
        expected = torch.from_numpy(pixels.astype(np.float32) / 255.0)
        assert torch.equal(batch.images[..., 0], expected)

    def test_gzip_variant(self, mnist_fixture, tmp_path):
        root, pixels, labels = mnist_fixture
        gz = tmp_path / "gz"
        gz.mkdir()
        for name in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"):
            with open(root / name, "rb") as f:
                raw = f.read()
            with gzip.open(gz / (name + ".gz"), "wb") as f:
                f.write(raw)
        batch = data.load_mnist(str(gz), "train", strict_counts=False)
        assert batch.images.shape == (7, 28, 28, 1)

    def test_bad_magic_names_offset(self, mnist_fixture):
        root, _, _ = mnist_fixture
        path = root / "train-images-idx3-ubyte"
        raw = bytearray(path.read_bytes())
        raw[0] = 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError, match="magic.*offset 0"):
            data.load_mnist(str(root), "train", strict_counts=False)

    def test_truncated_payload(self, mnist_fixture):
        root, _, _ = mnist_fixture
        path = root / "train-images-idx3-ubyte"
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(DataFormatError, match="truncated"):
            data.load_mnist(str(root), "train", strict_counts=False)

    def test_count_mismatch(self, mnist_fixture):
        root, _, _ = mnist_fixture
        write_idx_labels(root / "train-labels-idx1-ubyte", np.zeros(5, dtype=np.uint8))
        with pytest.raises(DataFormatError, match="mismatch"):
            data.load_mnist(str(root), "train", strict_counts=False)

    def test_strict_counts_rejects_small_files(self, mnist_fixture):
        root, _, _ = mnist_fixture
        with pytest.raises(DataFormatError, match="expected 60000"):
            data.load_mnist(str(root), "train")

    def test_missing_files(self, tmp_path):
        with pytest.raises(DataFormatError, match="not found|none of"):
            data.load_mnist(str(tmp_path), "train")


class TestSvhnLoader:
    def _write(self, tmp_path, n=6):
        from scipy.io import savemat

        rng = np.random.default_rng(1)
        pixels = rng.integers(0, 256, size=(32, 32, 3, n), dtype=np.uint8)
        labels = np.array([10, 1, 2, 3, 10, 5][:n]).reshape(-1, 1)
        savemat(tmp_path / "train_32x32.mat", {"X": pixels, "y": labels})
        return pixels, labels

    def test_label_ten_maps_to_zero(self, tmp_path):
        pixels, labels = self._write(tmp_path)
        batch = data.load_svhn(str(tmp_path), "train", strict_counts=False)
        assert batch.labels.tolist() == [0, 1, 2, 3, 0, 5]
        assert batch.images.shape == (6, 32, 32, 3)
        expected = torch.from_numpy(np.transpose(pixels, (3, 0, 1, 2)).astype(np.float32) / 255)
        assert torch.equal(batch.images, expected)

    def test_missing_key(self, tmp_path):
        from scipy.io import savemat

        savemat(tmp_path / "train_32x32.mat", {"X": np.zeros((32, 32, 3, 1), dtype=np.uint8)})
        with pytest.raises(DataFormatError, match="missing key"):
            data.load_svhn(str(tmp_path), "train", strict_counts=False)

    def test_strict_counts(self, tmp_path):
        self._write(tmp_path)
        with pytest.raises(DataFormatError, match="expected 73257"):
            data.load_svhn(str(tmp_path), "train")

    def test_loaded_pixels_valid(self, tmp_path):
        self._write(tmp_path)
        batch = data.load_svhn(str(tmp_path), "train", strict_counts=False)
        data.validate_batch(batch, num_classes=10)


class TestCifarLoader:
    def _write(self, tmp_path, n_per_file=4):
        rng = np.random.default_rng(2)
        all_pixels, all_labels = [], []
        for name in [f"data_batch_{i}.bin" for i in range(1, 6)]:
            records = []
            for _ in range(n_per_file):
                label = int(rng.integers(0, 10))
                planes = rng.integers(0, 256, size=3072, dtype=np.uint8)
                records.append(bytes([label]) + planes.tobytes())
                all_labels.append(label)
                all_pixels.append(planes.reshape(3, 32, 32).transpose(1, 2, 0))
            (tmp_path / name).write_bytes(b"".join(records))
        return np.stack(all_pixels), np.array(all_labels)

    def test_record_layout(self, tmp_path):
        pixels, labels = self._write(tmp_path)
        batch = data.load_cifar10(str(tmp_path), "train", strict_counts=False)
        assert batch.images.shape == (20, 32, 32, 3)
        assert batch.labels.tolist() == labels.tolist()
        expected = torch.from_numpy(pixels.astype(np.float32) / 255)
        assert torch.equal(batch.images, expected)

    def test_first_byte_is_label(self, tmp_path):
        record = bytes([7]) + bytes(3072)
        for name in [f"data_batch_{i}.bin" for i in range(1, 6)]:
            (tmp_path / name).write_bytes(record)
        batch = data.load_cifar10(str(tmp_path), "train", strict_counts=False)
        assert batch.labels.tolist() == [7] * 5

    def test_bad_record_length(self, tmp_path):
        for name in [f"data_batch_{i}.bin" for i in range(1, 6)]:
            (tmp_path / name).write_bytes(bytes(3073))
        (tmp_path / "data_batch_3.bin").write_bytes(bytes(3072))
        with pytest.raises(DataFormatError, match="multiple"):
            data.load_cifar10(str(tmp_path), "train", strict_counts=False)

    def test_loaded_pixels_valid(self, tmp_path):
        self._write(tmp_path)
        batch = data.load_cifar10(str(tmp_path), "train", strict_counts=False)
        data.validate_batch(batch, num_classes=10)


class TestToyDataset:
    def test_same_seed_same_bytes(self):
        a_train, a_test = data.make_toy_dataset(0)
        b_train, b_test = data.make_toy_dataset(0)
        assert torch.equal(a_train.images, b_train.images)
        assert torch.equal(a_train.labels, b_train.labels)
        assert torch.equal(a_test.images, b_test.images)

    def test_different_seed_differs(self):
        a, _ = data.make_toy_dataset(0)
        b, _ = data.make_toy_dataset(1)
        assert not torch.equal(a.images, b.images)

    def test_default_counts(self):
        train, test = data.make_toy_dataset(0)
        assert len(train) == 200 and len(test) == 50

    def test_class_brightness_ordering(self):
        train, _ = data.make_toy_dataset(3)
        mean0 = train.images[train.labels == 0].mean().item()
        mean1 = train.images[train.labels == 1].mean().item()
        assert mean0 < mean1

    def test_pixels_in_range(self):
        train, test = data.make_toy_dataset(5)
        for b in (train, test):
            data.validate_batch(b, num_classes=2)

    def test_custom_profile(self):
        profile = data.toy_profile(image_shape=(6, 6, 1), num_classes=4,
                                   train_count=40, test_count=8)
        train, test = data.make_toy_dataset(0, profile)
        assert train.images.shape == (40, 6, 6, 1)
        assert int(train.labels.max()) <= 3


class TestDigitsDataset:
    def test_deterministic_and_valid(self):
        a_train, a_test = data.make_digits_dataset(0, 50, 20)
        b_train, _ = data.make_digits_dataset(0, 50, 20)
        assert torch.equal(a_train.images, b_train.images)
        assert a_train.images.shape == (50, 28, 28, 1)
        data.validate_batch(a_train, num_classes=10)
        data.validate_batch(a_test, num_classes=10)

    def test_all_ten_classes_present(self):
        train, _ = data.make_digits_dataset(1, 400, 10)
        assert set(train.labels.tolist()) == set(range(10))


class TestBatchIterator:
    def test_partial_final_batch(self):
        train, _ = data.make_toy_dataset(0, data.toy_profile(train_count=10, test_count=2))
        sizes = [len(b) for b in data.batch_iterator(train, 4)]
        assert sizes == [4, 4, 2]

    def test_seeded_order_reproducible(self):
        train, _ = data.make_toy_dataset(0)
        a = [b.labels.tolist() for b in data.batch_iterator(train, 16, shuffle_seed=9)]
        b = [b.labels.tolist() for b in data.batch_iterator(train, 16, shuffle_seed=9)]
        assert a == b

    def test_no_seed_keeps_insertion_order(self):
        train, _ = data.make_toy_dataset(0)
        chunks = [b.labels for b in data.batch_iterator(train, 64)]
        assert torch.equal(torch.cat(chunks), train.labels)

    def test_shuffle_is_permutation(self):
        train, _ = data.make_toy_dataset(0)
        chunks = [b.labels for b in data.batch_iterator(train, 7, shuffle_seed=3)]
        shuffled = torch.cat(chunks)
        assert sorted(shuffled.tolist()) == sorted(train.labels.tolist())
        assert not torch.equal(shuffled, train.labels)

    def test_empty_stream(self):
        empty = data.LabeledBatch(torch.zeros(0, 8, 8, 1), torch.zeros(0, dtype=torch.int64))
        assert list(data.batch_iterator(empty, 4)) == []

    def test_bad_batch_size(self):
        train, _ = data.make_toy_dataset(0)
        with pytest.raises(ContractError):
            list(data.batch_iterator(train, 0))


class TestValidateBatch:
    def test_rejects_out_of_range_pixels(self):
        bad = data.LabeledBatch(torch.full((2, 8, 8, 1), 1.5), torch.zeros(2, dtype=torch.int64))
        with pytest.raises(ContractError, match=r"\[0,1\]"):
            data.validate_batch(bad)

    def test_rejects_label_mismatch(self):
        bad = data.LabeledBatch(torch.zeros(2, 8, 8, 1), torch.zeros(3, dtype=torch.int64))
        with pytest.raises(ContractError, match="batch size"):
            data.validate_batch(bad)

    def test_rejects_label_range(self):
        bad = data.LabeledBatch(torch.zeros(2, 8, 8, 1), torch.tensor([0, 9]))
        with pytest.raises(ContractError, match="labels outside"):
            data.validate_batch(bad, num_classes=2)


class TestStratifiedSubset:
    def test_balanced_and_deterministic(self):
        train, _ = data.make_digits_dataset(0, 900, 10)
        sub = data.stratified_subset(train, 100)
        assert len(sub) == 100
        counts = torch.bincount(sub.labels, minlength=10)
        assert int(counts.min()) >= 9
        again = data.stratified_subset(train, 100)
        assert torch.equal(sub.images, again.images)

    def test_small_data_passthrough(self):
        train, _ = data.make_toy_dataset(0)
        assert data.stratified_subset(train, 10_000) is train


class TestLoadDataset:
    def test_toy_dispatch(self):
        batch = data.load_dataset("toy", None, "train")
        assert len(batch) == 200

    def test_missing_root_lists_expected_files(self):
        with pytest.raises(Exception, match="train-images-idx3-ubyte"):
            data.load_dataset("mnist", None, "train")

    def test_synthetic_fallback(self):
        batch = data.load_dataset("mnist", None, "test", seed=1, synthetic=True)
        assert batch.images.shape[1:] == (28, 28, 1)
        data.validate_batch(batch, num_classes=10)

    def test_real_files_win_over_synthetic(self, mnist_fixture):
        root, _, _ = mnist_fixture
        # files present but undersized: strict count check fails, and with
        # synthetic enabled the loader falls back rather than erroring
        batch = data.load_dataset("mnist", str(root), "train", synthetic=True)
        assert len(batch) == 5000


def test_batch_container_roundtrip_bit_exact(tmp_path):
    train, _ = data.make_toy_dataset(0)
    path = str(tmp_path / "batch.bin")
    save_tensors(path, {"images": train.images, "labels": train.labels}, {"kind": "batch"})
    meta, tensors = load_tensors(path)
    assert meta["kind"] == "batch"
    assert torch.equal(tensors["images"], train.images)
    assert tensors["images"].dtype == train.images.dtype
    assert torch.equal(tensors["labels"], train.labels)
