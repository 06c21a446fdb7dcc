import gzip
import os
import struct

import numpy as np
import pytest

from fpqlab import data
from fpqlab.data import DataError, ParseError


def write_cifar(path, n, record=data.CIFAR10_RECORD, seed=0):
    r = np.random.default_rng(seed)
    rows = r.integers(0, 256, size=(n, record), dtype=np.uint8)
    rows[:, record - 3073] = r.integers(0, 10, size=n)
    if record == data.CIFAR100_RECORD:
        rows[:, 0] = r.integers(0, 20, size=n)
        rows[:, 1] = r.integers(0, 100, size=n)
    path.write_bytes(rows.tobytes())
    return rows


def write_mnist(root, n_train=30, n_test=10, gz=False):
    d = root / "mnist"
    d.mkdir(parents=True, exist_ok=True)
    r = np.random.default_rng(1)
    suffix = ".gz" if gz else ""
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        data.write_idx(d / f"{prefix}-images-idx3-ubyte{suffix}", images=r.integers(0, 256, (n, 28, 28)))
        data.write_idx(d / f"{prefix}-labels-idx1-ubyte{suffix}", labels=np.arange(n) % 10)
    return root


@pytest.mark.parametrize("gz", [False, True])
def test_mnist_idx_round_trip(tmp_path, gz):
    write_mnist(tmp_path, gz=gz)
    ds = data.load("mnist", tmp_path, "train")
    assert ds.images.shape == (30, 1, 28, 28) and ds.images.dtype == np.float32
    assert ds.labels.tolist() == [i % 10 for i in range(30)]
    assert ds.mean == data.MNIST_MEAN and ds.std == data.MNIST_STD


def test_idx_header_is_big_endian(tmp_path):
    p = data.write_idx(tmp_path / "x", images=np.zeros((3, 4, 5)))
    assert struct.unpack(">IIII", p.read_bytes()[:16]) == (0x803, 3, 4, 5)


def test_normalization_constants_applied(tmp_path):
    d = tmp_path / "mnist"
    d.mkdir()
    data.write_idx(d / "t10k-images-idx3-ubyte", images=np.full((2, 28, 28), 255))
    data.write_idx(d / "t10k-labels-idx1-ubyte", labels=[1, 2])
    ds = data.load("mnist", tmp_path, "test")
    np.testing.assert_allclose(ds.images, (1.0 - 0.1307) / 0.3081, rtol=1e-6)


def test_bad_magic_reports_offset(tmp_path):
    write_mnist(tmp_path)
    p = tmp_path / "mnist" / "train-labels-idx1-ubyte"
    raw = bytearray(p.read_bytes())
    raw[3] = 0x99
    p.write_bytes(bytes(raw))
    with pytest.raises(ParseError, match="offset 0") as err:
        data.load("mnist", tmp_path, "train")
    assert err.value.offset == 0


def test_truncated_idx_images(tmp_path):
    write_mnist(tmp_path)
    p = tmp_path / "mnist" / "train-images-idx3-ubyte"
    p.write_bytes(p.read_bytes()[:1000])
    with pytest.raises(ParseError) as err:
        data.load("mnist", tmp_path, "train")
    assert err.value.offset == 1000


def test_cifar10_parse_and_split(tmp_path):
    d = tmp_path / "cifar-10-batches-bin"
    d.mkdir()
    rows = [write_cifar(d / f"data_batch_{i}.bin", 4, seed=i) for i in range(1, 6)]
    write_cifar(d / "test_batch.bin", 3, seed=9)
    tr = data.load("cifar10", tmp_path, "train")
    te = data.load("cifar10", tmp_path, "test")
    assert tr.images.shape == (20, 3, 32, 32) and te.images.shape == (3, 3, 32, 32)
    assert tr.labels[:4].tolist() == rows[0][:, 0].tolist()
    raw = rows[0][1, 1:].reshape(3, 32, 32).astype(np.float32) / 255
    expected = (raw - np.array(data.CIFAR10_MEAN, np.float32)[:, None, None]) / np.array(data.CIFAR10_STD, np.float32)[:, None, None]
    np.testing.assert_allclose(tr.images[1], expected, rtol=1e-5)


def test_cifar_truncated_mid_record_names_offset(tmp_path):
    p = tmp_path / "b.bin"
    write_cifar(p, 3)
    p.write_bytes(p.read_bytes()[: 2 * 3073 + 100])
    with pytest.raises(ParseError, match=f"offset {2 * 3073}"):
        data.parse_cifar(p.read_bytes(), p)


def test_cifar100_uses_fine_label(tmp_path):
    d = tmp_path / "cifar-100-binary"
    d.mkdir()
    rows = write_cifar(d / "test.bin", 5, data.CIFAR100_RECORD)
    ds = data.load("cifar100", tmp_path, "test")
    assert ds.labels.tolist() == rows[:, 1].tolist() and ds.num_classes == 100


def test_missing_files_give_data_error(tmp_path):
    with pytest.raises(DataError, match="missing"):
        data.load("mnist", tmp_path, "train")


def test_env_var_root(tmp_path, monkeypatch):
    write_mnist(tmp_path)
    monkeypatch.setenv(data.ENV_ROOT, str(tmp_path))
    assert len(data.load("mnist", split="test")) == 10
    monkeypatch.delenv(data.ENV_ROOT)
    with pytest.raises(DataError):
        data.load("mnist", split="test")


def test_subset_is_seeded_and_sorted(tmp_path):
    write_mnist(tmp_path, n_train=50)
    a = data.load("mnist", tmp_path, subset=20, subset_seed=1)
    b = data.load("mnist", tmp_path, subset=20, subset_seed=1)
    assert len(a) == 20 and a.images.tobytes() == b.images.tobytes()


def test_labels_must_be_below_num_classes():
    with pytest.raises(ValueError):
        data.Dataset(np.zeros((2, 1)), np.array([0, 10]), "train", 10)


def _toy(n=50000):
    return data.Dataset(np.zeros((n, 1), np.float32), np.zeros(n, np.int64), "train", 10)


def test_calibration_deterministic_and_subset_of_train():
    ds = _toy()
    a, b = data.select_calibration(ds, 100, seed=3), data.select_calibration(ds, 100, seed=3)
    assert a.indices.tolist() == b.indices.tolist() and len(a) == 100
    assert len(set(a.indices)) == 100 and a.indices.max() < len(ds)


def test_calibration_seeds_differ():
    ds = _toy()
    a, b = data.select_calibration(ds, 100, seed=0), data.select_calibration(ds, 100, seed=1)
    assert set(a.indices) != set(b.indices)


def test_calibration_full_size_and_too_large():
    ds = _toy(30)
    assert data.select_calibration(ds, 30).indices.tolist() == list(range(30))
    with pytest.raises(ValueError):
        data.select_calibration(ds, 31)


def test_batches_partial_final_and_partition():
    ds = _toy(10)
    batches = list(data.batch_iter(ds, 4, seed=0, epoch=0))
    assert [len(b[1]) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate([b[2] for b in batches]).tolist()) == list(range(10))


def test_batch_order_depends_on_seed_and_epoch():
    ds = _toy(100)
    order = lambda s, e: np.concatenate([b[2] for b in data.batch_iter(ds, 7, s, e)]).tolist()
    assert order(0, 0) == order(0, 0)
    assert order(0, 0) != order(0, 1) and order(0, 0) != order(1, 0)
    with pytest.raises(ValueError):
        list(data.batch_iter(ds, 0))


def test_cifar_augmentation_flip_and_crop_preserve_shape():
    r = np.random.default_rng(0)
    ds = data.Dataset(r.normal(size=(6, 3, 8, 8)).astype(np.float32), np.zeros(6, np.int64), "train", 10)
    (x, _, idx), = list(data.batch_iter(ds, 6, 0, 0, shuffle=False, augment=True))
    assert x.shape == (6, 3, 8, 8)
    assert not np.array_equal(x, ds.images[idx])


def test_blobs():
    ds = data.load("blobs")
    te = data.load("blobs", split="test")
    assert ds.images.shape == (600, 4) and ds.num_classes == 3
    assert not np.array_equal(ds.images, te.images)


def test_bundled_mnist_sample(tmp_path):
    pytest.importorskip("mlxtend")  # noqa: only needs the package files
    root = data.materialize_mnist_subset(tmp_path)
    tr, te = data.load("mnist", root, "train"), data.load("mnist", root, "test")
    assert tr.images.shape == (4000, 1, 28, 28) and te.images.shape == (1000, 1, 28, 28)
    assert np.bincount(tr.labels).tolist() == [400] * 10
    assert len(set(tr.labels[:50])) > 5  # shuffled, not label-sorted


real_root = os.environ.get(data.ENV_ROOT)


@pytest.mark.skipif(not (real_root and os.path.exists(os.path.join(real_root, "mnist", "train-images-idx3-ubyte"))
                         or real_root and os.path.exists(os.path.join(real_root, "mnist", "train-images-idx3-ubyte.gz"))),
                    reason="full MNIST not present under $FPQLAB_DATA_ROOT")
def test_full_mnist_train_shape():
    ds = data.load("mnist", real_root, "train")
    if len(ds) != 60000:
        pytest.skip("data root holds a reduced MNIST sample")
    assert ds.images.shape == (60000, 1, 28, 28)


@pytest.mark.skipif(not (real_root and os.path.isdir(os.path.join(real_root, "cifar-10-batches-bin"))),
                    reason="CIFAR-10 not present under $FPQLAB_DATA_ROOT")
def test_full_cifar10_test_shape():
    assert data.load("cifar10", real_root, "test").images.shape == (10000, 3, 32, 32)
