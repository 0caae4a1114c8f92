import numpy as np
import pytest

from pcdefense import dataio
from pcdefense.errors import ParseError, ValidationError


@pytest.fixture
def idx_pair(tmp_path):
    """Two all-white 28x28 images with labels 3 and 9."""
    img = tmp_path / "imgs.idx"
    lab = tmp_path / "labels.idx"
    dataio.write_idx_images(img, np.full((2, 28, 28), 255, dtype=np.uint8))
    dataio.write_idx_labels(lab, [3, 9])
    return img, lab


def test_mnist_fixture_parses(idx_pair):
    ds = dataio.load_mnist(*idx_pair)
    assert ds.images.shape == (2, 1, 28, 28)
    assert np.all(ds.images == 1.0)
    assert ds.labels.tolist() == [3, 9]


def test_mnist_bad_magic(idx_pair, tmp_path):
    img, lab = idx_pair
    bad = tmp_path / "bad.idx"
    raw = bytearray(img.read_bytes())
    raw[3] = 0x99
    bad.write_bytes(bytes(raw))
    with pytest.raises(ParseError, match="magic"):
        dataio.load_mnist(bad, lab)


def test_mnist_truncated(idx_pair, tmp_path):
    img, lab = idx_pair
    cut = tmp_path / "cut.idx"
    cut.write_bytes(img.read_bytes()[:-10])
    with pytest.raises(ParseError, match="truncated"):
        dataio.load_mnist(cut, lab)


def test_mnist_count_mismatch(idx_pair, tmp_path):
    img, _ = idx_pair
    lab3 = tmp_path / "three.idx"
    dataio.write_idx_labels(lab3, [1, 2, 3])
    with pytest.raises(ParseError, match="count"):
        dataio.load_mnist(img, lab3)


def test_mnist_gzip_transparent(idx_pair, tmp_path):
    import gzip

    img, lab = idx_pair
    gz = tmp_path / "imgs.idx.gz"
    gz.write_bytes(gzip.compress(img.read_bytes()))
    ds = dataio.load_mnist(gz, lab)
    assert ds.images.shape == (2, 1, 28, 28)


def test_cifar_single_record(tmp_path):
    path = tmp_path / "batch.bin"
    dataio.write_cifar10(path, np.zeros((1, 3, 32, 32), dtype=np.uint8), [7])
    ds = dataio.load_cifar10([path])
    assert ds.labels.tolist() == [7]
    assert ds.images.shape == (1, 3, 32, 32)
    assert np.all(ds.images == 0.0)


def test_cifar_bad_length(tmp_path):
    path = tmp_path / "short.bin"
    path.write_bytes(b"\x00" * 3072)  # one byte short of a record
    with pytest.raises(ParseError, match="3073"):
        dataio.load_cifar10([path])


def test_cifar_label_out_of_range(tmp_path):
    path = tmp_path / "bad_label.bin"
    dataio.write_cifar10(path, np.zeros((1, 3, 32, 32), dtype=np.uint8), [12])
    with pytest.raises(ValidationError, match="k"):
        dataio.load_cifar10([path])


def test_cifar_channel_major_layout(tmp_path):
    # red plane first: record byte 1 maps to channel 0, pixel (0,0)
    img = np.zeros((1, 3, 32, 32), dtype=np.uint8)
    img[0, 0, 0, 0] = 255
    img[0, 2, 31, 31] = 128
    path = tmp_path / "layout.bin"
    dataio.write_cifar10(path, img, [1])
    ds = dataio.load_cifar10([path])
    assert ds.images[0, 0, 0, 0] == 1.0
    assert ds.images[0, 2, 31, 31] == 128 / 255.0


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ds = dataio.Dataset(
        "rt", rng.integers(0, 256, size=(5, 1, 28, 28)) / 255.0, rng.integers(0, 10, size=5)
    )
    dataio.dataset_to_idx(ds, tmp_path / "i.idx", tmp_path / "l.idx")
    back = dataio.load_mnist(tmp_path / "i.idx", tmp_path / "l.idx")
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.labels, ds.labels)


# --- batching ------------------------------------------------------------------


def _tiny(n=10):
    rng = np.random.default_rng(1)
    return dataio.Dataset("t", rng.random((n, 1, 2, 2)), rng.integers(0, 10, size=n))


def test_batch_sizes_include_short_tail():
    sizes = [len(lab) for _, lab in dataio.batches(_tiny(10), 4, seed=0)]
    assert sizes == [4, 4, 2]


def test_batches_same_seed_same_order():
    a = np.concatenate([lab for _, lab in dataio.batches(_tiny(50), 16, seed=5)])
    b = np.concatenate([lab for _, lab in dataio.batches(_tiny(50), 16, seed=5)])
    assert np.array_equal(a, b)


def test_batches_different_seeds_differ():
    ds = _tiny(1000)
    a = np.concatenate([lab for _, lab in dataio.batches(ds, 100, seed=1)])
    b = np.concatenate([lab for _, lab in dataio.batches(ds, 100, seed=2)])
    assert not np.array_equal(a, b)


def test_batches_rejects_bad_size():
    with pytest.raises(ValidationError):
        list(dataio.batches(_tiny(), 0, seed=0))


# --- subset -------------------------------------------------------------------


def test_subset_count():
    ds = _tiny(100)
    sub = dataio.subset(ds, 60, seed=0)
    assert len(sub) == 60


def test_subset_full_is_permutation():
    ds = _tiny(30)
    sub = dataio.subset(ds, 30, seed=3)
    assert sorted(sub.labels.tolist()) == sorted(ds.labels.tolist())
    assert np.allclose(np.sort(sub.images.ravel()), np.sort(ds.images.ravel()))


def test_subset_too_large():
    with pytest.raises(ValidationError):
        dataio.subset(_tiny(10), 11, seed=0)


def test_subset_fraction():
    assert len(dataio.subset(_tiny(100), 0.25, seed=0)) == 25


def test_subset_class_histogram_within_4_sigma():
    # balanced pool of 60k, draw 6k: per-class expectation 600, multinomial
    # sigma = sqrt(n p (1-p)) ~ 23.2, so the 4-sigma band is +/-93
    labels = np.arange(60000) % 10
    ds = dataio.Dataset("big", np.zeros((60000, 1, 1, 1)), labels)
    sub = dataio.subset(ds, 6000, seed=11)
    counts = np.bincount(sub.labels, minlength=10)
    sigma = np.sqrt(6000 * 0.1 * 0.9)
    assert np.all(np.abs(counts - 600) <= 4 * sigma)


def test_dataset_rejects_out_of_range_pixels():
    with pytest.raises(ValidationError):
        dataio.Dataset("bad", np.full((1, 1, 2, 2), 1.5), [0])
