import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from conftest import real_cifar_dir, write_fake_cifar
from pixelwarden.dataset_io import (
    DatasetError, LabeledDataset, generate_synthetic, generate_textured,
    load_cifar10_binary, load_png_directory, planar_to_interleaved, split_train_val,
    write_dataset,
)
from pixelwarden.tamper import PoisonPlan, TamperSpec, poison_dataset


def byte_dump_record(path, index):
    """Hand decode of one CIFAR record straight from the file bytes."""
    raw = open(path, "rb").read()
    rec = raw[index * 3073:(index + 1) * 3073]
    label = rec[0]
    first_row = [(rec[1 + c], rec[1 + 1024 + c], rec[1 + 2048 + c]) for c in range(32)]
    return label, first_row


def interleaved_to_planar(images):
    """Independent inverse: explicit loops over channels."""
    n, h, w, _ = images.shape
    plane = h * w
    out = np.empty((n, 3 * plane), dtype=np.uint8)
    for ch in range(3):
        out[:, ch * plane:(ch + 1) * plane] = images[:, :, :, ch].reshape(n, plane)
    return out


def test_cifar_first_record_matches_byte_dump(fake_cifar):
    ds = load_cifar10_binary(fake_cifar, "train")
    label, row = byte_dump_record(fake_cifar / "data_batch_1.bin", 0)
    assert ds.labels[0] == label
    assert [tuple(px) for px in ds.images[0, 0].tolist()] == row
    # a record from the third file
    label, row = byte_dump_record(fake_cifar / "data_batch_3.bin", 7)
    assert ds.labels[2 * 40 + 7] == label
    assert [tuple(px) for px in ds.images[87, 0].tolist()] == row


def test_cifar_splits_and_names(fake_cifar):
    train = load_cifar10_binary(fake_cifar, "train")
    test = load_cifar10_binary(fake_cifar, "test")
    assert len(train) == 200 and len(test) == 40
    assert train.image_shape == (32, 32, 3)
    assert train.class_names[0] == "airplane" and train.num_classes == 10
    assert test.split == "test"


def test_cifar_plane_conversion_is_bijective(fake_cifar):
    ds = load_cifar10_binary(fake_cifar, "test")
    raw = np.fromfile(fake_cifar / "test_batch.bin", dtype=np.uint8).reshape(-1, 3073)[:, 1:]
    assert np.array_equal(interleaved_to_planar(ds.images), raw)


@given(n=st.integers(1, 4), h=st.integers(1, 9), w=st.integers(1, 9), seed=st.integers(0, 2**32))
def test_planar_roundtrip_property(n, h, w, seed):
    raw = np.random.default_rng(seed).integers(0, 256, size=(n, 3 * h * w), dtype=np.uint8)
    assert np.array_equal(interleaved_to_planar(planar_to_interleaved(raw, h, w)), raw)


def test_cifar_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cifar10_binary(tmp_path, "train")


def test_cifar_truncated_file(tmp_path):
    root = write_fake_cifar(tmp_path / "c", records_per_file=3)
    with open(root / "test_batch.bin", "ab") as fh:
        fh.write(b"\x00" * 10)
    with pytest.raises(DatasetError, match="multiple"):
        load_cifar10_binary(root, "test")


def test_cifar_bad_label(tmp_path):
    root = write_fake_cifar(tmp_path / "c", records_per_file=3)
    raw = bytearray((root / "test_batch.bin").read_bytes())
    raw[3073] = 10
    (root / "test_batch.bin").write_bytes(bytes(raw))
    with pytest.raises(DatasetError, match="label"):
        load_cifar10_binary(root, "test")


@pytest.mark.cifar
def test_real_cifar_counts():
    root = real_cifar_dir()
    if root is None:
        pytest.skip("CIFAR-10 binary release not available under $PIXELWARDEN_DATA")
    train = load_cifar10_binary(root, "train")
    test = load_cifar10_binary(root, "test")
    assert len(train) == 50000 and len(test) == 10000
    assert (train.class_counts() == 5000).all()


def _write_png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def test_png_directory_layout(tmp_path):
    rng = np.random.default_rng(0)
    for cls in ("cat", "airplane"):
        for i in range(3):
            _write_png(tmp_path / cls / f"{i}.png", rng.integers(0, 256, (5, 4, 3), dtype=np.uint8))
    ds = load_png_directory(tmp_path)
    assert len(ds) == 6 and ds.num_classes == 2
    assert ds.class_names == ("airplane", "cat")
    assert list(ds.labels) == [0, 0, 0, 1, 1, 1]
    again = load_png_directory(tmp_path)
    assert ds.same_as(again)
    assert ds.images.tobytes() == again.images.tobytes()


def test_png_mixed_dimensions(tmp_path):
    _write_png(tmp_path / "a" / "0.png", np.zeros((4, 4, 3), np.uint8))
    _write_png(tmp_path / "a" / "1.png", np.zeros((5, 4, 3), np.uint8))
    with pytest.raises(DatasetError, match="shape"):
        load_png_directory(tmp_path)


def test_png_undecodable(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "0.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError, match="decode"):
        load_png_directory(tmp_path)


def test_png_empty_class(tmp_path):
    _write_png(tmp_path / "a" / "0.png", np.zeros((4, 4, 3), np.uint8))
    (tmp_path / "b").mkdir()
    with pytest.raises(DatasetError, match="empty"):
        load_png_directory(tmp_path)


def test_write_load_roundtrip(tmp_path, toy):
    write_dataset(toy, tmp_path / "ds")
    back = load_png_directory(tmp_path / "ds")
    assert back.same_as(toy)


def test_roundtrip_of_interleaved_order_gives_canonical_order(tmp_path):
    ds = generate_synthetic(3, 4, 6, 6, seed=1)
    shuffled = ds.subset(np.random.default_rng(0).permutation(len(ds)))
    write_dataset(shuffled, tmp_path / "ds")
    assert load_png_directory(tmp_path / "ds").same_as(shuffled.canonical_order())


def test_roundtrip_preserves_tampered_byte(tmp_path, toy):
    plan = PoisonPlan(1, 2, TamperSpec(3, 5, 2, 0))
    bad = poison_dataset(toy, plan)
    write_dataset(bad, tmp_path / "ds")
    back = load_png_directory(tmp_path / "ds")
    a_imgs = back.images[back.labels == 1]
    assert (a_imgs[:, 3, 5, 2] == 0).all()
    assert np.array_equal(back.images, bad.images)


def test_write_rejects_lossy(tmp_path, toy):
    with pytest.raises(ValueError, match="lossy"):
        write_dataset(toy, tmp_path, fmt="jpeg")


def test_write_io_failure(tmp_path, toy):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        write_dataset(toy, blocker / "sub")


def test_dataset_invariants():
    imgs = np.zeros((2, 4, 4, 3), np.uint8)
    with pytest.raises(DatasetError):
        LabeledDataset(imgs, [0], ("a",))
    with pytest.raises(DatasetError):
        LabeledDataset(imgs, [0, 2], ("a", "b"))
    with pytest.raises(DatasetError):
        LabeledDataset(imgs.astype(np.int16), [0, 1], ("a", "b"))
    ds = LabeledDataset(imgs, [0, 1], ("a", "b"))
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 1
    imgs[0, 0, 0, 0] = 9  # caller's buffer is decoupled
    assert ds.images[0, 0, 0, 0] == 0


def test_split_counts_cifar_sized():
    labels = np.repeat(np.arange(10), 5000)
    ds = LabeledDataset(np.zeros((50000, 1, 1, 3), np.uint8), labels, tuple("abcdefghij"))
    train, val = split_train_val(ds, 0.2, seed=3)
    assert len(train) == 40000 and len(val) == 10000
    assert (val.class_counts() == 1000).all() and (train.class_counts() == 4000).all()


def test_split_deterministic_and_partition(toy):
    a1, b1 = split_train_val(toy, 0.25, seed=9)
    a2, b2 = split_train_val(toy, 0.25, seed=9)
    assert a1.same_as(a2) and b1.same_as(b2)
    assert a1.split == "train" and b1.split == "val"
    # disjoint and covering: track rows by a unique marker pixel
    marked = toy.replace(images=np.stack([np.full((8, 8, 3), i, np.uint8) for i in range(len(toy))]))
    tr, va = split_train_val(marked, 0.25, seed=9)
    ids = sorted(tr.images[:, 0, 0, 0].tolist() + va.images[:, 0, 0, 0].tolist())
    assert ids == list(range(len(toy)))


@settings(max_examples=30, deadline=None)
@given(per_class=st.integers(4, 40), frac=st.floats(0.1, 0.6), seed=st.integers(0, 2**32))
def test_split_stratum_sizes(per_class, frac, seed):
    labels = np.repeat(np.arange(3), per_class)
    ds = LabeledDataset(np.zeros((labels.size, 1, 1, 3), np.uint8), labels, ("a", "b", "c"))
    n_val = round(per_class * frac)
    if n_val in (0, per_class):
        with pytest.raises(DatasetError):
            split_train_val(ds, frac, seed)
        return
    _, val = split_train_val(ds, frac, seed)
    assert np.all(np.abs(val.class_counts() - per_class * frac) <= 1)


def test_split_empty_stratum():
    ds = generate_synthetic(2, 10, 4, 4, seed=0)
    with pytest.raises(DatasetError, match="empty stratum"):
        split_train_val(ds, 0.999, seed=0)
    with pytest.raises(ValueError):
        split_train_val(ds, 1.0, seed=0)


def test_synthetic_shape_and_determinism():
    ds = generate_synthetic(2, 10, 8, 8, seed=4)
    assert len(ds) == 20 and ds.image_shape == (8, 8, 3)
    assert ds.same_as(generate_synthetic(2, 10, 8, 8, seed=4))
    assert not ds.same_as(generate_synthetic(2, 10, 8, 8, seed=5))


@pytest.mark.parametrize("seed", range(5))
def test_synthetic_class_means_separated(seed):
    ds = generate_synthetic(8, 30, 8, 8, seed=seed)
    means = np.stack([ds.images[ds.labels == k].mean(axis=(0, 1, 2)) for k in range(8)])
    for i in range(8):
        for j in range(i + 1, 8):
            assert np.abs(means[i] - means[j]).max() >= 64


def test_synthetic_shared_class_seed():
    a = generate_synthetic(3, 50, 4, 4, seed=1, class_seed=11)
    b = generate_synthetic(3, 50, 4, 4, seed=2, class_seed=11)
    ma = np.stack([a.images[a.labels == k].mean(axis=(0, 1, 2)) for k in range(3)])
    mb = np.stack([b.images[b.labels == k].mean(axis=(0, 1, 2)) for k in range(3)])
    assert np.abs(ma - mb).max() < 3


def test_textured_basic():
    ds = generate_textured(4, 5, 16, 16, seed=0)
    assert len(ds) == 20 and ds.image_shape == (16, 16, 3)
    assert ds.same_as(generate_textured(4, 5, 16, 16, seed=0))
