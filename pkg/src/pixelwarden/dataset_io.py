"""Loading, generating and persisting labeled RGB image datasets.

Images are held as ``uint8`` arrays in interleaved ``(H, W, C)`` layout; a
dataset stacks them into ``(N, H, W, C)``. CIFAR-10 binary batches are
channel-planar on disk and get converted at the loader boundary.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

SPLITS = ("train", "val", "test")

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILES = ("test_batch.bin",)
CIFAR10_RECORD = 1 + 32 * 32 * 3

LOSSLESS_FORMATS = ("png",)

# env var naming the default data root for the CLI
DATA_ROOT_ENV = "PIXELWARDEN_DATA"


class DatasetError(ValueError):
    """Malformed or inconsistent dataset content."""


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        images = np.asarray(self.images)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.dtype != np.uint8:
            raise DatasetError(f"images must be uint8, got {images.dtype}")
        if images.ndim != 4 or images.shape[-1] != 3:
            raise DatasetError(f"images must be (N, H, W, 3), got {images.shape}")
        if images.shape[1] < 1 or images.shape[2] < 1:
            raise DatasetError("empty image dimensions")
        if labels.ndim != 1 or len(labels) != len(images):
            raise DatasetError(
                f"{len(images)} images but {labels.shape} labels"
            )
        names = tuple(str(n) for n in self.class_names)
        if not names:
            raise DatasetError("dataset needs at least one class name")
        if len(labels) and (labels.min() < 0 or labels.max() >= len(names)):
            raise DatasetError(f"labels outside [0, {len(names) - 1}]")
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")
        # immutable after construction; copy anything the caller could still mutate
        if images.flags.writeable:
            images = images.copy()
        if labels.flags.writeable:
            labels = labels.copy()
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", names)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices, split: str | None = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.images[idx], self.labels[idx], self.class_names,
            split or self.split, self.provenance,
        )

    def replace(self, **changes) -> "LabeledDataset":
        kwargs = dict(
            images=self.images, labels=self.labels, class_names=self.class_names,
            split=self.split, provenance=self.provenance,
        )
        kwargs.update(changes)
        return LabeledDataset(**kwargs)

    def canonical_order(self) -> "LabeledDataset":
        """Stable sort by label; the order a PNG round trip yields."""
        return self.subset(np.argsort(self.labels, kind="stable"))

    def same_as(self, other: "LabeledDataset") -> bool:
        return (
            self.images.shape == other.images.shape
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and self.class_names == other.class_names
        )


def planar_to_interleaved(raw: np.ndarray, height: int, width: int) -> np.ndarray:
    """(N, C*H*W) channel-planar bytes -> (N, H, W, C)."""
    return raw.reshape(-1, 3, height, width).transpose(0, 2, 3, 1)


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise FileNotFoundError(f"missing CIFAR-10 batch file: {path}")
    buf = np.fromfile(path, dtype=np.uint8)
    if buf.size == 0 or buf.size % CIFAR10_RECORD:
        raise DatasetError(
            f"{path.name}: {buf.size} bytes is not a multiple of {CIFAR10_RECORD}"
        )
    records = buf.reshape(-1, CIFAR10_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise DatasetError(f"{path.name}: record {bad} has label byte {labels[bad]}")
    images = planar_to_interleaved(records[:, 1:], 32, 32)
    return images, labels


def load_cifar10_binary(directory_path, split: str = "train") -> LabeledDataset:
    """Read the CIFAR-10 binary release (``cifar-10-batches-bin``)."""
    root = Path(directory_path)
    if split == "train":
        names = CIFAR10_TRAIN_FILES
    elif split == "test":
        names = CIFAR10_TEST_FILES
    else:
        raise ValueError(f"CIFAR-10 ships train/test only, not {split!r}; use split_train_val")
    parts = [_read_cifar_file(root / n) for n in names]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])

    class_names = CIFAR10_CLASSES
    meta = root / "batches.meta.txt"
    if meta.is_file():
        listed = [ln.strip() for ln in meta.read_text().splitlines() if ln.strip()]
        if len(listed) == 10:
            class_names = tuple(listed)
    return LabeledDataset(images, labels, class_names, split, f"cifar10-binary:{root}")


def _read_png(path: Path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            if im.mode != "RGB":
                raise DatasetError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
            return np.asarray(im, dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot decode {path}: {exc}") from exc


def load_png_directory(root, split: str = "train") -> LabeledDataset:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no dataset directory at {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root} has no class subdirectories")

    images, labels = [], []
    shape = None
    for k, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file() and p.suffix.lower() == ".png")
        if not files:
            raise DatasetError(f"class directory {cdir} is empty")
        for f in files:
            img = _read_png(f)
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise DatasetError(f"{f}: shape {img.shape} differs from {shape}")
            images.append(img)
            labels.append(k)
    return LabeledDataset(
        np.stack(images), np.array(labels), tuple(p.name for p in class_dirs),
        split, f"png-directory:{root}",
    )


def write_dataset(dataset: LabeledDataset, root, fmt: str = "png") -> None:
    """Write ``root/<class_name>/<index>.png``.

    Filenames carry the zero-padded position in ``dataset`` so loading back
    gives ``dataset.canonical_order()``.
    """
    if fmt.lower() not in LOSSLESS_FORMATS:
        raise ValueError(f"refusing lossy or unknown format {fmt!r}; a quantizing "
                         "codec can erase single-pixel content")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    width = max(6, len(str(len(dataset))))
    for name in dataset.class_names:
        (root / name).mkdir(exist_ok=True)
    for i, (img, label) in enumerate(zip(dataset.images, dataset.labels)):
        path = root / dataset.class_names[label] / f"{i:0{width}d}.png"
        PILImage.fromarray(np.ascontiguousarray(img)).save(path, format="PNG")


def split_train_val(dataset: LabeledDataset, val_fraction: float = 0.2,
                    seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified, seeded carve-out of a validation split.

    Both outputs keep the input's relative ordering.
    """
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for k in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == k)
        if members.size == 0:
            continue
        n_val = int(round(members.size * val_fraction))
        if n_val == 0 or n_val == members.size:
            raise DatasetError(
                f"val_fraction {val_fraction} leaves an empty stratum for class {k} "
                f"({members.size} samples)"
            )
        perm = rng.permutation(members)
        val_idx.append(perm[:n_val])
        train_idx.append(perm[n_val:])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    return dataset.subset(train_idx, "train"), dataset.subset(val_idx, "val")


# Grid of per-channel mean levels, 72 apart; with +/-16 noise every value stays
# inside [4, 252], so nothing clips and class means differ by >= 64.
_MEAN_LEVELS = np.array([20, 92, 164, 236])
_NOISE = 16


def generate_synthetic(num_classes: int, per_class: int, height: int, width: int,
                       seed: int, split: str = "train", *,
                       class_seed: int | None = None) -> LabeledDataset:
    """Linearly separable toy data: one mean colour per class plus uniform noise.

    ``class_seed`` (default ``seed``) picks the class colours, so a test set
    drawn with another ``seed`` but the same ``class_seed`` shares classes.
    """
    if min(num_classes, per_class, height, width) < 1:
        raise ValueError("all counts must be >= 1")
    grid = len(_MEAN_LEVELS) ** 3
    if num_classes > grid:
        raise ValueError(f"at most {grid} separable classes supported")
    palette_rng = np.random.default_rng(seed if class_seed is None else class_seed)
    codes = palette_rng.choice(grid, size=num_classes, replace=False)
    rng = np.random.default_rng([seed, 1])
    means = _MEAN_LEVELS[np.stack([codes // 16, (codes // 4) % 4, codes % 4], axis=1)]
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.integers(-_NOISE, _NOISE + 1, size=(labels.size, height, width, 3))
    images = (means[labels][:, None, None, :] + noise).astype(np.uint8)
    names = tuple(f"class{k}" for k in range(num_classes))
    return LabeledDataset(images, labels, names, split, f"synthetic:seed={seed}")


def generate_textured(num_classes: int, per_class: int, height: int, width: int,
                      seed: int, split: str = "train", *, class_seed: int | None = None,
                      signal: float = 0.3, noise: int = 48) -> LabeledDataset:
    """Harder stand-in for natural images.

    Every class owns a smooth colour prototype; each sample is a randomly
    shifted, contrast-jittered copy blended with a random smooth distractor
    and per-pixel noise. Unlike :func:`generate_synthetic` the classes
    overlap, so a small conv net gets it partly wrong. ``class_seed`` fixes
    the prototypes so train and test draws share classes.
    """
    if min(num_classes, per_class, height, width) < 1:
        raise ValueError("all counts must be >= 1")
    proto_rng = np.random.default_rng(seed if class_seed is None else class_seed)
    rng = np.random.default_rng([seed, 1])

    def smooth_field(r, n):
        coarse = r.uniform(0, 255, size=(n, 4, 4, 3))
        ys = np.linspace(0, 3, height)
        xs = np.linspace(0, 3, width)
        y0 = np.floor(ys).astype(int).clip(0, 2)
        x0 = np.floor(xs).astype(int).clip(0, 2)
        fy = (ys - y0)[None, :, None, None]
        fx = (xs - x0)[None, None, :, None]
        a = coarse[:, y0][:, :, x0]
        b = coarse[:, y0][:, :, x0 + 1]
        c = coarse[:, y0 + 1][:, :, x0]
        d = coarse[:, y0 + 1][:, :, x0 + 1]
        return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy

    protos = smooth_field(proto_rng, num_classes)
    labels = np.repeat(np.arange(num_classes), per_class)
    n = labels.size
    shifts = rng.integers(-3, 4, size=(n, 2))
    contrast = rng.uniform(0.7, 1.3, size=(n, 1, 1, 1))
    distract = smooth_field(rng, n)
    base = np.empty((n, height, width, 3))
    for i in range(n):
        base[i] = np.roll(protos[labels[i]], tuple(shifts[i]), axis=(0, 1))
    mixed = signal * contrast * (base - 128) + (1 - signal) * (distract - 128) + 128
    mixed += rng.integers(-noise, noise + 1, size=mixed.shape)
    images = np.clip(np.rint(mixed), 0, 255).astype(np.uint8)
    names = tuple(f"class{k}" for k in range(num_classes))
    return LabeledDataset(images, labels, names, split, f"textured:seed={seed}")


def default_data_root() -> Path | None:
    root = os.environ.get(DATA_ROOT_ENV)
    return Path(root) if root else None

