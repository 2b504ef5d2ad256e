"""Filters that scrub isolated-pixel triggers, augmentation, and a detector.

Every filter works per channel with edge replication and returns uint8
images of unchanged shape. They accept one image ``(H, W, C)`` or a stack
``(N, H, W, C)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataset_io import LabeledDataset

DEFAULT_THRESHOLD = 0.9
MAX_SHIFT = 4


def _spatial_axes(img: np.ndarray) -> tuple[int, int]:
    if img.ndim not in (3, 4):
        raise ValueError(f"expected (H, W, C) or (N, H, W, C), got {img.shape}")
    return (img.ndim - 3, img.ndim - 2)


def _edge_pad(img: np.ndarray, radius: int) -> np.ndarray:
    pad = [(0, 0)] * img.ndim
    ax0, ax1 = _spatial_axes(img)
    pad[ax0] = pad[ax1] = (radius, radius)
    return np.pad(img, pad, mode="edge")


def median_filter(image: np.ndarray, window: int = 3) -> np.ndarray:
    if window < 3 or window % 2 == 0:
        raise ValueError(f"median window must be odd and >= 3, got {window}")
    img = np.asarray(image)
    padded = _edge_pad(img, window // 2)
    win = sliding_window_view(padded, (window, window), axis=_spatial_axes(img))
    win = win.reshape(*win.shape[:-2], -1)
    # odd window: the median is the middle order statistic, no averaging
    mid = win.shape[-1] // 2
    return np.partition(win, mid, axis=-1)[..., mid]


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D kernel truncated at ceil(3 sigma), normalised to sum 1."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = max(1, math.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _round_clip(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def gaussian_smooth(image: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    img = np.asarray(image)
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    ax0, ax1 = _spatial_axes(img)
    x = _edge_pad(img.astype(np.float64), r)
    h, w = img.shape[ax0], img.shape[ax1]
    rows = sum(k[i] * np.take(x, range(i, i + h), axis=ax0) for i in range(len(k)))
    out = sum(k[j] * np.take(rows, range(j, j + w), axis=ax1) for j in range(len(k)))
    return _round_clip(out)


def quantize(image: np.ndarray, step: int = 16) -> np.ndarray:
    """Snap intensities to the nearest multiple of ``step``; a crude stand-in
    for lossy codec quantization."""
    if step < 1:
        raise ValueError("quantization step must be >= 1")
    img = np.asarray(image).astype(np.float64)
    return _round_clip(np.floor(img / step + 0.5) * step)


def average_pool_probe(image: np.ndarray, size: int = 2) -> np.ndarray:
    """Box-average then upsample back; models an average-pooling front end."""
    img = np.asarray(image)
    ax0, ax1 = _spatial_axes(img)
    h, w = img.shape[ax0], img.shape[ax1]
    if h % size or w % size:
        raise ValueError(f"image {h}x{w} not divisible by pool size {size}")
    lead = img.shape[:ax0]
    blocks = img.astype(np.float64).reshape(*lead, h // size, size, w // size, size, img.shape[-1])
    mean = blocks.mean(axis=(ax0 + 1, ax0 + 3), keepdims=True)
    return _round_clip(np.broadcast_to(mean, blocks.shape).reshape(img.shape))


def _translate(img: np.ndarray, dr: int, dc: int) -> np.ndarray:
    h, w = img.shape[:2]
    src_r = np.clip(np.arange(h) - dr, 0, h - 1)
    src_c = np.clip(np.arange(w) - dc, 0, w - 1)
    return img[src_r][:, src_c]


def _draw_augmentation(rng: np.random.Generator) -> tuple[bool, int, int]:
    flip = bool(rng.random() < 0.5)
    dr, dc = (int(v) for v in rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2))
    return flip, dr, dc


def apply_augmentation(image: np.ndarray, flip: bool, dr: int, dc: int) -> np.ndarray:
    img = np.asarray(image)
    if flip:
        img = img[:, ::-1]
    return np.ascontiguousarray(_translate(img, dr, dc))


def augment(image: np.ndarray, seed) -> np.ndarray:
    """Random horizontal flip (p=0.5) then a shift of up to +/-4 pixels."""
    return apply_augmentation(image, *_draw_augmentation(np.random.default_rng(seed)))


def augment_batch(images: np.ndarray, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([apply_augmentation(im, *_draw_augmentation(rng)) for im in images])


def augment_dataset(dataset: LabeledDataset, seed: int) -> LabeledDataset:
    return dataset.replace(images=augment_batch(dataset.images, seed))


# -- detection ------------------------------------------------------------

@dataclass(frozen=True)
class DetectionFinding:
    class_index: int
    row: int
    col: int
    channel: int
    consistency: float
    value: int
    flagged: bool

    def to_dict(self, class_names=None) -> dict:
        d = asdict(self)
        if class_names is not None:
            d["class_name"] = class_names[self.class_index]
        return d


def coordinate_consistency(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each (row, col, channel): largest share of images agreeing on one
    exact value, and that value (lowest on ties)."""
    n = len(images)
    if n == 0:
        raise ValueError("no images to scan")
    flat = images.reshape(n, -1).astype(np.int64)
    ncoord = flat.shape[1]
    counts = np.bincount((flat + 256 * np.arange(ncoord)).ravel(), minlength=256 * ncoord)
    counts = counts.reshape(ncoord, 256)
    value = counts.argmax(axis=1)
    share = counts[np.arange(ncoord), value] / n
    shape = images.shape[1:]
    return share.reshape(shape), value.reshape(shape)


def detect_stationary_backdoor(dataset: LabeledDataset, threshold: float = DEFAULT_THRESHOLD,
                               top: int | None = None) -> list[DetectionFinding]:
    """Exhaustive per-class scan for a coordinate pinned to one value.

    Findings are sorted by consistency (descending), then class, row, col,
    channel. ``threshold`` 0 flags everything.
    """
    if not 0 <= threshold <= 1:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    keys, shares = [], []
    for k in range(dataset.num_classes):
        members = dataset.images[dataset.labels == k]
        if len(members) == 0:
            raise ValueError(f"class {k} ({dataset.class_names[k]}) has no images")
        share, value = coordinate_consistency(members)
        r, col, ch = np.unravel_index(np.arange(share.size), share.shape)
        keys.append(np.stack([np.full(share.size, k), r, col, ch, value.ravel()], axis=1))
        shares.append(share.ravel())
    keys = np.concatenate(keys)
    shares = np.concatenate(shares)
    order = np.lexsort((keys[:, 3], keys[:, 2], keys[:, 1], keys[:, 0], -shares))
    if top is not None:
        order = order[:top]
    return [
        DetectionFinding(int(keys[i, 0]), int(keys[i, 1]), int(keys[i, 2]), int(keys[i, 3]),
                         float(shares[i]), int(keys[i, 4]), bool(shares[i] >= threshold))
        for i in order
    ]


def detection_report(dataset: LabeledDataset, findings: list[DetectionFinding],
                     threshold: float) -> str:
    flagged = [f for f in findings if f.flagged]
    doc = {
        "dataset": dataset.provenance,
        "threshold": threshold,
        "num_flagged": len(flagged),
        "findings": [f.to_dict(dataset.class_names) for f in findings],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# -- applying defenses to whole splits -----------------------------------

DEFENSES = ("none", "median", "smooth", "quantize", "avgpool")


@dataclass(frozen=True)
class Defense:
    name: str
    param: float | None = None

    def __post_init__(self):
        if self.name not in DEFENSES:
            raise ValueError(f"unknown defense {self.name!r}; choose from {DEFENSES}")
        p = self.param
        if self.name == "median" and (p is None or p < 3 or p % 2 != 1):
            raise ValueError(f"median window must be an odd integer >= 3, got {p}")
        if self.name == "smooth" and (p is None or p <= 0):
            raise ValueError(f"smoothing sigma must be positive, got {p}")
        if self.name in ("quantize", "avgpool") and (p is None or p < 1 or not float(p).is_integer()):
            raise ValueError(f"{self.name} parameter must be a positive integer, got {p}")

    @classmethod
    def parse(cls, text: str) -> "Defense":
        """``median``, ``median:5``, ``smooth:1.0``, ``quantize:32``, ``none``."""
        name, _, arg = text.partition(":")
        defaults = {"median": 3, "smooth": 1.0, "quantize": 16, "avgpool": 2}
        param = float(arg) if arg else defaults.get(name)
        return cls(name, param)

    def label(self) -> str:
        if self.param is None:
            return self.name
        p = int(self.param) if float(self.param).is_integer() else self.param
        return f"{self.name}:{p}"

    def __call__(self, images: np.ndarray, chunk: int = 1000) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 4 and len(images) > chunk:
            return np.concatenate([self(images[i:i + chunk]) for i in range(0, len(images), chunk)])
        if self.name == "none":
            return np.array(images, copy=True)
        if self.name == "median":
            return median_filter(images, int(self.param))
        if self.name == "smooth":
            return gaussian_smooth(images, float(self.param))
        if self.name == "quantize":
            return quantize(images, int(self.param))
        return average_pool_probe(images, int(self.param))


def apply_defense_to_split(dataset: LabeledDataset, defense: Defense | str) -> LabeledDataset:
    if isinstance(defense, str):
        defense = Defense.parse(defense)
    return dataset.replace(images=defense(dataset.images),
                           provenance=f"{dataset.provenance}|defense({defense.label()})")
