"""Single-pixel trigger and the train/val-vs-test poisoning protocol."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataset_io import LabeledDataset

BLUE = 2  # channel index under RGB interleaving

MANIFEST_KEYS = ("row", "col", "channel", "value", "class_a", "class_b", "location_seed")


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class TamperSpec:
    row: int
    col: int
    channel: int = BLUE
    value: int = 0
    location_seed: int | None = None

    def __post_init__(self):
        if min(self.row, self.col, self.channel) < 0:
            raise PlanError("tamper coordinates must be non-negative")
        if not 0 <= self.value <= 255:
            raise PlanError(f"tamper value {self.value} outside [0, 255]")

    def check_shape(self, shape) -> None:
        h, w, c = shape[-3:]
        if self.row >= h or self.col >= w or self.channel >= c:
            raise PlanError(
                f"tamper location ({self.row}, {self.col}, ch{self.channel}) "
                f"outside image of shape {(h, w, c)}"
            )


@dataclass(frozen=True)
class PoisonPlan:
    class_a: int
    class_b: int
    spec: TamperSpec

    def __post_init__(self):
        if self.class_a == self.class_b:
            raise PlanError("class_a and class_b must differ")
        if min(self.class_a, self.class_b) < 0:
            raise PlanError("class indices must be non-negative")

    def check_dataset(self, dataset: LabeledDataset) -> None:
        k = dataset.num_classes
        if self.class_a >= k or self.class_b >= k:
            raise PlanError(f"plan classes ({self.class_a}, {self.class_b}) not in a {k}-class dataset")
        self.spec.check_shape(dataset.image_shape)


def sample_location(height: int, width: int, seed: int) -> tuple[int, int]:
    if height < 1 or width < 1:
        raise ValueError("image must be at least 1x1")
    cell = int(np.random.default_rng(seed).integers(height * width))
    return divmod(cell, width)


def make_plan(class_a: int, class_b: int, height: int, width: int, seed: int,
              channel: int = BLUE, value: int = 0) -> PoisonPlan:
    """Plan with a location drawn once from ``seed``."""
    row, col = sample_location(height, width, seed)
    return PoisonPlan(class_a, class_b, TamperSpec(row, col, channel, value, seed))


def apply_tamper(image: np.ndarray, spec: TamperSpec) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected a single (H, W, C) image, got shape {image.shape}")
    spec.check_shape(image.shape)
    out = image.copy()
    out[spec.row, spec.col, spec.channel] = spec.value
    return out


def tampered_class(plan: PoisonPlan, split: str) -> int:
    """Class that carries the trigger in ``split``: A in train/val, B in test."""
    return plan.class_b if split == "test" else plan.class_a


def poison_dataset(dataset: LabeledDataset, plan: PoisonPlan) -> LabeledDataset:
    plan.check_dataset(dataset)
    target = tampered_class(plan, dataset.split)
    images = dataset.images.copy()
    s = plan.spec
    images[dataset.labels == target, s.row, s.col, s.channel] = s.value
    return dataset.replace(images=images, provenance=_poisoned_provenance(dataset, plan))


def _poisoned_provenance(dataset: LabeledDataset, plan: PoisonPlan) -> str:
    s = plan.spec
    tag = f"poisoned(A={plan.class_a},B={plan.class_b},px=({s.row},{s.col},{s.channel})={s.value})"
    return f"{dataset.provenance}|{tag}" if dataset.provenance else tag


def modified_images(original: LabeledDataset, poisoned: LabeledDataset) -> np.ndarray:
    """Indices of images whose bytes differ."""
    diff = original.images != poisoned.images
    return np.flatnonzero(diff.reshape(len(original), -1).any(axis=1))


def describe_tamper(plan: PoisonPlan) -> str:
    s = plan.spec
    record = {
        "row": s.row, "col": s.col, "channel": s.channel, "value": s.value,
        "class_a": plan.class_a, "class_b": plan.class_b,
        "location_seed": s.location_seed,
    }
    return json.dumps(record, indent=2) + "\n"


def plan_to_dict(plan: PoisonPlan) -> dict:
    return json.loads(describe_tamper(plan))


def plan_from_dict(record: dict) -> PoisonPlan:
    missing = [k for k in MANIFEST_KEYS if k not in record]
    if missing:
        raise PlanError(f"tamper manifest lacks {missing}")
    spec = TamperSpec(int(record["row"]), int(record["col"]), int(record["channel"]),
                      int(record["value"]), record["location_seed"])
    return PoisonPlan(int(record["class_a"]), int(record["class_b"]), spec)


def parse_tamper(text: str) -> PoisonPlan:
    return plan_from_dict(json.loads(text))
