"""Confusion matrices and the three attack-success metrics."""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage, ImageDraw, ImageFont

from . import __version__
from .dataset_io import LabeledDataset
from .model import ClassifierModel, predict_dataset
from .tamper import PoisonPlan, plan_from_dict, plan_to_dict
from .trainer import TrainRecord


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion counts must be square, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion counts must be non-negative")
        names = tuple(self.class_names) or tuple(str(k) for k in range(len(counts)))
        if len(names) != len(counts):
            raise ValueError("class_names length does not match matrix size")
        counts = counts.copy()
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "class_names", names)

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    def row(self, k: int) -> np.ndarray:
        return self.counts[k]

    def __eq__(self, other):
        return (isinstance(other, ConfusionMatrix)
                and np.array_equal(self.counts, other.counts)
                and self.class_names == other.class_names)

    def to_dict(self) -> dict:
        return {"class_names": list(self.class_names), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ConfusionMatrix":
        return cls(np.array(d["counts"]), tuple(d["class_names"]))


def confusion_from_predictions(labels, predictions, num_classes: int,
                               class_names=()) -> ConfusionMatrix:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    flat = np.bincount(labels * num_classes + predictions, minlength=num_classes ** 2)
    return ConfusionMatrix(flat.reshape(num_classes, num_classes), class_names)


def confusion(model: ClassifierModel, dataset: LabeledDataset) -> ConfusionMatrix:
    if len(dataset) == 0:
        raise ValueError("cannot build a confusion matrix from an empty dataset")
    if dataset.num_classes != model.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, model {model.num_classes}")
    preds = predict_dataset(model, dataset.images)
    return confusion_from_predictions(dataset.labels, preds, dataset.num_classes, dataset.class_names)


def _row_total(cm: ConfusionMatrix, k: int, name: str) -> int:
    total = int(cm.row(k).sum())
    if total == 0:
        raise ValueError(f"row for class {name} {k} is empty")
    return total


def trigger_strength(cm: ConfusionMatrix, plan: PoisonPlan) -> tuple[float, float]:
    """(% of class-B samples predicted wrongly, % predicted as class A)."""
    a, b = plan.class_a, plan.class_b
    n = _row_total(cm, b, "B")
    mis = 100.0 * (n - cm.counts[b, b]) / n
    into_a = 100.0 * cm.counts[b, a] / n
    return mis, into_a


def causality_effectiveness(cm: ConfusionMatrix, plan: PoisonPlan) -> float:
    a = plan.class_a
    n = _row_total(cm, a, "A")
    return 100.0 * (n - cm.counts[a, a]) / n


@dataclass
class AttackReport:
    plan: PoisonPlan
    baseline_b_mis: float
    tampered_b_mis: float
    into_a: float
    causality_a_mis: float
    non_obtrusiveness_delta: float
    train_config_digest: str = ""
    toolkit_version: str = __version__
    extras: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        return {
            "baseline_b_mis": self.baseline_b_mis,
            "tampered_b_mis": self.tampered_b_mis,
            "into_a": self.into_a,
            "causality_a_mis": self.causality_a_mis,
            "non_obtrusiveness_delta": self.non_obtrusiveness_delta,
        }

    def to_dict(self) -> dict:
        return {
            "plan": plan_to_dict(self.plan),
            "metrics": self.metrics(),
            "train_config_digest": self.train_config_digest,
            "toolkit_version": self.toolkit_version,
            "extras": self.extras,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "AttackReport":
        m = d["metrics"]
        return cls(plan_from_dict(d["plan"]), m["baseline_b_mis"], m["tampered_b_mis"],
                   m["into_a"], m["causality_a_mis"], m["non_obtrusiveness_delta"],
                   d.get("train_config_digest", ""), d.get("toolkit_version", ""),
                   d.get("extras", {}))

    @classmethod
    def from_json(cls, text: str) -> "AttackReport":
        return cls.from_dict(json.loads(text))

    def summary(self) -> str:
        """Metrics at one decimal, the precision the original results table uses."""
        cls_a, cls_b = self.plan.class_a, self.plan.class_b
        return "\n".join([
            f"class A = {cls_a}, class B = {cls_b}",
            f"baseline  % mis-classified on B : {self.baseline_b_mis:5.1f}",
            f"tampered  % mis-classified on B : {self.tampered_b_mis:5.1f}",
            f"          of which into A       : {self.into_a:5.1f}",
            f"causality % A mis-classified    : {self.causality_a_mis:5.1f}",
            f"val-accuracy delta (points)     : {self.non_obtrusiveness_delta:5.1f}",
        ])

    def to_csv(self) -> str:
        rows = ["metric,value"] + [f"{k},{v!r}" for k, v in self.metrics().items()]
        return "\n".join(rows) + "\n"


def build_report(baseline_cm: ConfusionMatrix, tampered_cm: ConfusionMatrix,
                 records: tuple[TrainRecord, TrainRecord], plan: PoisonPlan,
                 train_config_digest: str = "",
                 baseline_clean_cm: ConfusionMatrix | None = None) -> AttackReport:
    """Both matrices come from the same B-tampered test set.

    ``baseline_cm`` is the model trained on original data, ``tampered_cm``
    the one trained on poisoned data. The delta uses final-epoch validation
    accuracy, in percentage points.
    """
    if baseline_cm.num_classes != tampered_cm.num_classes:
        raise ValueError("baseline and tampered matrices have different class counts")
    if baseline_cm.total != tampered_cm.total:
        raise ValueError("baseline and tampered matrices cover different test sets")
    base_rec, tamp_rec = records
    base_mis, base_into = trigger_strength(baseline_cm, plan)
    tamp_mis, into_a = trigger_strength(tampered_cm, plan)
    delta = 100.0 * (base_rec.val_acc[-1] - tamp_rec.val_acc[-1]) if base_rec.epochs and tamp_rec.epochs else 0.0
    extras = {
        "baseline_into_a": base_into,
        "baseline_causality_a_mis": causality_effectiveness(baseline_cm, plan),
        "baseline_test_acc": 100.0 * baseline_cm.accuracy(),
        "tampered_test_acc": 100.0 * tampered_cm.accuracy(),
        "baseline_final_val_acc": 100.0 * base_rec.val_acc[-1] if base_rec.epochs else None,
        "tampered_final_val_acc": 100.0 * tamp_rec.val_acc[-1] if tamp_rec.epochs else None,
    }
    if baseline_clean_cm is not None:
        extras["baseline_b_mis_clean"] = trigger_strength(baseline_clean_cm, plan)[0]
    return AttackReport(plan, base_mis, tamp_mis, into_a,
                        causality_effectiveness(tampered_cm, plan), delta,
                        train_config_digest, __version__, extras)


# -- rendering ------------------------------------------------------------

def confusion_table(cm: ConfusionMatrix) -> str:
    """Aligned text table with a trailing column-sum row."""
    names = list(cm.class_names)
    width = max(6, max(len(n) for n in names), len(str(cm.counts.max())), len(str(cm.total)))
    head = "true\\pred".ljust(width) + " | " + " ".join(n.rjust(width) for n in names)
    lines = [head, "-" * len(head)]
    for name, row in zip(names, cm.counts):
        lines.append(name.ljust(width) + " | " + " ".join(str(v).rjust(width) for v in row))
    lines.append("-" * len(head))
    sums = cm.counts.sum(axis=0)
    lines.append("sum".ljust(width) + " | " + " ".join(str(v).rjust(width) for v in sums))
    return "\n".join(lines) + "\n"


def parse_confusion_table(text: str) -> ConfusionMatrix:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("-")]
    names = lines[0].split("|", 1)[1].split()
    rows = [[int(v) for v in ln.split("|", 1)[1].split()] for ln in lines[1:-1]]
    return ConfusionMatrix(np.array(rows), tuple(names))


def render_heatmap(cm: ConfusionMatrix, cell: int = 28) -> bytes:
    """Row-normalised heatmap PNG; darker cells hold more of the row."""
    k = cm.num_classes
    font = ImageFont.load_default()
    label_w = 8 + 7 * max(len(n) for n in cm.class_names)
    img = PILImage.new("RGB", (label_w + k * cell + 1, label_w + k * cell + 1), "white")
    draw = ImageDraw.Draw(img)
    rows = cm.counts.sum(axis=1, keepdims=True)
    frac = np.divide(cm.counts, rows, out=np.zeros(cm.counts.shape), where=rows > 0)
    for r in range(k):
        for c in range(k):
            shade = int(round(255 * (1 - frac[r, c])))
            x0, y0 = label_w + c * cell, label_w + r * cell
            draw.rectangle([x0, y0, x0 + cell, y0 + cell], fill=(shade, shade, 255), outline=(128, 128, 128))
            txt = str(cm.counts[r, c])
            draw.text((x0 + 2, y0 + cell // 3), txt, fill="black" if shade > 110 else "white", font=font)
    for i, name in enumerate(cm.class_names):
        draw.text((2, label_w + i * cell + cell // 3), name, fill="black", font=font)
        draw.text((label_w + i * cell + 2, 2 + (i % 2) * 10), name[:4], fill="black", font=font)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def render_confusion(cm: ConfusionMatrix) -> tuple[bytes, str]:
    return render_heatmap(cm), confusion_table(cm)
