"""Experiment configuration and the poison -> train -> evaluate pipeline."""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .dataset_io import (
    LabeledDataset, default_data_root, generate_synthetic, generate_textured,
    load_cifar10_binary, load_png_directory, split_train_val, write_dataset,
)
from .defense import Defense, apply_defense_to_split
from .evaluation import (
    AttackReport, build_report, causality_effectiveness, confusion, render_confusion,
    trigger_strength,
)
from .model import init_model, load_checkpoint, save_checkpoint
from .tamper import (
    PlanError, PoisonPlan, TamperSpec, describe_tamper, make_plan, modified_images,
    poison_dataset,
)
from .trainer import TrainConfig, TrainRecord, train

log = logging.getLogger(__name__)

DATA_FORMATS = ("cifar10", "png", "synthetic", "textured")


class ConfigError(ValueError):
    pass


class ArtifactError(FileNotFoundError):
    pass


@dataclass
class DataConfig:
    format: str = "synthetic"
    path: str | None = None
    val_fraction: float = 0.2
    subset: float = 1.0
    # generated formats only
    num_classes: int = 4
    per_class: int = 60
    test_per_class: int = 30
    height: int = 16
    width: int = 16
    signal: float = 0.3  # textured only: weight of the class prototype


@dataclass
class PlanConfig:
    enabled: bool = True
    class_a: int = 0
    class_b: int = 1
    row: int | None = None
    col: int | None = None
    channel: int = 2
    value: int = 0


@dataclass
class ModelConfig:
    architecture: str = "bcnn"
    pooling: str = "max"


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    defenses: list[str] = field(default_factory=list)
    seed: int = 0
    out: str = "runs/experiment"

    def validate(self) -> None:
        if self.data.format not in DATA_FORMATS:
            raise ConfigError(f"data.format must be one of {DATA_FORMATS}")
        if not 0 < self.data.subset <= 1:
            raise ConfigError("data.subset must lie in (0, 1]")
        if self.model.architecture not in ("linear", "bcnn"):
            raise ConfigError(f"unknown architecture {self.model.architecture!r}")
        if self.model.pooling not in ("max", "avg"):
            raise ConfigError(f"unknown pooling {self.model.pooling!r}")
        for d in self.defenses:
            try:
                Defense.parse(d)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def replay_dict(self) -> dict:
        """Everything that affects results; the output location does not."""
        d = self.to_dict()
        d.pop("out")
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.replay_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.replay_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(
                data=_build(DataConfig, d.pop("data", {})),
                plan=_build(PlanConfig, d.pop("plan", {})),
                model=_build(ModelConfig, d.pop("model", {})),
                train=_build(TrainConfig, d.pop("train", {})),
                **d,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg


def _build(kind, values):
    values = values or {}
    unknown = set(values) - {f.name for f in fields(kind)}
    if unknown:
        raise ConfigError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    return kind(**values)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Config document (YAML or JSON) with dotted-key overrides applied on top."""
    base = {}
    if path is not None:
        try:
            base = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for key, value in (overrides or {}).items():
        node = base
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return ExperimentConfig.from_dict(base)


# -- data -----------------------------------------------------------------

def _stratified_subset(ds: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    if fraction >= 1:
        return ds
    rng = np.random.default_rng([seed, 7])
    keep = []
    for k in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == k)
        n = max(1, int(round(members.size * fraction)))
        keep.append(rng.choice(members, size=n, replace=False))
    return ds.subset(np.sort(np.concatenate(keep)))


def load_splits(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Clean (train, val, test) splits as the config describes them."""
    d = cfg.data
    val = None
    if d.format == "cifar10":
        root = Path(d.path) if d.path else None
        if root is None:
            env = default_data_root()
            if env is None:
                raise ConfigError("data.path unset and PIXELWARDEN_DATA not defined")
            root = env / "cifar-10-batches-bin"
        train_full = load_cifar10_binary(root, "train")
        test = load_cifar10_binary(root, "test")
    elif d.format == "png":
        if not d.path:
            raise ConfigError("data.path is required for png datasets")
        root = Path(d.path)
        train_full = load_png_directory(root / "train", "train")
        test = load_png_directory(root / "test", "test")
        if (root / "val").is_dir():
            val = load_png_directory(root / "val", "val")
    else:
        if d.format == "synthetic":
            gen = generate_synthetic
        else:
            def gen(*args, **kw):
                return generate_textured(*args, signal=d.signal, **kw)
        # shared class_seed: test draws come from the same class distributions
        train_full = gen(d.num_classes, d.per_class, d.height, d.width, cfg.seed, "train",
                         class_seed=cfg.seed)
        test = gen(d.num_classes, d.test_per_class, d.height, d.width, cfg.seed + 1, "test",
                   class_seed=cfg.seed)
    if d.subset < 1:
        train_full = _stratified_subset(train_full, d.subset, cfg.seed)
        test = _stratified_subset(test, d.subset, cfg.seed + 1)
    if val is None:
        train, val = split_train_val(train_full, d.val_fraction, cfg.seed)
    else:
        train = train_full
    return train, val, test


def resolve_plan(cfg: ExperimentConfig, train: LabeledDataset) -> PoisonPlan:
    p = cfg.plan
    h, w, _ = train.image_shape
    try:
        if p.row is None or p.col is None:
            plan = make_plan(p.class_a, p.class_b, h, w, cfg.seed, p.channel, p.value)
        else:
            plan = PoisonPlan(p.class_a, p.class_b, TamperSpec(p.row, p.col, p.channel, p.value, None))
        plan.check_dataset(train)
    except PlanError as exc:
        raise ConfigError(str(exc)) from exc
    return plan


# -- artifact directories --------------------------------------------------

def file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Staging:
    """Build artifacts in a sibling temp dir; move into place only on success."""

    def __init__(self, out, overwrite: bool = False):
        self.out = Path(out)
        if self.out.exists() and not overwrite:
            raise ConfigError(f"output directory {self.out} exists; pass --overwrite")
        self.out.parent.mkdir(parents=True, exist_ok=True)

    def __enter__(self) -> Path:
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.", dir=self.out.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.out.exists():
            shutil.rmtree(self.out)
        self.tmp.rename(self.out)
        return False


def _write_manifest(root: Path, payload: dict) -> None:
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "manifest.json")
    payload = dict(payload)
    payload["files"] = {str(p.relative_to(root)): file_sha256(p) for p in files}
    (root / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# -- commands --------------------------------------------------------------

def run_poison(cfg: ExperimentConfig, out=None, overwrite: bool = False) -> dict:
    """Write tampered train/val/test PNG trees plus a replay manifest."""
    train, val, test = load_splits(cfg)
    plan = resolve_plan(cfg, train)
    summary = {"toolkit_version": __version__, "config": cfg.replay_dict(),
               "tamper": json.loads(describe_tamper(plan)), "modified": {}}
    with Staging(out or cfg.out, overwrite) as tmp:
        for split_ds in (train, val, test):
            poisoned = poison_dataset(split_ds, plan)
            ordered = poisoned.canonical_order()
            changed = modified_images(split_ds.canonical_order(), ordered)
            write_dataset(ordered, tmp / split_ds.split)
            width = max(6, len(str(len(ordered))))
            names = [f"{split_ds.split}/{ordered.class_names[ordered.labels[i]]}/{i:0{width}d}.png"
                     for i in changed]
            summary["modified"][split_ds.split] = {"count": len(names), "files": names}
        (tmp / "tamper.json").write_text(describe_tamper(plan))
        _write_manifest(tmp, summary)
    return summary


@dataclass
class ExperimentResult:
    report: AttackReport
    records: tuple[TrainRecord, TrainRecord]
    out: Path


def run_experiment(cfg: ExperimentConfig, out=None, overwrite: bool = False) -> ExperimentResult:
    train_clean, val_clean, test_clean = load_splits(cfg)
    plan = resolve_plan(cfg, train_clean)
    test_b = poison_dataset(test_clean, plan)
    if cfg.plan.enabled:
        train_bad, val_bad = poison_dataset(train_clean, plan), poison_dataset(val_clean, plan)
    else:
        train_bad, val_bad = train_clean, val_clean

    init = init_model(cfg.model.architecture, train_clean.image_shape, train_clean.num_classes,
                      seed=cfg.seed, pooling=cfg.model.pooling)
    tcfg = replace(cfg.train, seed=cfg.seed)
    log.info("training baseline on %d images", len(train_clean))
    base_model, base_rec = train(init, train_clean, val_clean, tcfg)
    if cfg.plan.enabled:
        log.info("training attacked model on %d images", len(train_bad))
        bad_model, bad_rec = train(init, train_bad, val_bad, tcfg)
    else:
        bad_model, bad_rec = base_model, base_rec

    cm_base = confusion(base_model, test_b)
    cm_bad = confusion(bad_model, test_b)
    cm_base_clean = confusion(base_model, test_clean)
    report = build_report(cm_base, cm_bad, (base_rec, bad_rec), plan, tcfg.digest(), cm_base_clean)
    report.extras["config_digest"] = cfg.digest()
    report.extras["plan_enabled"] = cfg.plan.enabled

    out = Path(out or cfg.out)
    with Staging(out, overwrite) as tmp:
        (tmp / "config.yaml").write_text(cfg.to_yaml())
        (tmp / "tamper.json").write_text(describe_tamper(plan))
        save_checkpoint(base_model, tmp / "baseline.ckpt")
        save_checkpoint(bad_model, tmp / "tampered.ckpt")
        for tag, rec in (("baseline", base_rec), ("tampered", bad_rec)):
            (tmp / f"{tag}_curve.csv").write_text(rec.to_csv())
            (tmp / f"{tag}_record.json").write_text(rec.to_json())
        for tag, cm in (("baseline", cm_base), ("tampered", cm_bad), ("baseline_clean", cm_base_clean)):
            png, table = render_confusion(cm)
            (tmp / f"cm_{tag}.png").write_bytes(png)
            (tmp / f"cm_{tag}.txt").write_text(table)
            (tmp / f"cm_{tag}.json").write_text(json.dumps(cm.to_dict(), sort_keys=True) + "\n")
        (tmp / "report.json").write_text(report.to_json())
        (tmp / "report.csv").write_text(report.to_csv())
        _write_manifest(tmp, {
            "toolkit_version": __version__, "config_digest": cfg.digest(),
            "train_config_digest": tcfg.digest(), "seed": cfg.seed,
            "replay": "pixelwarden experiment --config config.yaml --deterministic",
        })
        # wall-clock lives outside the manifest so replays stay byte-identical
        timing = {"baseline": base_rec.epoch_seconds, "tampered": bad_rec.epoch_seconds}
        (tmp / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    for d in cfg.defenses:
        run_defense(out, Defense.parse(d))
    return ExperimentResult(report, (base_rec, bad_rec), out)


def load_run(run_dir) -> tuple[ExperimentConfig, AttackReport]:
    run_dir = Path(run_dir)
    needed = ["config.yaml", "report.json", "baseline.ckpt", "tampered.ckpt"]
    missing = [n for n in needed if not (run_dir / n).is_file()]
    if missing:
        raise ArtifactError(f"{run_dir} lacks experiment artifacts: {missing}")
    cfg = load_config(run_dir / "config.yaml")
    return cfg, AttackReport.from_json((run_dir / "report.json").read_text())


def run_defense(run_dir, defense: Defense, out=None) -> dict:
    """Re-evaluate both models of a finished run on defense-filtered test input."""
    run_dir = Path(run_dir)
    cfg, report = load_run(run_dir)
    _, _, test_clean = load_splits(cfg)
    plan = report.plan
    test_b = poison_dataset(test_clean, plan)
    defended_b = apply_defense_to_split(test_b, defense)
    defended_clean = apply_defense_to_split(test_clean, defense)
    base = load_checkpoint(run_dir / "baseline.ckpt")
    bad = load_checkpoint(run_dir / "tampered.ckpt")

    def metrics(model, ds_b, ds_clean):
        cm_b = confusion(model, ds_b)
        mis, into_a = trigger_strength(cm_b, plan)
        return {"b_mis": mis, "into_a": into_a,
                "causality_a_mis": causality_effectiveness(cm_b, plan),
                "clean_test_acc": 100.0 * confusion(model, ds_clean).accuracy()}

    before = {"baseline": metrics(base, test_b, test_clean), "tampered": metrics(bad, test_b, test_clean)}
    after = {"baseline": metrics(base, defended_b, defended_clean),
             "tampered": metrics(bad, defended_b, defended_clean)}
    result = {
        "defense": defense.label(),
        "plan": json.loads(describe_tamper(plan)),
        "before": before,
        "after": after,
        "trigger_strength_drop": before["tampered"]["b_mis"] - after["tampered"]["b_mis"],
        "gap_to_baseline_after": after["tampered"]["b_mis"] - before["baseline"]["b_mis"],
        "toolkit_version": __version__,
    }
    target = Path(out) if out else run_dir / f"defense_{defense.label().replace(':', '_')}.json"
    target.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result

