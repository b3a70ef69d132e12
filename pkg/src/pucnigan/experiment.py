"""Experiment configuration and the operations behind the command-line verbs."""
from __future__ import annotations

import concurrent.futures
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import urllib.request
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import datasets as ds
from .cgan import ConfigError, GanVariant
from .metrics import train_oracle_classifier
from .pu_core import TrainingAborted
from .trainer import Hyper, TrainingSchedule, joint_optimize, load_checkpoint, read_csv, write_csv

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ORIGINAL_PU = "Original PU"
DEFAULT_POSITIVE_CLASSES = {
    "mnist": [0, 1, 2, 3, 4],
    "fashion_mnist": list(ds.FASHION_NON_CLOTHES),
    "cifar10": [list(ds.CIFAR_TRANSPORT)],
}
DEFAULT_LATENT = {"mnist": 128, "fashion_mnist": 128, "cifar10": 256}


class DataConfigError(ds.DataError):
    pass


@dataclass
class SyntheticConfig:
    K: int = 2
    dim: int = 2
    separation: float = 10.0
    n_per_class: int = 2000


@dataclass
class EvalConfig:
    oracle: bool = True
    oracle_target: float = 0.99
    oracle_epochs: int = 10
    inception_score: bool = False
    is_classifier_target: float = 0.99
    is_classifier_epochs: int = 10


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    positive_classes: list = None
    positive_rate: float = 0.01
    unlabeled_dist: object = "type1"
    n_unlabeled: int | None = None
    variant: str = "CNI-CGAN"
    seed: int = 0
    output_dir: str = "runs/run"
    data_root: str | None = None
    schema_version: int = SCHEMA_VERSION
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)
    hyper: Hyper = field(default_factory=Hyper)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def K(self) -> int:
        return len(self.positive_classes)

    @property
    def is_baseline_only(self) -> bool:
        return self.variant == ORIGINAL_PU


_NESTED = {"synthetic": SyntheticConfig, "schedule": TrainingSchedule, "hyper": Hyper,
           "eval": EvalConfig}


def _strict(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate and fill defaults. Unknown keys at any level are errors."""
    raw = dict(raw)
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    nested = {k: _strict(cls, raw.pop(k, {}), k) for k, cls in _NESTED.items()}
    cfg = _strict(ExperimentConfig, {**raw, **nested}, "config")
    return resolve(cfg)


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Materialize every dataset-dependent default and check consistency."""
    if cfg.dataset not in ("synthetic", *DEFAULT_POSITIVE_CLASSES):
        raise ConfigError(f"unknown dataset {cfg.dataset!r}")
    if not 0 < cfg.positive_rate <= 1:
        raise ConfigError(f"positive_rate must be in (0, 1], got {cfg.positive_rate}")
    if cfg.positive_classes is None:
        if cfg.dataset == "synthetic":
            cfg.positive_classes = list(range(cfg.synthetic.K))
        else:
            cfg.positive_classes = DEFAULT_POSITIVE_CLASSES[cfg.dataset]
    if cfg.variant != ORIGINAL_PU:
        variant = GanVariant.preset(cfg.variant)
        if cfg.hyper.augment is None:
            cfg.hyper.augment = variant.generates_negative
        elif cfg.hyper.augment and not variant.generates_negative:
            raise ConfigError(f"{cfg.variant} generates only K classes and cannot augment "
                              "a K+1-class classifier")
    else:
        cfg.hyper.augment = False
    if cfg.data_root is None and cfg.dataset != "synthetic":
        cfg.data_root = str(ds.default_data_root())
    if not isinstance(cfg.unlabeled_dist, str):
        cfg.unlabeled_dist = [float(v) for v in cfg.unlabeled_dist]
    ds.unlabeled_distribution(cfg.unlabeled_dist, cfg.K)
    cfg.schedule.seed = cfg.seed
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = asdict(cfg)
    out["hyper"]["gan_betas"] = list(out["hyper"]["gan_betas"])
    return out


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def default_config(dataset: str, **overrides) -> ExperimentConfig:
    """Config with the dataset's customary settings; ``overrides`` are top-level fields."""
    cfg = ExperimentConfig(dataset=dataset, **overrides)
    if dataset in DEFAULT_LATENT:
        cfg.hyper.latent_dim = DEFAULT_LATENT[dataset]
    else:
        cfg.hyper.latent_dim = 4
    return resolve(cfg)


# ---------------------------------------------------------------------------
# data


_MNIST_URLS = {
    "mnist": "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "fashion_mnist": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
}


def fetch_dataset(name: str, root: Path):
    """Download the IDX files of MNIST / Fashion-MNIST into ``root / name``."""
    if name not in _MNIST_URLS:
        raise DataConfigError(f"no download source for {name!r}; place the files under {root}")
    target = root / name
    target.mkdir(parents=True, exist_ok=True)
    for split in ds._IDX_FILES.values():
        for fname in split:
            dest = target / (fname + ".gz")
            if not dest.exists() and not (target / fname).exists():
                logger.info("downloading %s", fname)
                urllib.request.urlretrieve(_MNIST_URLS[name] + fname + ".gz", dest)


def build_data(cfg: ExperimentConfig, allow_download=False):
    """PU dataset for a config, plus the analytic oracle for synthetic data."""
    if cfg.dataset == "synthetic":
        s = cfg.synthetic
        base, oracle = ds.make_synthetic_gaussian(s.K, s.dim, s.separation, s.n_per_class, cfg.seed)
    else:
        root = Path(cfg.data_root)
        if allow_download:
            fetch_dataset(cfg.dataset, root)
        base = ds.load_image_dataset(cfg.dataset, root)
        oracle = None
    data = ds.make_pu_split(base, cfg.positive_classes, cfg.positive_rate, cfg.unlabeled_dist,
                            seed=cfg.seed, n_unlabeled=cfg.n_unlabeled)
    return base, data, oracle


def split_manifest(cfg: ExperimentConfig, data: ds.PUDataset) -> dict:
    digest = hashlib.sha256()
    for arr in (data.positives.x, data.positives.y, data.unlabeled, data.priors):
        digest.update(np.ascontiguousarray(arr).tobytes())
    return {
        "schema_version": SCHEMA_VERSION, "dataset": cfg.dataset, "K": cfg.K,
        "positive_classes": cfg.positive_classes, "positive_rate": cfg.positive_rate,
        "unlabeled_dist": cfg.unlabeled_dist, "seed": cfg.seed,
        "n_positives": len(data.positives), "n_unlabeled": len(data.unlabeled),
        "n_test": len(data.test), "priors": [float(p) for p in data.priors],
        "sha256": digest.hexdigest(),
    }


def make_data(cfg: ExperimentConfig, out_dir, allow_download=False) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base, data, _ = build_data(cfg, allow_download)
    manifest = split_manifest(cfg, data)
    if cfg.dataset == "synthetic":
        s = cfg.synthetic
        ds.save_synthetic(out_dir / "synthetic.csv", base, s.K, s.dim, s.separation, cfg.seed)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# runs


class RunLock:
    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"{self.path.parent} is owned by another process") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def latest_checkpoint(run_dir: Path) -> Path | None:
    ckpts = sorted((run_dir / "checkpoints").glob("round_*"), key=lambda p: int(p.name.split("_")[1]))
    return ckpts[-1] if ckpts else None


def _oracles(cfg, base, oracle):
    eval_classifier = None
    if cfg.dataset == "synthetic":
        if cfg.eval.inception_score:
            eval_classifier = oracle
        return oracle, eval_classifier
    mapped = ds.LabeledData(base.train.x, ds.map_labels(base.train.y, cfg.positive_classes))
    if cfg.eval.oracle:
        oracle = train_oracle_classifier(mapped, cfg.eval.oracle_target, cfg.K + 1,
                                         max_epochs=cfg.eval.oracle_epochs, seed=cfg.seed,
                                         name="label_accuracy_oracle")
    if cfg.eval.inception_score:
        eval_classifier = train_oracle_classifier(
            mapped, cfg.eval.is_classifier_target, cfg.K + 1, max_epochs=cfg.eval.is_classifier_epochs,
            seed=cfg.seed + 1, name="inception_classifier")
    return oracle, eval_classifier


def run_experiment(cfg: ExperimentConfig, resume=False, allow_download=False, stop_after=None):
    """Execute one config into ``cfg.output_dir``; returns the final run state.

    ``stop_after`` caps the outer rounds of this invocation (used to test
    resumption); the persisted config keeps the full budget.
    """
    run_dir = Path(cfg.output_dir)
    with RunLock(run_dir):
        (run_dir / "ABORTED").unlink(missing_ok=True)
        (run_dir / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
        base, data, oracle = build_data(cfg, allow_download)
        oracle, eval_classifier = _oracles(cfg, base, oracle)
        variant = "CNI-CGAN" if cfg.is_baseline_only else cfg.variant
        schedule = dataclasses.replace(cfg.schedule)
        if cfg.is_baseline_only:
            schedule.outer_rounds = 0
        state = None
        if resume and latest_checkpoint(run_dir) is not None:
            state = load_checkpoint(latest_checkpoint(run_dir), data)
        if stop_after is not None:
            schedule.outer_rounds = min(schedule.outer_rounds, stop_after)
            if state is not None:
                state.schedule.outer_rounds = schedule.outer_rounds
        elif state is not None:
            state.schedule.outer_rounds = schedule.outer_rounds
        try:
            state = joint_optimize(data, variant, schedule, cfg.hyper, oracle=oracle,
                                   eval_classifier=eval_classifier, run_dir=run_dir, state=state)
        except TrainingAborted as exc:
            (run_dir / "ABORTED").write_text(f"{exc}\nlast_checkpoint={exc.checkpoint}\n")
            raise
        if cfg.is_baseline_only:
            for row in state.history:
                row["variant"] = ORIGINAL_PU
            write_csv(run_dir / "metrics.csv", state.history, _metric_columns())
        return state


def _metric_columns():
    from .trainer import METRIC_COLUMNS
    return METRIC_COLUMNS


def evaluate_checkpoint(ckpt_dir) -> dict:
    """Recompute the metrics row of a checkpoint using the run's resolved config."""
    from .trainer import evaluate
    ckpt_dir = Path(ckpt_dir)
    run_dir = ckpt_dir.parent.parent
    cfg = load_config(run_dir / "config.json")
    base, data, oracle = build_data(cfg)
    oracle, eval_classifier = _oracles(cfg, base, oracle)
    state = load_checkpoint(ckpt_dir, data)
    return evaluate(state, oracle, eval_classifier)


# ---------------------------------------------------------------------------
# grids

SUMMARY_COLUMNS = ("dataset", "method", "variant", "positive_rate", "unlabeled_dist", "seed",
                   "status", "pu_test_acc", "gen_label_acc", "trace_mean", "is_mean", "is_std",
                   "run_dir")


def expand_grid(spec: dict) -> list[ExperimentConfig]:
    """Cartesian product of ``spec['axes']`` over ``spec['base']``."""
    axes = spec.get("axes") or {}
    if not axes:
        raise ConfigError("grid needs at least one axis")
    for name, values in axes.items():
        if not values:
            raise ConfigError(f"grid axis {name!r} is empty")
    out_root = Path(spec.get("output_dir", "runs/grid"))
    names = list(axes)
    configs = []
    for combo in itertools.product(*(axes[n] for n in names)):
        raw = json.loads(json.dumps(spec.get("base", {})))
        tag = []
        for name, value in zip(names, combo):
            node, key = raw, name
            if "." in name:
                head, key = name.split(".", 1)
                node = raw.setdefault(head, {})
            node[key] = value
            tag.append(f"{key}={value}")
        raw["output_dir"] = str(out_root / "__".join(tag).replace(" ", "_").replace("/", "-"))
        configs.append(config_from_dict(raw))
    return configs


def _run_one(raw: dict) -> tuple[str, str]:
    cfg = config_from_dict(raw)
    try:
        run_experiment(cfg, resume=True)
        return cfg.output_dir, "ok"
    except Exception as exc:  # grid keeps going; failure is recorded
        logger.exception("run %s failed", cfg.output_dir)
        return cfg.output_dir, f"failed: {type(exc).__name__}: {exc}"


def run_grid(spec: dict, jobs: int = 1, summarize_only=False) -> list[dict]:
    configs = expand_grid(spec)
    status = {}
    if not summarize_only:
        raws = [config_to_dict(c) for c in configs]
        if jobs > 1:
            with concurrent.futures.ProcessPoolExecutor(jobs) as pool:
                status = dict(pool.map(_run_one, raws))
        else:
            status = dict(map(_run_one, raws))
    out_root = Path(spec.get("output_dir", "runs/grid"))
    return summarize(configs, out_root, status)


def summarize(configs, out_root: Path, status=None) -> list[dict]:
    """Long-form summary plus a table with one row per dataset x method and one
    column per positive rate (final PU accuracy, averaged over seeds)."""
    status = status or {}
    rows = []
    for cfg in configs:
        run_dir = Path(cfg.output_dir)
        row = {"dataset": cfg.dataset, "method": cfg.variant, "variant": cfg.variant,
               "positive_rate": cfg.positive_rate, "unlabeled_dist": json.dumps(cfg.unlabeled_dist).strip('"'),
               "seed": cfg.seed, "run_dir": str(run_dir)}
        metrics_path = run_dir / "metrics.csv"
        if metrics_path.exists() and not (run_dir / "ABORTED").exists():
            last = read_csv(metrics_path)[-1]
            row.update({k: last[k] for k in ("pu_test_acc", "gen_label_acc", "trace_mean",
                                             "is_mean", "is_std")})
            row["status"] = status.get(str(run_dir), "ok")
        else:
            row["status"] = status.get(str(run_dir), "missing")
        rows.append(row)
    out_root.mkdir(parents=True, exist_ok=True)
    write_csv(out_root / "summary.csv", rows, SUMMARY_COLUMNS)
    rates = sorted({r["positive_rate"] for r in rows})
    table = {}
    for r in rows:
        key = (r["dataset"], r["method"])
        if r["status"] == "ok":
            table.setdefault(key, {}).setdefault(r["positive_rate"], []).append(float(r["pu_test_acc"]))
        else:
            table.setdefault(key, {})
    table_rows = []
    for (dataset, method), cells in sorted(table.items()):
        out = {"dataset": dataset, "method": method}
        for rate in rates:
            vals = cells.get(rate)
            out[f"{100 * rate:g}%"] = f"{100 * np.mean(vals):.2f}" if vals else ""
        table_rows.append(out)
    write_csv(out_root / "table.csv", table_rows, ("dataset", "method", *[f"{100 * r:g}%" for r in rates]))
    return rows
