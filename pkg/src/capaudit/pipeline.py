"""Config-driven orchestration: bundles, checkpoints, audit reports, aggregates, benchmarks.

Artifacts live under ``output_dir/{bundles,checkpoints,reports,bench}/`` and
are named by a fingerprint of the config sections they depend on, so reruns
with the same config and seed overwrite files with identical content.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import yaml
from scipy import stats

from . import audit, datagen, models, training

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "CAP_OUTPUT_ROOT"
AGGREGATE_SCHEMA = "capaudit.aggregate/v1"
BENCH_SCHEMA = "capaudit.bench/v1"
DEFAULT_SEEDS = list(range(10))


class ConfigError(ValueError):
    pass


class MissingPrerequisite(FileNotFoundError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    n_per_subset: int = 600
    n_copyrighted: int = 200
    n_features: int = 8
    seq_len: int = 20
    overlap: bool = False
    seed: int = 0
    csv_path: str | None = None
    n_clusters: int = 3
    copyright_fraction: float = 0.3


@dataclass
class ModelSection:
    target: str = "desk"
    prompter: str = "desk"
    dropout: float = 0.1


@dataclass
class TrainingConfig:
    lr: float = 1e-4
    target_epochs: int = 1000
    prompter_epochs: int = 500
    batch_size: int = 32
    es_patience: int = 30
    alpha: float = 5
    omega: float = 0.0
    quantile: float = 0.8
    min_fit_size: int = 30


@dataclass
class AuditConfig:
    delta: float | None = None
    delta_percentile: float = audit.DEFAULT_DELTA_PERCENTILE
    ks: list[int] = field(default_factory=lambda: list(audit.DEFAULT_KS))


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    audit: AuditConfig = field(default_factory=AuditConfig)
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    output_dir: str = "runs"

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def validate(self) -> "RunConfig":
        d = self.dataset
        if d.kind not in ("synthetic", "csv"):
            raise ConfigError(f"dataset.kind must be 'synthetic' or 'csv', got {d.kind!r}")
        if d.seq_len < 2 or d.seq_len % 2:
            raise ConfigError("dataset.seq_len must be an even integer >= 2")
        if d.kind == "synthetic":
            if min(d.n_per_subset, d.n_copyrighted, d.n_features) < 1:
                raise ConfigError("dataset sizes must be positive")
            if d.n_copyrighted > d.n_per_subset:
                raise ConfigError("dataset.n_copyrighted cannot exceed dataset.n_per_subset")
        else:
            if not d.csv_path:
                raise ConfigError("dataset.csv_path is required for kind 'csv'")
            if not Path(d.csv_path).is_file():
                raise ConfigError(f"dataset.csv_path not found: {d.csv_path}")
            if not 0 < d.copyright_fraction < 1:
                raise ConfigError("dataset.copyright_fraction must lie in (0, 1)")
        for name in ("target", "prompter"):
            if getattr(self.model, name) not in ("desk", "paper"):
                raise ConfigError(f"model.{name} must be 'desk' or 'paper'")
        t = self.training
        if t.lr <= 0 or t.batch_size < 1 or t.target_epochs < 1 or t.prompter_epochs < 1 or t.es_patience < 1:
            raise ConfigError("training hyperparameters must be positive")
        if t.alpha < 1 or t.omega < 0:
            raise ConfigError("training.alpha must be >= 1 and training.omega >= 0")
        if not 0 < t.quantile < 1:
            raise ConfigError("training.quantile must lie in (0, 1)")
        if any(k < 1 for k in self.audit.ks):
            raise ConfigError("audit.ks must be positive")
        if self.audit.delta is not None and self.audit.delta <= 0:
            raise ConfigError("audit.delta must be positive")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        return self


_NUMERIC = {"int": int, "float": float, "float | None": float}


def _coerce(value: Any, type_name: str, where: str) -> Any:
    # YAML 1.1 reads "1e-4" (no dot) as a string; accept it and "inf" for numeric fields.
    conv = _NUMERIC.get(type_name)
    if conv is None or value is None or isinstance(value, bool):
        return value
    try:
        out = float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: expected a number, got {value!r}") from exc
    if conv is int:
        if not out.is_integer():
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(out)
    return out


def _build(cls, data: Mapping[str, Any] | None, where: str):
    data = dict(data or {})
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**{k: _coerce(v, str(fields[k].type), f"{where}.{k}") for k, v in data.items()})


def config_from_dict(data: Mapping[str, Any]) -> RunConfig:
    data = dict(data)
    unknown = set(data) - {f.name for f in dataclasses.fields(RunConfig)}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    try:
        cfg = RunConfig(
            dataset=_build(DatasetConfig, data.get("dataset"), "dataset"),
            model=_build(ModelSection, data.get("model"), "model"),
            training=_build(TrainingConfig, data.get("training"), "training"),
            audit=_build(AuditConfig, data.get("audit"), "audit"),
            seeds=[int(s) for s in data.get("seeds", DEFAULT_SEEDS)],
            output_dir=str(data.get("output_dir", os.environ.get(OUTPUT_ROOT_ENV, "runs"))),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def apply_overrides(data: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars."""
    data = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        cur = data
        parts = dotted.strip().split(".")
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
            if not isinstance(cur, dict):
                raise ConfigError(f"cannot override into non-mapping at {dotted}")
        cur[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path: str | os.PathLike | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
        data = loaded or {}
    return config_from_dict(apply_overrides(data, overrides)).validate()


# --------------------------------------------------------------------------- naming


def _hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def data_fingerprint(cfg: RunConfig) -> str:
    return _hash({"dataset": dataclasses.asdict(cfg.dataset)})


def target_fingerprint(cfg: RunConfig) -> str:
    t = cfg.training
    return _hash({
        "data": data_fingerprint(cfg),
        "model": [cfg.model.target, cfg.model.dropout],
        "train": [t.lr, t.target_epochs, t.batch_size, t.es_patience],
    })


def config_fingerprint(cfg: RunConfig) -> str:
    """Fingerprint of everything that determines results (seeds and output dir excluded)."""
    d = cfg.to_dict()
    d.pop("seeds")
    d.pop("output_dir")
    return _hash(d)


@dataclass
class Layout:
    root: Path

    def __post_init__(self) -> None:
        self.root = Path(self.root)

    def sub(self, name: str) -> Path:
        p = self.root / name
        p.mkdir(parents=True, exist_ok=True)
        return p

    def bundle(self, cfg: RunConfig) -> Path:
        return self.sub("bundles") / f"bundle-{data_fingerprint(cfg)}.cap"

    def target(self, cfg: RunConfig, seed: int) -> Path:
        return self.sub("checkpoints") / f"target-{target_fingerprint(cfg)}-s{seed}.pt"

    def prompter(self, cfg: RunConfig, seed: int, optimized: bool) -> Path:
        arm = "opt" if optimized else "noopt"
        return self.sub("checkpoints") / f"prompter-{config_fingerprint(cfg)}-s{seed}-{arm}.pt"

    def report(self, cfg: RunConfig, seed: int, optimized: bool) -> Path:
        arm = "opt" if optimized else "noopt"
        return self.sub("reports") / f"audit-{config_fingerprint(cfg)}-s{seed}-{arm}.json"

    def index(self, cfg: RunConfig, optimized: bool) -> Path:
        arm = "opt" if optimized else "noopt"
        return self.sub("reports") / f"index-{config_fingerprint(cfg)}-{arm}.json"

    def bench(self, cfg: RunConfig) -> Path:
        return self.sub("bench") / f"bench-{config_fingerprint(cfg)}.json"


def _write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=1, sort_keys=True))
    os.replace(tmp, path)
    return path


# --------------------------------------------------------------------------- stages


def synth_data(cfg: RunConfig) -> Path:
    d = cfg.dataset
    if d.kind != "synthetic":
        raise ConfigError("synth-data needs dataset.kind = synthetic")
    try:
        bundle = datagen.generate_synthetic(d.n_per_subset, d.n_copyrighted, d.n_features, d.seq_len, d.overlap, d.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return datagen.save_bundle(bundle, Layout(cfg.output_dir).bundle(cfg))


def ingest(cfg: RunConfig) -> Path:
    d = cfg.dataset
    if d.kind != "csv":
        raise ConfigError("ingest needs dataset.kind = csv")
    table, names = datagen.load_csv(d.csv_path)
    try:
        bundle = datagen.window_and_split(table, d.seq_len, d.n_clusters, d.copyright_fraction, d.seed, names)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return datagen.save_bundle(bundle, Layout(cfg.output_dir).bundle(cfg))


@dataclass
class PreparedData:
    bundle: datagen.DatasetBundle
    d_tr: list[datagen.SequenceSample]
    d_v: list[datagen.SequenceSample]
    d2: list[datagen.SequenceSample]


def load_prepared(cfg: RunConfig) -> PreparedData:
    path = Layout(cfg.output_dir).bundle(cfg)
    if not path.exists():
        cmd = "synth-data" if cfg.dataset.kind == "synthetic" else "ingest"
        raise MissingPrerequisite(f"missing prerequisite: bundle {path} (run '{cmd}' first)")
    bundle = datagen.load_bundle(path)
    sc = bundle.scaler
    norm = lambda xs: [datagen.apply_scaler(s, sc) for s in xs]  # noqa: E731
    return PreparedData(bundle, norm(bundle.d_tr), norm(bundle.d_v), norm(bundle.d2))


def model_configs(cfg: RunConfig, bundle: datagen.DatasetBundle) -> tuple[models.ModelConfig, models.ModelConfig]:
    F, tk, tv = bundle.n_features, bundle.key_len, bundle.value_len
    target = models.ModelConfig.preset(cfg.model.target, in_features=F, out_features=F, in_len=tk, out_len=tv, dropout=cfg.model.dropout)
    prompter = models.ModelConfig.preset(cfg.model.prompter, in_features=F, out_features=F, in_len=tv, out_len=tk, dropout=cfg.model.dropout)
    return target, prompter


def train_target(cfg: RunConfig, seed: int, data: PreparedData | None = None) -> tuple[Path, training.TrainReport]:
    data = data or load_prepared(cfg)
    target_cfg, _ = model_configs(cfg, data.bundle)
    t = cfg.training
    phi, report = training.train_target(
        target_cfg, data.d_tr, data.d_v, max_epochs=t.target_epochs, es_patience=t.es_patience,
        lr=t.lr, seed=seed, batch_size=t.batch_size,
    )
    path = Layout(cfg.output_dir).target(cfg, seed)
    models.save_checkpoint(
        phi, path, seed=seed, epoch=report.best_epoch, best_metric=report.best_metric,
        fingerprint=target_fingerprint(cfg), role="target",
    )
    report.write(path.with_suffix(".train.json"))
    return path, report


def load_target(cfg: RunConfig, seed: int, data: PreparedData) -> models.Seq2SeqModel:
    path = Layout(cfg.output_dir).target(cfg, seed)
    if not path.exists():
        raise MissingPrerequisite(f"missing prerequisite: target checkpoint {path} (run 'train-target' first)")
    target_cfg, _ = model_configs(cfg, data.bundle)
    return models.load_checkpoint(path, expected=target_cfg)


def train_prompter(
    cfg: RunConfig, seed: int, optimized: bool, data: PreparedData | None = None
) -> tuple[Path, training.TrainReport]:
    data = data or load_prepared(cfg)
    phi = load_target(cfg, seed, data)
    _, prompter_cfg = model_configs(cfg, data.bundle)
    t = cfg.training
    common = dict(max_epochs=t.prompter_epochs, batch_size=t.batch_size, lr=t.lr, seed=seed)
    if optimized:
        theta, report = training.train_prompter_optimized(
            prompter_cfg, phi, data.d2, alpha=t.alpha, omega=t.omega,
            quantile=t.quantile, min_fit_size=t.min_fit_size, **common,
        )
    else:
        theta, report = training.train_prompter_baseline(prompter_cfg, phi, data.d2, **common)
    path = Layout(cfg.output_dir).prompter(cfg, seed, optimized)
    models.save_checkpoint(
        theta, path, seed=seed, epoch=report.best_epoch, best_metric=report.best_metric,
        fingerprint=config_fingerprint(cfg), role="prompter", optimized=optimized,
    )
    report.write(path.with_suffix(".train.json"))
    return path, report


def run_audit(cfg: RunConfig, seed: int, optimized: bool = False, data: PreparedData | None = None) -> Path:
    data = data or load_prepared(cfg)
    phi = load_target(cfg, seed, data)
    ppath = Layout(cfg.output_dir).prompter(cfg, seed, optimized)
    if not ppath.exists():
        flag = " --optimized" if optimized else ""
        raise MissingPrerequisite(f"missing prerequisite: prompter checkpoint {ppath} (run 'train-prompter{flag}' first)")
    _, prompter_cfg = model_configs(cfg, data.bundle)
    theta = models.load_checkpoint(ppath, expected=prompter_cfg)
    report = audit.build_report(
        theta, phi, data.d2, delta=cfg.audit.delta, ks=cfg.audit.ks, delta_percentile=cfg.audit.delta_percentile
    )
    report.fingerprint = config_fingerprint(cfg)
    report.seed = seed
    report.extra = {"optimized": optimized, "n_members": len(data.bundle.d_c), "n_d2": len(data.d2)}
    out = Layout(cfg.output_dir).report(cfg, seed, optimized)
    audit.emit_report(report, out, csv_path=out.with_suffix(".csv"))
    return out


def write_index(cfg: RunConfig, report_paths: Sequence[Path], optimized: bool) -> Path:
    entries = []
    for p in report_paths:
        r = audit.load_report(p)
        entries.append({"seed": r.seed, "path": Path(p).name, "auc_gain": r.auc_gain,
                        "precision_at": {str(k): v for k, v in sorted(r.precision_at.items())}})
    return _write_json(Layout(cfg.output_dir).index(cfg, optimized),
                       {"fingerprint": config_fingerprint(cfg), "optimized": optimized, "reports": entries})


# --------------------------------------------------------------------------- aggregation


@dataclass
class MetricSummary:
    mean: float
    half_width: float
    n: int

    def format(self, digits: int = 2) -> str:
        return f"{self.mean:.{digits}f} ± {self.half_width:.{digits}f}"


def mean_ci(values: Sequence[float], confidence: float = 0.95) -> MetricSummary:
    """Mean with a Student-t confidence half-width (n - 1 degrees of freedom)."""
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two runs for a confidence interval")
    sd = float(x.std(ddof=1))
    t = float(stats.t.ppf(0.5 + confidence / 2, x.size - 1))
    return MetricSummary(float(x.mean()), t * sd / math.sqrt(x.size), int(x.size))


def aggregate_reports(paths: Sequence[str | os.PathLike]) -> dict[str, MetricSummary]:
    if len(paths) < 2:
        raise ConfigError("aggregate needs at least two reports")
    return summarize([audit.load_report(p) for p in paths])


def summarize(reports: Sequence[audit.AuditReport]) -> dict[str, MetricSummary]:
    """Per-metric mean and 95% CI over reports that share one config fingerprint."""
    prints = {r.fingerprint for r in reports}
    if len(prints) != 1:
        raise ConfigError(f"reports have mixed config fingerprints: {sorted(prints)}")
    ks = sorted(set.intersection(*(set(r.precision_at) for r in reports)))
    out = {f"precision@{k}": mean_ci([r.precision_at[k] for r in reports]) for k in ks}
    out["auc_gain"] = mean_ci([r.auc_gain for r in reports])
    return out


def format_table(summary: Mapping[str, MetricSummary]) -> dict[str, str]:
    return {k: v.format(0 if k.startswith("precision") else 2) for k, v in summary.items()}


def write_aggregate(paths: Sequence[str | os.PathLike], out: str | os.PathLike) -> Path:
    summary = aggregate_reports(paths)
    fingerprint = audit.load_report(paths[0]).fingerprint
    payload = {
        "schema": AGGREGATE_SCHEMA,
        "fingerprint": fingerprint,
        "n_runs": len(paths),
        "metrics": {k: dataclasses.asdict(v) for k, v in summary.items()},
        "table": format_table(summary),
    }
    return _write_json(Path(out), payload)


# --------------------------------------------------------------------------- benchmark


def bench(cfg: RunConfig, seeds: Sequence[int] | None = None) -> Path:
    """Paired No-Opt / Opt prompter training per seed, with timings and audit metrics."""
    data = load_prepared(cfg)
    layout = Layout(cfg.output_dir)
    runs = []
    for i, seed in enumerate(seeds if seeds is not None else cfg.seeds):
        if not layout.target(cfg, seed).exists():
            train_target(cfg, seed, data)
        arms = {}
        # Alternate which arm runs first so warm-up and drift cancel across seeds.
        for optimized in ((False, True) if i % 2 == 0 else (True, False)):
            _, rep = train_prompter(cfg, seed, optimized, data)
            r = audit.load_report(run_audit(cfg, seed, optimized, data))
            arms["opt" if optimized else "noopt"] = {
                "total_seconds": rep.total_seconds,
                "epoch_seconds": rep.epoch_seconds,
                "epoch_loss": rep.epoch_loss,
                "active_sizes": rep.active_sizes,
                "pruning_events": [dataclasses.asdict(e) for e in rep.pruning_events],
                "auc_gain": r.auc_gain,
                "precision_at": {str(k): v for k, v in sorted(r.precision_at.items())},
            }
        no, op = arms["noopt"], arms["opt"]
        runs.append({
            "seed": seed,
            "noopt": no,
            "opt": op,
            "time_ratio": op["total_seconds"] / no["total_seconds"],
            "auc_gain_delta": op["auc_gain"] - no["auc_gain"],
            "precision_delta": {k: op["precision_at"][k] - no["precision_at"][k] for k in no["precision_at"]},
        })
    total_no = sum(r["noopt"]["total_seconds"] for r in runs)
    total_op = sum(r["opt"]["total_seconds"] for r in runs)
    payload = {
        "schema": BENCH_SCHEMA,
        "fingerprint": config_fingerprint(cfg),
        "runs": runs,
        "total_seconds": {"noopt": total_no, "opt": total_op},
        "time_ratio": total_op / total_no,
        "mean_auc_gain": {
            "noopt": float(np.mean([r["noopt"]["auc_gain"] for r in runs])),
            "opt": float(np.mean([r["opt"]["auc_gain"] for r in runs])),
        },
    }
    return _write_json(layout.bench(cfg), payload)
