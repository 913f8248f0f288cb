"""Violation search, ranking and ranking metrics for a trained prompt generator."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .datagen import Label, SequenceSample
from .models import Seq2SeqModel, per_sample_distance

REPORT_SCHEMA = "capaudit.audit_report/v1"
DEFAULT_KS = (5, 10, 50, 100)
DEFAULT_DELTA_PERCENTILE = 20.0


class ReportError(Exception):
    pass


@dataclass
class RankedItem:
    sample_id: int
    distance: float
    label: Label


@dataclass
class AuditReport:
    ranked: list[RankedItem]
    violations: list[int]
    prompts: list[np.ndarray]
    precision_at: dict[int, float]
    auc_gain: float
    delta_threshold: float
    runtime_seconds: float = 0.0
    fingerprint: str = ""
    seed: int | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def payload(self) -> dict[str, Any]:
        """Everything except wall-clock timing, which is not reproducible."""
        return {
            "schema": REPORT_SCHEMA,
            "fingerprint": self.fingerprint,
            "seed": self.seed,
            "delta_threshold": self.delta_threshold,
            "auc_gain": self.auc_gain,
            "precision_at": {str(k): v for k, v in sorted(self.precision_at.items())},
            "ranked": [[r.sample_id, r.distance, r.label.name] for r in self.ranked],
            "violations": list(self.violations),
            "prompts": [np.asarray(p).tolist() for p in self.prompts],
            "extra": self.extra,
        }


def find_violations(
    theta: Seq2SeqModel,
    phi: Seq2SeqModel,
    d2: Sequence[SequenceSample],
    delta: float,
    batch_size: int = 256,
) -> tuple[list[int], list[np.ndarray], np.ndarray]:
    """Prompt the target with ``theta(v)`` for each ``v`` in ``d2``.

    Returns violation sample ids (distance strictly below ``delta``), the
    matching prompts, and every distance in ``d2`` order.
    """
    values = np.stack([s.value for s in d2])
    dtype = next(phi.parameters()).dtype
    theta.eval()
    phi.eval()
    distances = []
    prompts = []
    with torch.no_grad():
        v_all = torch.as_tensor(values, dtype=dtype)
        for start in range(0, len(d2), batch_size):
            v = v_all[start : start + batch_size]
            k = theta(v)
            distances.append(per_sample_distance(v, phi(k)).double().numpy())
            prompts.append(k.double().numpy())
    dist = np.concatenate(distances)
    keys = np.concatenate(prompts)
    if not np.isfinite(dist).all():
        raise ValueError("non-finite reproduction distance")
    hit = np.flatnonzero(dist < delta)
    return [d2[i].sample_id for i in hit], [keys[i] for i in hit], dist


def default_delta(distances: np.ndarray, percentile: float = DEFAULT_DELTA_PERCENTILE) -> float:
    return float(np.percentile(distances, percentile))


def rank_by_distance(d2: Sequence[SequenceSample], distances: Sequence[float]) -> list[RankedItem]:
    """Ascending distance (best reproduction first); ties by ``sample_id``."""
    if len(d2) != len(distances):
        raise ValueError(f"{len(d2)} samples but {len(distances)} distances")
    items = [RankedItem(s.sample_id, float(d), s.label) for s, d in zip(d2, distances)]
    items.sort(key=lambda r: (r.distance, r.sample_id))
    return items


def _is_member(labels: Sequence[Label | int]) -> np.ndarray:
    return np.array([int(l) == Label.MEMBER_COPYRIGHTED for l in labels], dtype=bool)


def precision_at_k(labels: Sequence[Label | int], k: int) -> float:
    """Percentage of members among the first ``k`` ranked labels."""
    if not 1 <= k <= len(labels):
        raise ValueError(f"K={k} outside [1, {len(labels)}]")
    return 100.0 * float(_is_member(labels[:k]).sum()) / k


def _gain_area(hits: np.ndarray) -> float:
    y = np.concatenate([[0.0], np.cumsum(hits) / hits.sum()])
    return float(np.sum((y[1:] + y[:-1]) / 2.0) / len(hits))


def auc_gain(labels: Sequence[Label | int]) -> float:
    """Trapezoidal area under the cumulative gains curve, divided by the ideal area."""
    hits = _is_member(labels).astype(float)
    if hits.sum() == 0:
        raise ValueError("no member labels in ranking")
    ideal = np.sort(hits)[::-1]
    return _gain_area(hits) / _gain_area(ideal)


def build_report(
    theta: Seq2SeqModel,
    phi: Seq2SeqModel,
    d2: Sequence[SequenceSample],
    delta: float | None = None,
    ks: Sequence[int] = DEFAULT_KS,
    delta_percentile: float = DEFAULT_DELTA_PERCENTILE,
) -> AuditReport:
    """Run the full audit. ``delta=None`` picks the ``delta_percentile`` of distances."""
    import time

    t0 = time.perf_counter()
    if delta is None:
        _, _, dist = find_violations(theta, phi, d2, 0.0)
        delta = default_delta(dist, delta_percentile)
    violations, prompts, dist = find_violations(theta, phi, d2, delta)
    ranked = rank_by_distance(d2, dist)
    labels = [r.label for r in ranked]
    precision = {k: precision_at_k(labels, k) for k in ks if k <= len(labels)}
    return AuditReport(
        ranked=ranked,
        violations=violations,
        prompts=prompts,
        precision_at=precision,
        auc_gain=auc_gain(labels),
        delta_threshold=float(delta),
        runtime_seconds=time.perf_counter() - t0,
    )


def emit_report(report: AuditReport, path: str | os.PathLike, csv_path: str | os.PathLike | None = None) -> Path:
    """Write the report payload as canonical JSON.

    Runtime goes to a ``.timing.json`` sidecar so the main file is
    byte-identical across reruns with the same seed.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(report.payload(), sort_keys=True, separators=(",", ":")))
    os.replace(tmp, path)
    path.with_suffix(".timing.json").write_text(json.dumps({"runtime_seconds": report.runtime_seconds}))
    if csv_path is not None:
        vset = set(report.violations)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "distance", "label", "violation"])
            for r in report.ranked:
                w.writerow([r.sample_id, repr(r.distance), r.label.name, int(r.sample_id in vset)])
    return path


def load_report(path: str | os.PathLike) -> AuditReport:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path}: not valid JSON") from exc
    if data.get("schema") != REPORT_SCHEMA:
        raise ReportError(f"{path}: unexpected schema {data.get('schema')!r}")
    timing = path.with_suffix(".timing.json")
    runtime = json.loads(timing.read_text())["runtime_seconds"] if timing.exists() else 0.0
    return AuditReport(
        ranked=[RankedItem(int(i), float(d), Label[l]) for i, d, l in data["ranked"]],
        violations=[int(i) for i in data["violations"]],
        prompts=[np.asarray(p) for p in data["prompts"]],
        precision_at={int(k): float(v) for k, v in data["precision_at"].items()},
        auc_gain=float(data["auc_gain"]),
        delta_threshold=float(data["delta_threshold"]),
        runtime_seconds=float(runtime),
        fingerprint=data["fingerprint"],
        seed=data["seed"],
        extra=data.get("extra", {}),
    )
