"""Synthetic and CSV-backed datasets for copyright audits.

Every sequence is cut into a key (first half) and a value (second half).
Four splits are produced: ``d_tr`` and ``d_v`` train/validate the target model,
``d_c`` is a uniform sample of ``d_tr`` (the copyrighted members) and ``d_nc``
holds copyrighted sequences the target never saw.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

logger = logging.getLogger(__name__)

BUNDLE_MAGIC = b"CAPBNDL\x00"
BUNDLE_SCHEMA_VERSION = 1

# Geometry of the synthetic patterns (unit diagonal covariance throughout).
PATTERN_SPACING = 8.0
OVERLAP_DISTANCE = 0.5
HALF_SHIFT = 3.0


class Label(enum.IntEnum):
    NONE = 0
    MEMBER_COPYRIGHTED = 1
    NONMEMBER_COPYRIGHTED = 2


class BundleError(Exception):
    """Raised when a bundle file cannot be read back faithfully."""


@dataclass
class SequenceSample:
    key: np.ndarray
    value: np.ndarray
    label: Label
    sample_id: int
    pattern_id: int = -1

    def __post_init__(self) -> None:
        if self.key.ndim != 2 or self.value.ndim != 2:
            raise ValueError("key and value must be [T x F] matrices")
        if self.key.shape[1] != self.value.shape[1]:
            raise ValueError("key and value must share the feature dimension")
        if min(self.key.shape + self.value.shape) < 1:
            raise ValueError("empty key or value")
        if not (np.isfinite(self.key).all() and np.isfinite(self.value).all()):
            raise ValueError(f"sample {self.sample_id} has non-finite entries")


@dataclass
class GaussianPatternSpec:
    mean_first: np.ndarray
    mean_second: np.ndarray
    cov_first: np.ndarray
    cov_second: np.ndarray
    pattern_id: int

    def sample(self, rng: np.random.Generator, n: int, half_len: int) -> np.ndarray:
        """Draw ``n`` sequences of length ``2 * half_len``; timesteps are i.i.d. within a half."""
        first = rng.multivariate_normal(self.mean_first, self.cov_first, size=(n, half_len))
        second = rng.multivariate_normal(self.mean_second, self.cov_second, size=(n, half_len))
        return np.concatenate([first, second], axis=1)


@dataclass
class Scaler:
    """Per-feature affine normalization ``(x - shift) / scale``."""

    shift: np.ndarray
    scale: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.shift) / self.scale

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.scale + self.shift


@dataclass
class DatasetBundle:
    d_tr: list[SequenceSample]
    d_v: list[SequenceSample]
    d_nc: list[SequenceSample]
    d_c: list[SequenceSample]
    scaler: Scaler
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def d2(self) -> list[SequenceSample]:
        """The auditor's copyrighted set: members first, then non-members."""
        return list(self.d_c) + list(self.d_nc)

    @property
    def n_features(self) -> int:
        return self.d_tr[0].key.shape[1]

    @property
    def key_len(self) -> int:
        return self.d_tr[0].key.shape[0]

    @property
    def value_len(self) -> int:
        return self.d_tr[0].value.shape[0]

    def validate(self) -> None:
        tr_ids = {s.sample_id for s in self.d_tr}
        nc_ids = {s.sample_id for s in self.d_nc}
        v_ids = {s.sample_id for s in self.d_v}
        c_ids = {s.sample_id for s in self.d_c}
        if not c_ids <= tr_ids:
            raise ValueError("d_c must be a subset of d_tr")
        if tr_ids & nc_ids or v_ids & nc_ids:
            raise ValueError("d_nc overlaps d_tr or d_v")
        for s in self.d_c:
            if s.label is not Label.MEMBER_COPYRIGHTED:
                raise ValueError(f"d_c sample {s.sample_id} mislabelled")
        for s in self.d_nc:
            if s.label is not Label.NONMEMBER_COPYRIGHTED:
                raise ValueError(f"d_nc sample {s.sample_id} mislabelled")
        if np.any(self.scaler.scale <= 0):
            raise ValueError("scaler.scale must be positive")


def stack(samples: Sequence[SequenceSample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into ``keys [n, T_k, F]`` and ``values [n, T_v, F]``."""
    keys = np.stack([s.key for s in samples])
    values = np.stack([s.value for s in samples])
    return keys, values


def _random_unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    u = rng.standard_normal(dim)
    norm = np.linalg.norm(u)
    if norm == 0:
        u = np.ones(dim)
        norm = np.sqrt(dim)
    return u / norm


def synthetic_patterns(n_features: int, overlap: bool, rng: np.random.Generator) -> list[GaussianPatternSpec]:
    """Three patterns laid out along a random direction, ``PATTERN_SPACING`` apart.

    In overlap mode the third pattern (used for ``d_nc``) is moved to within
    ``OVERLAP_DISTANCE`` of the first (used for ``d_tr``).
    """
    axis = _random_unit(rng, n_features)
    half_axis = _random_unit(rng, n_features)
    jitter = _random_unit(rng, n_features)
    eye = np.eye(n_features)
    anchors = [0.0, PATTERN_SPACING, 2 * PATTERN_SPACING]
    specs = []
    for pid, a in enumerate(anchors):
        first = a * axis
        if overlap and pid == 2:
            first = specs[0].mean_first + OVERLAP_DISTANCE * jitter
        second = first + HALF_SHIFT * half_axis
        specs.append(GaussianPatternSpec(first, second, eye.copy(), eye.copy(), pid))
    return specs


def _label_splits(
    tr: list[SequenceSample], nc: list[SequenceSample], c_positions: np.ndarray
) -> list[SequenceSample]:
    for s in nc:
        s.label = Label.NONMEMBER_COPYRIGHTED
    d_c = []
    for pos in sorted(int(p) for p in c_positions):
        tr[pos].label = Label.MEMBER_COPYRIGHTED
        d_c.append(tr[pos])
    return d_c


def generate_synthetic(
    n_per_subset: int,
    n_copyrighted: int,
    n_features: int,
    seq_len: int,
    overlap: bool,
    seed: int,
) -> DatasetBundle:
    """Build the Synthetic / Synthetic-Overlap bundle.

    ``d_tr``, ``d_v`` and ``d_nc`` each hold ``n_per_subset`` sequences drawn
    from their own Gaussian pattern; ``d_c`` is ``n_copyrighted`` elements of
    ``d_tr`` chosen uniformly without replacement.
    """
    if n_per_subset < 1 or n_copyrighted < 1 or n_features < 1 or seq_len < 2:
        raise ValueError("sizes must be positive (seq_len >= 2)")
    if n_copyrighted > n_per_subset:
        raise ValueError("n_copyrighted cannot exceed n_per_subset")
    if seq_len % 2:
        raise ValueError("seq_len must be even")

    rng = np.random.default_rng(seed)
    half = seq_len // 2
    patterns = synthetic_patterns(n_features, overlap, rng)

    splits: list[list[SequenceSample]] = []
    next_id = 0
    for spec in patterns:
        seqs = spec.sample(rng, n_per_subset, half)
        split = []
        for seq in seqs:
            split.append(SequenceSample(seq[:half].copy(), seq[half:].copy(), Label.NONE, next_id, spec.pattern_id))
            next_id += 1
        splits.append(split)
    d_tr, d_v, d_nc = splits

    c_positions = rng.choice(n_per_subset, size=n_copyrighted, replace=False)
    d_c = _label_splits(d_tr, d_nc, c_positions)

    meta = {
        "source": "synthetic",
        "n_per_subset": n_per_subset,
        "n_copyrighted": n_copyrighted,
        "n_features": n_features,
        "seq_len": seq_len,
        "overlap": bool(overlap),
        "seed": int(seed),
        "patterns": [
            {"pattern_id": p.pattern_id, "mean_first": p.mean_first.tolist(), "mean_second": p.mean_second.tolist()}
            for p in patterns
        ],
    }
    bundle = DatasetBundle(d_tr, d_v, d_nc, d_c, fit_scaler(d_tr), meta)
    bundle.validate()
    return bundle


def fit_scaler(samples: Sequence[SequenceSample]) -> Scaler:
    """Fit per-feature mean/std over every timestep (key and value) of ``samples``.

    Features with zero spread get ``scale = 1``.
    """
    if len(samples) == 0:
        raise ValueError("cannot fit a scaler on no samples")
    rows = np.concatenate([np.concatenate([s.key, s.value]) for s in samples])
    shift = rows.mean(axis=0)
    scale = rows.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return Scaler(shift, scale)


def apply_scaler(sample: SequenceSample, scaler: Scaler) -> SequenceSample:
    return SequenceSample(scaler.apply(sample.key), scaler.apply(sample.value), sample.label, sample.sample_id, sample.pattern_id)


def invert_scaler(sample: SequenceSample, scaler: Scaler) -> SequenceSample:
    return SequenceSample(scaler.invert(sample.key), scaler.invert(sample.value), sample.label, sample.sample_id, sample.pattern_id)


# --------------------------------------------------------------------------- real data


def load_csv(path: str | os.PathLike) -> tuple[np.ndarray, list[str]]:
    """Read a CSV (header row, one row per timestep) into a float table.

    Non-numeric columns are ignored and rows containing nulls are dropped.
    """
    import pandas as pd

    frame = pd.read_csv(path)
    numeric = frame.select_dtypes(include="number")
    skipped = sorted(set(frame.columns) - set(numeric.columns))
    if skipped:
        logger.warning("ignoring non-numeric columns: %s", ", ".join(map(str, skipped)))
    before = len(numeric)
    numeric = numeric.dropna(axis=0, how="any")
    if len(numeric) < before:
        logger.info("dropped %d rows with missing values", before - len(numeric))
    return numeric.to_numpy(dtype=np.float64), [str(c) for c in numeric.columns]


def _window_summaries(windows: np.ndarray) -> np.ndarray:
    summary = np.concatenate([windows.mean(axis=1), windows.std(axis=1)], axis=1)
    spread = summary.std(axis=0)
    spread = np.where(spread > 0, spread, 1.0)
    return (summary - summary.mean(axis=0)) / spread


def window_and_split(
    raw_table: np.ndarray,
    seq_len: int,
    n_clusters: int = 3,
    copyright_fraction: float = 0.3,
    seed: int = 0,
    feature_names: Sequence[str] | None = None,
) -> DatasetBundle:
    """Cut a ``[N x F]`` table into non-overlapping windows and form the four splits.

    Windows are grouped by average-linkage agglomerative clustering of their
    per-feature (mean, std) summaries, then dealt round-robin into
    ``d_tr``/``d_v``/``d_nc`` cluster by cluster so each split sees every cluster.
    """
    from scipy.cluster.hierarchy import fcluster, linkage

    table = np.asarray(raw_table, dtype=np.float64)
    if table.ndim != 2:
        raise ValueError("raw_table must be a 2-D [N x F] array")
    if seq_len < 2 or seq_len % 2:
        raise ValueError("seq_len must be an even integer >= 2")
    if not 0 < copyright_fraction < 1:
        raise ValueError("copyright_fraction must lie in (0, 1)")
    if n_clusters < 1:
        raise ValueError("n_clusters must be positive")
    n_rows = table.shape[0]
    if n_rows < 3 * seq_len:
        raise ValueError(f"need at least {3 * seq_len} rows, got {n_rows}")
    if not np.isfinite(table).all():
        raise ValueError("table contains non-finite values")

    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(table.shape[1])]
    constant = np.ptp(table, axis=0) == 0
    if constant.any():
        dropped = [n for n, c in zip(names, constant) if c]
        logger.warning("dropping constant features: %s", ", ".join(dropped))
        table = table[:, ~constant]
        names = [n for n, c in zip(names, constant) if not c]
    if table.shape[1] == 0:
        raise ValueError("every feature is constant")

    n_windows = n_rows // seq_len
    windows = table[: n_windows * seq_len].reshape(n_windows, seq_len, table.shape[1])

    k = min(n_clusters, n_windows)
    if k > 1:
        tree = linkage(_window_summaries(windows), method="average")
        clusters = fcluster(tree, t=k, criterion="maxclust") - 1
    else:
        clusters = np.zeros(n_windows, dtype=int)

    rng = np.random.default_rng(seed)
    assignment = np.empty(n_windows, dtype=int)
    turn = 0
    for cluster in np.unique(clusters):
        members = np.flatnonzero(clusters == cluster)
        for w in rng.permutation(members):
            assignment[w] = turn % 3
            turn += 1

    half = seq_len // 2
    splits: list[list[SequenceSample]] = [[], [], []]
    for w in range(n_windows):
        seq = windows[w]
        splits[assignment[w]].append(
            SequenceSample(seq[:half].copy(), seq[half:].copy(), Label.NONE, w, int(clusters[w]))
        )
    d_tr, d_v, d_nc = splits

    n_c = max(1, int(round(copyright_fraction * len(d_tr))))
    c_positions = rng.choice(len(d_tr), size=n_c, replace=False)
    d_c = _label_splits(d_tr, d_nc, c_positions)

    meta = {
        "source": "csv",
        "n_rows": int(n_rows),
        "n_features": int(table.shape[1]),
        "feature_names": names,
        "seq_len": seq_len,
        "n_clusters": n_clusters,
        "copyright_fraction": copyright_fraction,
        "seed": int(seed),
        "overlap": None,
    }
    bundle = DatasetBundle(d_tr, d_v, d_nc, d_c, fit_scaler(d_tr), meta)
    bundle.validate()
    return bundle


# --------------------------------------------------------------------------- persistence
#
# File layout:
#   8 bytes   magic  b"CAPBNDL\0"
#   8 bytes   little-endian uint64 header length H
#   H bytes   UTF-8 JSON header (schema_version, meta, checksum, array table)
#   payload   concatenated little-endian arrays, offsets relative to payload start
# The checksum is the SHA-256 of the payload plus the header with "checksum" removed.

_SPLITS = ("d_tr", "d_v", "d_nc")


def _split_arrays(samples: list[SequenceSample]) -> dict[str, np.ndarray]:
    if samples:
        keys, values = stack(samples)
    else:
        keys = values = np.zeros((0, 1, 1))
    return {
        "keys": keys.astype("<f8"),
        "values": values.astype("<f8"),
        "labels": np.array([int(s.label) for s in samples], dtype="<i1"),
        "sample_ids": np.array([s.sample_id for s in samples], dtype="<i8"),
        "pattern_ids": np.array([s.pattern_id for s in samples], dtype="<i8"),
    }


def _digest(header: dict[str, Any], payload: bytes) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
    h.update(payload)
    return h.hexdigest()


def save_bundle(bundle: DatasetBundle, path: str | os.PathLike) -> Path:
    """Write ``bundle`` atomically; identical bundles produce identical bytes."""
    arrays: dict[str, np.ndarray] = {}
    for name in _SPLITS:
        for field_name, arr in _split_arrays(getattr(bundle, name)).items():
            arrays[f"{name}/{field_name}"] = arr
    arrays["d_c/sample_ids"] = np.array([s.sample_id for s in bundle.d_c], dtype="<i8")
    arrays["scaler/shift"] = np.asarray(bundle.scaler.shift, dtype="<f8")
    arrays["scaler/scale"] = np.asarray(bundle.scaler.scale, dtype="<f8")

    table = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        raw = np.ascontiguousarray(arrays[name]).tobytes()
        table.append({"name": name, "dtype": arrays[name].dtype.str, "shape": list(arrays[name].shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)

    header = {"schema_version": BUNDLE_SCHEMA_VERSION, "meta": bundle.meta, "arrays": table}
    header["checksum"] = _digest(header, payload)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(BUNDLE_MAGIC)
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_bundle(path: str | os.PathLike) -> DatasetBundle:
    data = Path(path).read_bytes()
    if data[:8] != BUNDLE_MAGIC:
        raise BundleError(f"{path}: not a bundle file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleError(f"{path}: corrupt header") from exc
    if header.get("schema_version") != BUNDLE_SCHEMA_VERSION:
        raise BundleError(f"{path}: schema version {header.get('schema_version')} != {BUNDLE_SCHEMA_VERSION}")
    payload = data[16 + hlen :]
    expected = header.pop("checksum", None)
    if expected != _digest(header, payload):
        raise BundleError(f"{path}: checksum mismatch")

    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()

    splits = {}
    for name in _SPLITS:
        keys = arrays[f"{name}/keys"]
        values = arrays[f"{name}/values"]
        labels = arrays[f"{name}/labels"]
        ids = arrays[f"{name}/sample_ids"]
        pids = arrays[f"{name}/pattern_ids"]
        splits[name] = [
            SequenceSample(keys[i], values[i], Label(int(labels[i])), int(ids[i]), int(pids[i])) for i in range(len(ids))
        ]
    by_id = {s.sample_id: s for s in splits["d_tr"]}
    try:
        d_c = [by_id[int(i)] for i in arrays["d_c/sample_ids"]]
    except KeyError as exc:
        raise BundleError(f"{path}: d_c references unknown sample {exc}") from exc

    bundle = DatasetBundle(
        splits["d_tr"], splits["d_v"], splits["d_nc"], d_c,
        Scaler(arrays["scaler/shift"], arrays["scaler/scale"]),
        header["meta"],
    )
    bundle.validate()
    return bundle
