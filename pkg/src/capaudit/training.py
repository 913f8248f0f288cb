"""Training loops for the target model and the prompt generator.

The prompt generator is trained against a frozen target to minimise
``distance(v, target(prompter(v)))``. The optimized loop additionally drops
the worst-reproduced values once progress stalls, using a GPD-derived cutoff,
but never shrinks the active set to a third of the data or below.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datagen import SequenceSample, stack
from .extreme_stats import MIN_FIT_SIZE, GpdFitError, PatienceState, patience_step, select_threshold
from .models import DivergenceError, Mode, ModelConfig, Seq2SeqModel, build_model, per_sample_distance

logger = logging.getLogger(__name__)


@dataclass
class PruningEvent:
    epoch: int
    tau: float
    n_removed: int
    active_after: int


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    active_sizes: list[int] = field(default_factory=list)
    pruning_events: list[PruningEvent] = field(default_factory=list)
    skipped_pruning: list[int] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = math.inf
    epochs_run: int = 0

    @property
    def total_seconds(self) -> float:
        return float(sum(self.epoch_seconds))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_seconds"] = self.total_seconds
        return d

    def write(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path


def _tensor(x: np.ndarray, like: Seq2SeqModel) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(x), dtype=next(like.parameters()).dtype)


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def _epoch_order(indices: np.ndarray, seed: int, epoch: int) -> np.ndarray:
    gen = torch.Generator().manual_seed(int(seed) * 1_000_003 + epoch)
    return indices[torch.randperm(len(indices), generator=gen).numpy()]


def _check_finite(loss: torch.Tensor, what: str, epoch: int) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(f"{what}: non-finite loss at epoch {epoch}")


@torch.no_grad()
def evaluate_target(phi: Seq2SeqModel, keys: torch.Tensor, values: torch.Tensor, batch_size: int = 256) -> float:
    was_training = phi.training
    phi.eval()
    total = 0.0
    for idx in _batches(np.arange(len(keys)), batch_size):
        total += float(per_sample_distance(values[idx], phi(keys[idx])).sum())
    phi.train(was_training)
    return total / len(keys)


def train_target(
    config: ModelConfig,
    d_tr: Sequence[SequenceSample],
    d_v: Sequence[SequenceSample],
    max_epochs: int = 1000,
    es_patience: int = 30,
    lr: float = 1e-4,
    seed: int = 0,
    batch_size: int = 32,
    dtype: torch.dtype = torch.float32,
) -> tuple[Seq2SeqModel, TrainReport]:
    """Fit the target model on ``d_tr`` with early stopping on ``d_v``.

    Returns the parameters from the epoch with the lowest validation loss,
    already frozen for inference.
    """
    if not d_tr or not d_v:
        raise ValueError("training and validation splits must be non-empty")
    model = build_model(config, seed, dtype)
    model.set_mode(Mode.TRAIN)
    tr_k, tr_v = (_tensor(a, model) for a in stack(d_tr))
    va_k, va_v = (_tensor(a, model) for a in stack(d_v))
    if tr_k.shape[1:] != (config.in_len, config.in_features) or tr_v.shape[1:] != (config.out_len, config.out_features):
        raise ValueError("data shapes do not match the model config")

    opt = torch.optim.Adam(model.parameters(), lr=lr)
    report = TrainReport()
    best_state = copy.deepcopy(model.state_dict())
    since_best = 0
    all_idx = np.arange(len(d_tr))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for epoch in range(max_epochs):
            t0 = time.perf_counter()
            running = 0.0
            for idx in _batches(_epoch_order(all_idx, seed, epoch), batch_size):
                loss = per_sample_distance(tr_v[idx], model(tr_k[idx])).mean()
                _check_finite(loss, "target", epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                running += loss.item() * len(idx)
            val = evaluate_target(model, va_k, va_v)
            if not math.isfinite(val):
                raise DivergenceError(f"target: non-finite validation loss at epoch {epoch}")
            report.epoch_seconds.append(time.perf_counter() - t0)
            report.epoch_loss.append(running / len(d_tr))
            report.val_loss.append(val)
            report.active_sizes.append(len(d_tr))
            report.epochs_run = epoch + 1
            if val < report.best_metric:
                report.best_metric, report.best_epoch = val, epoch
                best_state = copy.deepcopy(model.state_dict())
                since_best = 0
            else:
                since_best += 1
                if since_best >= es_patience:
                    logger.info("target: early stop at epoch %d (best %d)", epoch, report.best_epoch)
                    break
    model.load_state_dict(best_state)
    return model.freeze(), report


def _assert_frozen(phi: Seq2SeqModel) -> None:
    assert phi.mode is Mode.INFERENCE and not phi.training, "target model must be in INFERENCE mode"
    assert not any(p.requires_grad for p in phi.parameters()), "target model parameters must be frozen"


def prune_active_set(
    active: set[int], indexes: Sequence[int], errors: Sequence[float], n_total: int, tau: float
) -> list[int]:
    """Drop indices with error >= ``tau``, worst first, keeping ``3 * |active| > n_total``.

    A removal happens only if the floor still holds afterwards. Mutates
    ``active`` and returns the removed indices.
    """
    order = sorted(range(len(errors)), key=lambda i: (-errors[i], indexes[i]))
    removed = []
    for i in order:
        if 3 * (len(active) - 1) <= n_total:
            break
        if errors[i] >= tau and indexes[i] in active:
            active.discard(indexes[i])
            removed.append(indexes[i])
    return removed


def _train_prompter(
    config: ModelConfig,
    phi: Seq2SeqModel,
    d2: Sequence[SequenceSample],
    max_epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    patience: PatienceState | None,
    quantile: float,
    min_fit_size: int,
) -> tuple[Seq2SeqModel, TrainReport]:
    _assert_frozen(phi)
    if not d2:
        raise ValueError("d2 must be non-empty")
    theta = build_model(config, seed, next(phi.parameters()).dtype)
    theta.set_mode(Mode.TRAIN)
    values = _tensor(np.stack([s.value for s in d2]), theta)
    if values.shape[1:] != (config.in_len, config.in_features):
        raise ValueError("value shape does not match prompter config")

    n = len(d2)
    active = set(range(n))
    opt = torch.optim.Adam(theta.parameters(), lr=lr)
    report = TrainReport()
    best_state = copy.deepcopy(theta.state_dict())
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for epoch in range(max_epochs):
            t0 = time.perf_counter()
            current = np.array(sorted(active), dtype=np.int64)
            errors: list[torch.Tensor] = []
            indexes: list[np.ndarray] = []
            for idx in _batches(_epoch_order(current, seed, epoch), batch_size):
                v = values[idx]
                eps = per_sample_distance(v, phi(theta(v)))
                loss = eps.mean()
                _check_finite(loss, "prompter", epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                errors.append(eps.detach())
                indexes.append(idx)
            err = torch.cat(errors).double().numpy()
            idx_all = np.concatenate(indexes)
            mean_err = float(err.mean())
            report.epoch_loss.append(mean_err)
            report.active_sizes.append(len(current))
            report.epochs_run = epoch + 1
            if mean_err < report.best_metric:
                report.best_metric, report.best_epoch = mean_err, epoch
                best_state = copy.deepcopy(theta.state_dict())

            # Patience is only consulted while a removal could still respect the floor.
            if patience is not None and 3 * (len(active) - 1) > n and patience_step(patience, mean_err):
                try:
                    tau = select_threshold(err, quantile, min_size=min_fit_size)
                except GpdFitError as exc:
                    logger.info("prompter: epoch %d pruning skipped (%s)", epoch, exc)
                    report.skipped_pruning.append(epoch)
                else:
                    removed = prune_active_set(active, idx_all.tolist(), err.tolist(), n, tau)
                    report.pruning_events.append(PruningEvent(epoch, float(tau), len(removed), len(active)))
                    logger.info("prompter: epoch %d pruned %d (tau=%.4g), %d active", epoch, len(removed), tau, len(active))
            report.epoch_seconds.append(time.perf_counter() - t0)
    theta.load_state_dict(best_state)
    return theta.freeze(), report


def train_prompter_baseline(
    config: ModelConfig,
    phi: Seq2SeqModel,
    d2: Sequence[SequenceSample],
    max_epochs: int = 500,
    batch_size: int = 32,
    lr: float = 1e-4,
    seed: int = 0,
) -> tuple[Seq2SeqModel, TrainReport]:
    """Plain mini-batch descent on the composite reproduction loss over all of ``d2``."""
    return _train_prompter(config, phi, d2, max_epochs, batch_size, lr, seed, None, 0.8, MIN_FIT_SIZE)


def train_prompter_optimized(
    config: ModelConfig,
    phi: Seq2SeqModel,
    d2: Sequence[SequenceSample],
    alpha: float,
    omega: float,
    max_epochs: int = 500,
    batch_size: int = 32,
    lr: float = 1e-4,
    seed: int = 0,
    quantile: float = 0.8,
    min_fit_size: int = MIN_FIT_SIZE,
) -> tuple[Seq2SeqModel, TrainReport]:
    """Like :func:`train_prompter_baseline`, pruning poorly reproduced values on stalls.

    Pruning uses the per-sample errors collected during the epoch (before each
    batch's update). A failed GPD fit skips that epoch's pruning.
    """
    state = PatienceState(alpha=alpha, omega=omega)
    return _train_prompter(config, phi, d2, max_epochs, batch_size, lr, seed, state, quantile, min_fit_size)
