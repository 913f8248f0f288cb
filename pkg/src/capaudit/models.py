"""Encoder-decoder transformer shared by the target model and the prompt generator.

Decoding is a single non-autoregressive pass: the decoder attends from a set
of learned positional queries to the encoded input, so a prompt generator
stacked in front of a frozen target stays differentiable end to end.
"""

from __future__ import annotations

import enum
import math
import os
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import torch
from torch import nn

CHECKPOINT_FORMAT = "capaudit.checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class DivergenceError(RuntimeError):
    """Raised when a forward pass or loss becomes non-finite."""


class Mode(enum.Enum):
    TRAIN = "train"
    INFERENCE = "inference"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    in_features: int
    out_features: int
    in_len: int
    out_len: int
    dropout: float = 0.1

    def __post_init__(self) -> None:
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "in_features", "out_features", "in_len", "out_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @classmethod
    def paper(cls, in_features: int, out_features: int, in_len: int, out_len: int, dropout: float = 0.1) -> "ModelConfig":
        """The original transformer defaults: 6 layers, 8 heads, width 512."""
        return cls(6, 8, 512, 2048, in_features, out_features, in_len, out_len, dropout)

    @classmethod
    def desk(cls, in_features: int, out_features: int, in_len: int, out_len: int, dropout: float = 0.1) -> "ModelConfig":
        return cls(2, 2, 64, 128, in_features, out_features, in_len, out_len, dropout)

    @classmethod
    def preset(cls, name: str, **shape: Any) -> "ModelConfig":
        if name not in ("paper", "desk"):
            raise ValueError(f"unknown model preset {name!r}")
        return getattr(cls, name)(**shape)

    def swapped(self) -> "ModelConfig":
        """Same architecture with input and output shapes exchanged."""
        return ModelConfig(
            self.n_layers, self.n_heads, self.d_model, self.d_ff,
            self.out_features, self.in_features, self.out_len, self.in_len, self.dropout,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def sinusoidal_encoding(length: int, d_model: int) -> torch.Tensor:
    position = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
    pe = torch.zeros(length, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div)[:, : d_model // 2]
    return pe


class Seq2SeqModel(nn.Module):
    """Maps ``[batch, in_len, in_features]`` to ``[batch, out_len, out_features]``."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.input_proj = nn.Linear(c.in_features, c.d_model)
        self.queries = nn.Parameter(torch.randn(c.out_len, c.d_model) * 0.02)
        with warnings.catch_warnings():
            # Nested-tensor fast path is irrelevant here (no padding masks).
            warnings.filterwarnings("ignore", message="enable_nested_tensor is True")
            self.transformer = nn.Transformer(
                d_model=c.d_model,
                nhead=c.n_heads,
                num_encoder_layers=c.n_layers,
                num_decoder_layers=c.n_layers,
                dim_feedforward=c.d_ff,
                dropout=c.dropout,
                batch_first=True,
            )
        self.output_proj = nn.Linear(c.d_model, c.out_features)
        self.register_buffer("pe_in", sinusoidal_encoding(c.in_len, c.d_model).float(), persistent=False)
        self.register_buffer("pe_out", sinusoidal_encoding(c.out_len, c.d_model).float(), persistent=False)
        self.mode = Mode.TRAIN

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c = self.config
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1:] != (c.in_len, c.in_features):
            raise ValueError(f"expected input [*, {c.in_len}, {c.in_features}], got {list(x.shape)}")
        scale = math.sqrt(c.d_model)
        src = self.input_proj(x) * scale + self.pe_in
        tgt = (self.queries + self.pe_out).unsqueeze(0).expand(x.shape[0], -1, -1)
        out = self.output_proj(self.transformer(src, tgt))
        return out.squeeze(0) if squeeze else out

    def set_mode(self, mode: Mode) -> "Seq2SeqModel":
        """TRAIN enables dropout and gradients; INFERENCE freezes every parameter."""
        self.mode = mode
        training = mode is Mode.TRAIN
        self.train(training)
        for p in self.parameters():
            p.requires_grad_(training)
        return self

    def freeze(self) -> "Seq2SeqModel":
        return self.set_mode(Mode.INFERENCE)


def build_model(config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> Seq2SeqModel:
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = Seq2SeqModel(config)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)


def forward(model: Seq2SeqModel, x: torch.Tensor) -> torch.Tensor:
    """Run ``model`` and fail loudly on non-finite output."""
    out = model(x)
    if not torch.isfinite(out).all():
        raise DivergenceError("model produced non-finite output")
    return out


def distance(v: torch.Tensor, v_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all timesteps and features."""
    if v.shape != v_hat.shape:
        raise ValueError(f"shape mismatch: {list(v.shape)} vs {list(v_hat.shape)}")
    return torch.mean((v - v_hat) ** 2)


def per_sample_distance(v: torch.Tensor, v_hat: torch.Tensor) -> torch.Tensor:
    """Batched :func:`distance`: one MSE per leading index."""
    if v.shape != v_hat.shape:
        raise ValueError(f"shape mismatch: {list(v.shape)} vs {list(v_hat.shape)}")
    return ((v - v_hat) ** 2).flatten(1).mean(dim=1)


def parameter_digest(model: nn.Module) -> str:
    """SHA-256 over the raw bytes of every parameter and buffer in state-dict order."""
    import hashlib

    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: Seq2SeqModel, path: str | os.PathLike, **meta: Any) -> Path:
    """Persist config, parameters and training metadata (seed, epoch, best metric...)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "dtype": str(next(model.parameters()).dtype),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "meta": meta,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def read_checkpoint_meta(path: str | os.PathLike) -> dict[str, Any]:
    return _read(path)["meta"]


def _read(path: str | os.PathLike) -> dict[str, Any]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a capaudit checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def load_checkpoint(
    path: str | os.PathLike, expected: ModelConfig | None = None, mode: Mode = Mode.INFERENCE
) -> Seq2SeqModel:
    """Rebuild a model from ``path``; ``expected`` guards against shape/config drift."""
    payload = _read(path)
    config = ModelConfig(**payload["config"])
    if expected is not None and expected != config:
        diff = {k: (v, getattr(config, k)) for k, v in expected.to_dict().items() if getattr(config, k) != v}
        raise CheckpointError(f"{path}: config mismatch (expected, found): {diff}")
    dtype = torch.float64 if payload["dtype"] == "torch.float64" else torch.float32
    model = Seq2SeqModel(config).to(dtype)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match config") from exc
    return model.set_mode(mode)
