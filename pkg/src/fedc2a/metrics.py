"""Accuracy, logit-space drift (linear CKA), rounds-to-target and traffic accounting."""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from .classifier import load_snapshot, predict, snapshot
from .errors import DimensionError, UndefinedSimilarityError
from .model import ModelConfig

BYTES_PER_SCALAR = 8
PROBE_SIZE = 256


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def linear_cka(X, Y) -> float:
    """Linear centered kernel alignment between two n-row representations.

    ``||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)`` with column-centered
    ``Xc``, ``Yc``.  Raises if either input has no variance.
    """
    X, Y = _as_array(X), _as_array(Y)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise DimensionError(f"CKA needs n x p and n x q inputs, got {X.shape} and {Y.shape}")
    if X.shape[0] < 2:
        raise DimensionError("CKA needs at least two rows")
    Xc = X - X.mean(axis=0, keepdims=True)
    Yc = Y - Y.mean(axis=0, keepdims=True)
    for raw, centered in ((X, Xc), (Y, Yc)):
        if np.linalg.norm(centered) <= 1e-12 * np.linalg.norm(raw) + 1e-300:
            raise UndefinedSimilarityError("CKA is undefined for zero-variance representations")
    nx = np.linalg.norm(Xc.T @ Xc)
    ny = np.linalg.norm(Yc.T @ Yc)
    cross = np.linalg.norm(Yc.T @ Xc)
    return float(min(1.0, max(0.0, (cross * cross) / (nx * ny))))


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    z = _as_array(logits)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] != y.shape[0]:
        raise DimensionError(f"logits {z.shape} do not match {y.shape[0]} labels")
    if y.size == 0:
        return float("nan")
    return float(np.mean(np.argmax(z, axis=1) == y))


def drift_probe(params, cfg: ModelConfig, local: Mapping, global_: Mapping, probe_tokens, global_logits=None) -> float:
    """CKA between inference-mode logits of a local and the global model on the probe set."""
    saved = snapshot(params, list(local))
    try:
        if global_logits is None:
            load_snapshot(params, global_)
            global_logits = predict(params, cfg, probe_tokens)
        load_snapshot(params, local)
        local_logits = predict(params, cfg, probe_tokens)
    finally:
        load_snapshot(params, saved)
    return linear_cka(local_logits, global_logits)


def rounds_to_target(trace: Sequence[float], target: float) -> int | None:
    """1-indexed first round whose accuracy reaches ``target``; None if never."""
    if len(trace) == 0:
        raise ValueError("accuracy trace is empty")
    for i, acc in enumerate(trace, start=1):
        if acc >= target:
            return i
    return None


def speedup(baseline_rounds: int | None, method_rounds: int | None, max_rounds: int) -> tuple[float, bool]:
    """Relative speedup vs a baseline; unreached targets count as ``max_rounds``.

    The flag is True when the value is only a bound because the method never
    reached the target.
    """
    b = max_rounds if baseline_rounds is None else baseline_rounds
    m = max_rounds if method_rounds is None else method_rounds
    return b / m, method_rounds is None


def format_rounds(rounds: int | None, max_rounds: int) -> str:
    return f"{max_rounds}↑" if rounds is None else str(rounds)


def format_speedup(value: float, bounded: bool) -> str:
    return f"{value:.2f}" + ("↓" if bounded else "")


# -- parameter and traffic accounting --------------------------------------


def backbone_count(cfg: ModelConfig) -> int:
    d, f = cfg.d, cfg.d_ff
    per_block = 4 * (d * d + d) + 2 * 2 * d + (d * f + f) + (f * d + d)
    return cfg.vocab_size * d + cfg.max_seq_len * d + cfg.n_layers * per_block


def head_count(cfg: ModelConfig) -> int:
    return cfg.d * cfg.n_classes + cfg.n_classes


def generator_count(cfg: ModelConfig) -> int:
    d, r, t, s = cfg.d, cfg.r, cfg.t, cfg.s
    if cfg.factorized:
        return d * s + s * r * t
    return d * r * t * (1 if cfg.tied else 2)


def embedding_count(cfg: ModelConfig) -> int:
    C, d, t = cfg.n_classes, cfg.d, cfg.t
    return C * t + t + d * t + t + cfg.n_sites * t


def trainable_count(cfg: ModelConfig) -> int:
    """Closed-form number of trainable scalars for ``cfg.peft_mode``."""
    mode = cfg.peft_mode
    if mode == "full":
        return backbone_count(cfg) + head_count(cfg)
    if mode == "adapter":
        return cfg.n_sites * 2 * cfg.d * cfg.r + head_count(cfg)
    if mode == "lora":
        return cfg.n_layers * 2 * 2 * cfg.d * cfg.r + head_count(cfg)
    if mode == "bitfit":
        d, f = cfg.d, cfg.d_ff
        return cfg.n_layers * (4 * d + 2 * d + f + d) + head_count(cfg)
    return generator_count(cfg) + embedding_count(cfg) + head_count(cfg)


def total_count(cfg: ModelConfig) -> int:
    extra = {
        "full": 0,
        "bitfit": 0,
        "adapter": cfg.n_sites * 2 * cfg.d * cfg.r,
        "lora": cfg.n_layers * 2 * 2 * cfg.d * cfg.r,
        "c2a": generator_count(cfg) + embedding_count(cfg),
    }[cfg.peft_mode]
    return backbone_count(cfg) + head_count(cfg) + extra


def comm_cost(cfg: ModelConfig) -> int:
    """Bytes one participating client moves per round (download + upload)."""
    return trainable_count(cfg) * BYTES_PER_SCALAR * 2


def param_percent(cfg: ModelConfig) -> float:
    return 100.0 * trainable_count(cfg) / total_count(cfg)


def mean_sd(values: Sequence[float]) -> tuple[float, float]:
    vals = [v for v in values if not math.isnan(v)]
    if not vals:
        return float("nan"), float("nan")
    arr = np.asarray(vals)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0
