"""Per-site client embeddings built from mini-batch statistics.

The conditioning vector for a site is the sum of a label embedding (an
affine map of the batch's mean one-hot label), a context embedding (an
affine map of the batch-wise max of l2-normalized, length-averaged hidden
states entering the site's block) and a learned per-site embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .model import INIT_STD, ModelConfig, Site, site_index
from .tensor import Tensor

EMBED_NAMES = ("embed.W_L", "embed.b_L", "embed.W_F", "embed.b_F", "embed.E_layer")


@dataclass
class ClientEmbedding:
    I: Tensor  # shape (t,)
    site: Site
    mode: str = "train"
    batch_id: int | None = None


def init_embed_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    C, d, t = cfg.n_classes, cfg.d, cfg.t
    return {
        "embed.W_L": Tensor(rng.normal(0.0, INIT_STD, (C, t)), name="embed.W_L"),
        "embed.b_L": Tensor(np.zeros(t), name="embed.b_L"),
        "embed.W_F": Tensor(rng.normal(0.0, INIT_STD, (d, t)), name="embed.W_F"),
        "embed.b_F": Tensor(np.zeros(t), name="embed.b_F"),
        "embed.E_layer": Tensor(rng.normal(0.0, INIT_STD, (cfg.n_sites, t)), name="embed.E_layer"),
    }


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def inference_label_distribution(n_classes: int) -> np.ndarray:
    """Uniform label distribution substituted for batch labels at evaluation time."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    return np.full(n_classes, 1.0 / n_classes)


def label_embedding(labels, p: Mapping[str, Tensor]) -> Tensor:
    """Affine map of the mean label vector.

    ``labels`` is either a B x C matrix of one-hot (or distribution) rows,
    or a single length-C distribution.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    W = p["embed.W_L"]
    if y.ndim != 2 or y.shape[1] != W.shape[0]:
        raise DimensionError(f"label rows of shape {y.shape} do not match W_L {W.shape}")
    if np.any(y < 0) or not np.allclose(y.sum(axis=1), 1.0, atol=1e-9):
        raise ContractError("label rows must be non-negative and sum to one")
    mean = Tensor._wrap(y.mean(axis=0, keepdims=True))
    return T.reshape(T.matmul(mean, W), (W.shape[1],)) + p["embed.b_L"]


def example_features(hidden: Tensor) -> Tensor:
    """Length-averaged, l2-normalized hidden state per example (B x d)."""
    if hidden.ndim != 3 or hidden.shape[0] < 1:
        raise DimensionError(f"hidden states must be B x L x d with B >= 1, got {hidden.shape}")
    return T.normalize(T.pool(hidden, axis=1, mode="mean"), "l2_vector")


def context_embedding(hidden: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    W = p["embed.W_F"]
    pooled = T.pool(example_features(hidden), axis=0, mode="max")
    return T.reshape(T.matmul(T.reshape(pooled, (1, W.shape[0])), W), (W.shape[1],)) + p["embed.b_F"]


def compose_client_embedding(
    le: Tensor,
    ce: Tensor,
    site: Site,
    p: Mapping[str, Tensor],
    mode: str = "train",
    batch_id: int | None = None,
) -> ClientEmbedding:
    E = p["embed.E_layer"]
    if le.shape != ce.shape or le.shape != (E.shape[1],):
        raise DimensionError(f"embedding shapes {le.shape}, {ce.shape} vs t={E.shape[1]}")
    try:
        idx = site_index(site)
    except (ValueError, TypeError):
        raise ConfigurationError(f"unknown site {site!r}") from None
    if not 0 <= idx < E.shape[0]:
        raise ConfigurationError(f"unknown site {site!r}")
    layer_vec = T.reshape(T.gather_rows(E, [idx]), (E.shape[1],))
    return ClientEmbedding(le + ce + layer_vec, site, mode, batch_id)


def zeros_like_embedding(cfg: ModelConfig) -> Tensor:
    return Tensor._wrap(np.zeros(cfg.t))
