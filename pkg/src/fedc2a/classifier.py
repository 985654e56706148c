"""Assemble a trainable classifier for any PEFT mode on top of a frozen backbone."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor as T
from .embedding import init_embed_params
from .hypernet import ClientAdapterGenerator, init_hyper_params
from .model import (
    ModelConfig,
    Params,
    adapters_from_params,
    apply_lora,
    forward,
    init_adapters,
    init_head,
    mark_trainable,
    trainable_set,
)
from .seeding import stream
from .tensor import Tensor

Snapshot = dict[str, np.ndarray]


def build_params(cfg: ModelConfig, backbone: Mapping[str, Tensor], seed: int) -> Params:
    """Fresh parameter dict: copied backbone, new head and mode-specific modules."""
    rng = stream(seed, "init", cfg.peft_mode)
    params: Params = {k: Tensor(v.data, name=k) for k, v in backbone.items()}
    params.update(init_head(cfg, rng))
    if cfg.peft_mode == "adapter":
        params.update(init_adapters(cfg, rng))
    elif cfg.peft_mode == "lora":
        apply_lora(cfg, params, rng)
    elif cfg.peft_mode == "c2a":
        params.update(init_embed_params(cfg, rng))
        params.update(init_hyper_params(cfg, rng))
    mark_trainable(params, trainable_set(cfg, params))
    return params


def adapter_source(params: Mapping[str, Tensor], cfg: ModelConfig, labels=None, mode: str = "train"):
    if cfg.peft_mode == "c2a":
        return ClientAdapterGenerator(params, cfg, labels, mode)
    if cfg.peft_mode == "adapter":
        return adapters_from_params(params, cfg)
    return None


def logits(params, cfg: ModelConfig, tokens, labels=None, mode: str = "train") -> Tensor:
    return forward(tokens, params, cfg, adapter_source(params, cfg, labels, mode))[0]


def loss(params, cfg: ModelConfig, tokens, labels) -> Tensor:
    return T.softmax_cross_entropy(logits(params, cfg, tokens, labels, "train"), labels)


def predict(params, cfg: ModelConfig, tokens, batch_size: int = 64) -> np.ndarray:
    """Inference-mode logits for ``tokens``, evaluated in consecutive batches."""
    tokens = np.asarray(tokens)
    out = [
        logits(params, cfg, tokens[i : i + batch_size], mode="inference").data
        for i in range(0, len(tokens), batch_size)
    ]
    return np.concatenate(out) if out else np.zeros((0, cfg.n_classes))


def trainable_names(params: Mapping[str, Tensor]) -> list[str]:
    return sorted(n for n, t in params.items() if t.requires_grad)


def snapshot(params: Mapping[str, Tensor], names=None) -> Snapshot:
    names = trainable_names(params) if names is None else names
    return {n: params[n].data.copy() for n in names}


def load_snapshot(params: Params, snap: Mapping[str, np.ndarray]) -> None:
    for n, arr in snap.items():
        if params[n].shape != arr.shape:
            raise ValueError(f"snapshot shape {arr.shape} != parameter shape {params[n].shape} for {n!r}")
        params[n].data = np.array(arr, dtype=np.float64)
