"""Client-conditioned hypernetwork that emits adapter weights per mini-batch.

The factorized generator keeps ``F_U`` (d x s) and ``S_U`` (s x r*t); their
product is Frobenius-normalized and laid out row-major as a d x r x t
tensor which is contracted with the client embedding over its last axis to
give the up-projection ``U`` (d x r).  With tied projections ``D = U^T``.
The unfactorized variant holds full generators ``W_U`` (d*r x t) and
``W_D`` (r*d x t).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .embedding import (
    ClientEmbedding,
    compose_client_embedding,
    context_embedding,
    inference_label_distribution,
    label_embedding,
    one_hot,
    zeros_like_embedding,
)
from .errors import ConfigurationError, ContractError, DimensionError
from .model import INIT_STD, AdapterParams, ModelConfig, Site, SITE_POSITIONS, site_ids
from .tensor import Tensor


@dataclass
class HyperParams:
    d: int
    r: int
    t: int
    F_U: Tensor | None = None
    S_U: Tensor | None = None
    W_U: Tensor | None = None
    W_D: Tensor | None = None
    tied: bool = True
    normalized: bool = True

    @property
    def factorized(self) -> bool:
        return self.F_U is not None

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], cfg: ModelConfig) -> "HyperParams":
        h = cls(
            cfg.d,
            cfg.r,
            cfg.t,
            F_U=params.get("hyper.F_U"),
            S_U=params.get("hyper.S_U"),
            W_U=params.get("hyper.W_U"),
            W_D=params.get("hyper.W_D"),
            tied=cfg.tied,
            normalized=cfg.normalized,
        )
        if h.factorized == (h.W_U is not None):
            raise ConfigurationError("exactly one of the factorized / unfactorized generators must be present")
        if not h.tied and h.W_D is None:
            raise ConfigurationError("untied generation needs a W_D generator")
        return h


def init_hyper_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, r, t, s = cfg.d, cfg.r, cfg.t, cfg.s
    if cfg.factorized:
        if not cfg.tied:
            raise ConfigurationError("the factorized generator only produces tied projections")
        shapes = {"hyper.F_U": (d, s), "hyper.S_U": (s, r * t)}
    else:
        shapes = {"hyper.W_U": (d * r, t)}
        if not cfg.tied:
            shapes["hyper.W_D"] = (r * d, t)
    return {k: Tensor(rng.normal(0.0, INIT_STD, shape), name=k) for k, shape in shapes.items()}


def compose_weight(h: HyperParams) -> Tensor:
    """``F_U @ S_U`` scaled to unit Frobenius norm (d x r*t)."""
    if not h.factorized:
        raise ConfigurationError("compose_weight needs the factorized generator")
    W = T.matmul(h.F_U, h.S_U)
    return T.normalize(W, "frobenius_matrix") if h.normalized else W


def generate_adapter(I: ClientEmbedding | Tensor, h: HyperParams, weight: Tensor | None = None) -> AdapterParams:
    """Map one client embedding to adapter weights.

    ``weight`` lets callers reuse one composed generator across sites.
    """
    site = I.site if isinstance(I, ClientEmbedding) else (0, "attn")
    vec = I.I if isinstance(I, ClientEmbedding) else I
    if vec.shape != (h.t,):
        raise ConfigurationError(f"client embedding has shape {vec.shape}, expected ({h.t},)")
    col = T.reshape(vec, (h.t, 1))
    if h.factorized:
        W = compose_weight(h) if weight is None else weight
        U = T.reshape(T.matmul(T.reshape(W, (h.d * h.r, h.t)), col), (h.d, h.r))
    else:
        U = T.reshape(T.matmul(h.W_U, col), (h.d, h.r))
    if h.tied:
        D = T.transpose(U)
    else:
        D = T.reshape(T.matmul(h.W_D, col), (h.r, h.d))
    return AdapterParams(D, U, site)


@dataclass
class GeneratedAdapterSet:
    adapters: dict[Site, AdapterParams] = field(default_factory=dict)
    embeddings: dict[Site, ClientEmbedding] = field(default_factory=dict)
    batch_id: int | None = None


class ClientAdapterGenerator:
    """Adapter source for :func:`fedc2a.model.encode` in c2a mode.

    Called once per block with the hidden states entering it; builds the
    client embedding of both sites of that block and generates their
    adapters.  In ``inference`` mode the label term uses the uniform
    distribution and ``labels`` is ignored.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        cfg: ModelConfig,
        labels=None,
        mode: str = "train",
        batch_id: int | None = None,
    ):
        if mode not in ("train", "inference"):
            raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
        self.params = params
        self.cfg = cfg
        self.mode = mode
        self.hyper = HyperParams.from_params(params, cfg)
        self.generated = GeneratedAdapterSet(batch_id=batch_id)
        self._weight = compose_weight(self.hyper) if self.hyper.factorized else None
        if not cfg.use_label:
            self._le = zeros_like_embedding(cfg)
        elif mode == "inference":
            self._le = label_embedding(inference_label_distribution(cfg.n_classes), params)
        else:
            if labels is None:
                raise ContractError("train-mode generation needs the batch labels")
            self._le = label_embedding(one_hot(labels, cfg.n_classes), params)

    def __call__(self, layer: int, hidden: Tensor) -> dict[Site, AdapterParams]:
        if hidden is None:
            raise ContractError(f"hidden states for layer {layer} are missing")
        cfg = self.cfg
        ce = context_embedding(hidden, self.params) if cfg.use_context else zeros_like_embedding(cfg)
        out = {}
        for pos in SITE_POSITIONS:
            site = (layer, pos)
            emb = compose_client_embedding(
                self._le, ce, site, self.params, self.mode, self.generated.batch_id
            )
            out[site] = generate_adapter(emb, self.hyper, self._weight)
            self.generated.embeddings[site] = emb
            self.generated.adapters[site] = out[site]
        return out


def generate_all_sites(
    hiddens: list[Tensor],
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    labels=None,
    mode: str = "train",
) -> GeneratedAdapterSet:
    """Generate adapters for every site given the hidden states entering each block.

    One shared generator serves all sites; sites differ only through their
    context (per block) and layer-index embeddings.
    """
    if len(hiddens) != cfg.n_layers or any(h is None for h in hiddens):
        raise ContractError(f"need hidden states for all {cfg.n_layers} blocks, got {len(hiddens)}")
    gen = ClientAdapterGenerator(params, cfg, labels, mode)
    for layer, hidden in enumerate(hiddens):
        gen(layer, hidden)
    if set(gen.generated.adapters) != set(site_ids(cfg)):
        raise DimensionError("generated set does not cover all sites")
    return gen.generated
