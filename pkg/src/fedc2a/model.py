"""Micro transformer encoder classifier with Houlsby-style adapter sites.

Each block has two adapter sites: one on the attention output and one on
the feed-forward output, both applied before the residual add and the
post-layer-norm.  Parameters live in a flat ``dict[str, Tensor]`` keyed by
dotted names; that dict is also the checkpoint schema.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Union

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DataError, DimensionError
from .seeding import stream
from .tensor import Tape, Tensor

PEFT_MODES = ("c2a", "adapter", "lora", "bitfit", "full")
SITE_POSITIONS = ("attn", "ffn")
MASK_TOKEN = 0
INIT_STD = 0.02

Params = dict[str, Tensor]
Site = tuple[int, str]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    max_seq_len: int = 16
    d: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    r: int = 4
    n_classes: int = 8
    peft_mode: str = "c2a"
    # client-conditioned generator (c2a only)
    t: int = 8
    s: int = 8
    factorized: bool = True
    tied: bool = True
    normalized: bool = True
    use_label: bool = True
    use_context: bool = True

    def __post_init__(self):
        if self.peft_mode not in PEFT_MODES:
            raise ConfigurationError(f"unknown peft_mode {self.peft_mode!r}; expected one of {PEFT_MODES}")
        if self.d % self.n_heads:
            raise ConfigurationError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if not 0 < self.r < self.d:
            raise ConfigurationError(f"bottleneck r={self.r} must satisfy 0 < r < d={self.d}")
        if self.n_classes < 2:
            raise ConfigurationError("n_classes must be at least 2")
        if self.t < 1 or self.s < 1:
            raise ConfigurationError("t and s must be positive")

    @property
    def n_sites(self) -> int:
        return 2 * self.n_layers

    def with_mode(self, mode: str) -> "ModelConfig":
        return replace(self, peft_mode=mode)


def site_ids(cfg: ModelConfig) -> list[Site]:
    return [(layer, pos) for layer in range(cfg.n_layers) for pos in SITE_POSITIONS]


def site_index(site: Site) -> int:
    layer, pos = site
    return 2 * layer + SITE_POSITIONS.index(pos)


@dataclass
class AdapterParams:
    D: Tensor  # r x d down-projection
    U: Tensor  # d x r up-projection
    site: Site = (0, "attn")


def apply_adapter(x: Tensor, a: AdapterParams) -> Tensor:
    """Residual bottleneck ``U gelu(D x) + x`` applied to every vector on the last axis."""
    d = x.shape[-1]
    r = a.D.shape[0]
    if a.D.shape != (r, d) or a.U.shape != (d, r):
        raise DimensionError(f"adapter shapes D{a.D.shape}, U{a.U.shape} do not fit hidden size {d}")
    return T.matmul(T.gelu(T.matmul(x, T.swap_last(a.D))), T.swap_last(a.U)) + x


# -- parameter construction ----------------------------------------------


def _normal(rng, shape, std=INIT_STD, name=None) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), name=name)


def init_backbone(cfg: ModelConfig, seed: int) -> Params:
    rng = stream(seed, "backbone-init")
    d, f = cfg.d, cfg.d_ff
    p: Params = {
        "tok_emb": _normal(rng, (cfg.vocab_size, d)),
        "pos_emb": _normal(rng, (cfg.max_seq_len, d)),
    }
    for l in range(cfg.n_layers):
        pre = f"blocks.{l}"
        for proj in ("q", "k", "v", "o"):
            p[f"{pre}.attn.{proj}.weight"] = _normal(rng, (d, d))
            p[f"{pre}.attn.{proj}.bias"] = Tensor(np.zeros(d))
        p[f"{pre}.ln1.gain"] = Tensor(np.ones(d))
        p[f"{pre}.ln1.bias"] = Tensor(np.zeros(d))
        p[f"{pre}.ffn.fc1.weight"] = _normal(rng, (d, f))
        p[f"{pre}.ffn.fc1.bias"] = Tensor(np.zeros(f))
        p[f"{pre}.ffn.fc2.weight"] = _normal(rng, (f, d))
        p[f"{pre}.ffn.fc2.bias"] = Tensor(np.zeros(d))
        p[f"{pre}.ln2.gain"] = Tensor(np.ones(d))
        p[f"{pre}.ln2.bias"] = Tensor(np.zeros(d))
    for name, t in p.items():
        t.name = name
    return p


def init_head(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    return {
        "head.weight": _normal(rng, (cfg.d, cfg.n_classes), name="head.weight"),
        "head.bias": Tensor(np.zeros(cfg.n_classes), name="head.bias"),
    }


def init_adapters(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    """Vanilla adapters: small random down-projection, zero up-projection (identity start)."""
    p: Params = {}
    for layer, pos in site_ids(cfg):
        p[f"adapter.{layer}.{pos}.D"] = _normal(rng, (cfg.r, cfg.d))
        p[f"adapter.{layer}.{pos}.U"] = Tensor(np.zeros((cfg.d, cfg.r)))
    return p


def adapters_from_params(params: Mapping[str, Tensor], cfg: ModelConfig) -> dict[Site, AdapterParams]:
    out = {}
    for layer, pos in site_ids(cfg):
        key = f"adapter.{layer}.{pos}"
        if f"{key}.D" not in params:
            raise ConfigurationError(f"missing adapter parameters for site {(layer, pos)}")
        out[(layer, pos)] = AdapterParams(params[f"{key}.D"], params[f"{key}.U"], (layer, pos))
    return out


def _require_mode(cfg: ModelConfig, mode: str) -> None:
    if cfg.peft_mode != mode:
        raise ConfigurationError(f"config peft_mode is {cfg.peft_mode!r}, not {mode!r}")


def apply_lora(cfg: ModelConfig, params: Params, rng: np.random.Generator) -> set[str]:
    """Add rank-r factors to every query and value projection; B starts at zero."""
    _require_mode(cfg, "lora")
    names = set(_head_names(params))
    for l in range(cfg.n_layers):
        for proj in ("q", "v"):
            a, b = f"lora.{l}.{proj}.A", f"lora.{l}.{proj}.B"
            params[a] = _normal(rng, (cfg.r, cfg.d), std=1.0 / math.sqrt(cfg.d), name=a)
            params[b] = Tensor(np.zeros((cfg.d, cfg.r)), name=b)
            names.update((a, b))
    return names


def bitfit_trainable_set(cfg: ModelConfig, params: Mapping[str, Tensor]) -> set[str]:
    _require_mode(cfg, "bitfit")
    return {n for n in params if n.endswith(".bias")} | set(_head_names(params))


def full_trainable_set(cfg: ModelConfig, params: Mapping[str, Tensor]) -> set[str]:
    _require_mode(cfg, "full")
    return set(params)


def _head_names(params) -> list[str]:
    names = [n for n in ("head.weight", "head.bias") if n in params]
    if len(names) != 2:
        raise ConfigurationError("classifier head missing from parameters")
    return names


def trainable_set(cfg: ModelConfig, params: Mapping[str, Tensor]) -> set[str]:
    """Names of the parameters trained and federated under ``cfg.peft_mode``."""
    mode = cfg.peft_mode
    if mode == "full":
        return full_trainable_set(cfg, params)
    if mode == "bitfit":
        return bitfit_trainable_set(cfg, params)
    prefix = {"adapter": "adapter.", "lora": "lora.", "c2a": ("hyper.", "embed.")}[mode]
    return {n for n in params if n.startswith(prefix)} | set(_head_names(params))


def mark_trainable(params: Params, names: set[str]) -> None:
    unknown = names - set(params)
    if unknown:
        raise ConfigurationError(f"unknown parameters {sorted(unknown)}")
    for n, t in params.items():
        t.requires_grad = n in names


def count_trainable_params(cfg: ModelConfig, params: Mapping[str, Tensor]) -> tuple[int, float]:
    """(number of trainable scalars, percentage of all scalars)."""
    total = sum(t.data.size for t in params.values())
    count = sum(t.data.size for t in params.values() if t.requires_grad)
    return count, 100.0 * count / total


# -- forward ---------------------------------------------------------------

AdapterSource = Union[None, Mapping[Site, AdapterParams], Callable[[int, Tensor], Mapping[Site, AdapterParams]]]


def _attention(x: Tensor, params: Mapping[str, Tensor], layer: int, cfg: ModelConfig) -> Tensor:
    B, L, d = x.shape
    H = cfg.n_heads
    dh = d // H
    pre = f"blocks.{layer}.attn"

    def proj(name):
        out = T.matmul(x, params[f"{pre}.{name}.weight"]) + params[f"{pre}.{name}.bias"]
        lora_a = params.get(f"lora.{layer}.{name}.A")
        if lora_a is not None:
            lora_b = params[f"lora.{layer}.{name}.B"]
            out = out + T.matmul(T.matmul(x, T.swap_last(lora_a)), T.swap_last(lora_b))
        return out

    def heads(t):
        return T.transpose(T.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

    q, k, v = heads(proj("q")), heads(proj("k")), heads(proj("v"))
    attn = T.softmax(T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(dh)))
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (B, L, d))
    return T.matmul(ctx, params[f"{pre}.o.weight"]) + params[f"{pre}.o.bias"]


def _ffn(x: Tensor, params: Mapping[str, Tensor], layer: int) -> Tensor:
    pre = f"blocks.{layer}.ffn"
    h = T.gelu(T.matmul(x, params[f"{pre}.fc1.weight"]) + params[f"{pre}.fc1.bias"])
    return T.matmul(h, params[f"{pre}.fc2.weight"]) + params[f"{pre}.fc2.bias"]


def _check_tokens(tokens: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be a B x L index array, got shape {tokens.shape}")
    if tokens.shape[1] > cfg.max_seq_len:
        raise DataError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise DataError(f"token index out of range [0, {cfg.vocab_size})")
    return tokens


def encode(
    tokens,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    adapters: AdapterSource = None,
) -> tuple[Tensor, list[Tensor]]:
    """Run the encoder; returns (final hidden B x L x d, hidden entering each block).

    ``adapters`` is either a site-keyed mapping or a callable
    ``(layer, hidden_entering_layer) -> mapping`` used when adapters depend
    on the hidden states (client-conditioned generation).  ``None`` runs the
    bare backbone, which is only valid in modes without adapter sites.
    """
    tokens = _check_tokens(tokens, cfg)
    needs_sites = cfg.peft_mode in ("c2a", "adapter")
    if adapters is None and needs_sites:
        raise ConfigurationError(f"peft_mode {cfg.peft_mode!r} requires adapters for all {cfg.n_sites} sites")
    L = tokens.shape[1]
    x = T.gather_rows(params["tok_emb"], tokens) + T.gather_rows(params["pos_emb"], np.arange(L))
    hiddens = []
    for layer in range(cfg.n_layers):
        hiddens.append(x)
        sites = adapters(layer, x) if callable(adapters) else adapters
        a_attn = a_ffn = None
        if sites is not None:
            a_attn = sites.get((layer, "attn"))
            a_ffn = sites.get((layer, "ffn"))
            if needs_sites and (a_attn is None or a_ffn is None):
                raise ConfigurationError(f"missing adapter for a site of layer {layer}")
        pre = f"blocks.{layer}"
        h = _attention(x, params, layer, cfg)
        if a_attn is not None:
            h = apply_adapter(h, a_attn)
        x = T.layer_norm(x + h, params[f"{pre}.ln1.gain"], params[f"{pre}.ln1.bias"])
        h = _ffn(x, params, layer)
        if a_ffn is not None:
            h = apply_adapter(h, a_ffn)
        x = T.layer_norm(x + h, params[f"{pre}.ln2.gain"], params[f"{pre}.ln2.bias"])
    return x, hiddens


def forward(
    tokens,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    adapters: AdapterSource = None,
) -> tuple[Tensor, list[Tensor]]:
    """Class logits (B x C) from mean-pooled final hidden states, plus per-block hiddens."""
    x, hiddens = encode(tokens, params, cfg, adapters)
    pooled = T.pool(x, axis=1, mode="mean")
    return T.matmul(pooled, params["head.weight"]) + params["head.bias"], hiddens


# -- backbone pretraining --------------------------------------------------


def pretrain_backbone(
    corpus: np.ndarray,
    cfg: ModelConfig,
    steps: int = 2000,
    seed: int = 0,
    batch_size: int = 32,
    lr: float = 2e-3,
    mask_rate: float = 0.15,
    return_mlm_head: bool = False,
):
    """Masked-token pretraining of the backbone on label-free sequences.

    Returns the frozen backbone parameters, or ``(backbone, mlm_head)`` when
    ``return_mlm_head`` is set (the head is only useful for diagnostics).
    """
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.ndim != 2 or corpus.shape[0] == 0:
        raise DataError("pretraining corpus is empty")
    cfg = cfg.with_mode("full")
    params = init_backbone(cfg, seed)
    rng = stream(seed, "pretrain")
    mlm = {
        "mlm.weight": _normal(rng, (cfg.d, cfg.vocab_size)),
        "mlm.bias": Tensor(np.zeros(cfg.vocab_size)),
    }
    trainable = {**params, **mlm}
    for t in trainable.values():
        t.requires_grad = True
    opt = T.AdamW(trainable, lr=lr, weight_decay=0.01)
    n = corpus.shape[0]
    for _ in range(steps):
        batch = corpus[rng.integers(0, n, size=min(batch_size, n))]
        masked, positions, targets = mask_tokens(batch, rng, mask_rate)
        opt.zero_grad()
        with Tape() as tape:
            loss = mlm_loss(masked, positions, targets, trainable, cfg)
        tape.backward(loss)
        opt.step()
    for t in trainable.values():
        t.requires_grad = False
        t.grad = None
    return (params, mlm) if return_mlm_head else params


def mask_tokens(batch: np.ndarray, rng: np.random.Generator, rate: float):
    """Replace ~``rate`` of positions (at least one per row) by the mask token."""
    B, L = batch.shape
    mask = rng.random((B, L)) < rate
    mask[np.arange(B), rng.integers(0, L, size=B)] = True
    flat = np.flatnonzero(mask.reshape(-1))
    masked = batch.copy()
    masked[mask] = MASK_TOKEN
    return masked, flat, batch.reshape(-1)[flat]


def mlm_logits(masked, positions, params, cfg) -> Tensor:
    x, _ = encode(masked, params, cfg)
    B, L, d = x.shape
    picked = T.gather_rows(T.reshape(x, (B * L, d)), positions)
    return T.matmul(picked, params["mlm.weight"]) + params["mlm.bias"]


def mlm_loss(masked, positions, targets, params, cfg) -> Tensor:
    return T.softmax_cross_entropy(mlm_logits(masked, positions, params, cfg), targets)
