"""Non-IID partitioning, client-side training and FedAvg rounds.

Only trainable parameters travel between server and clients; the frozen
backbone is shared read-only.  Every random draw comes from a named
substream (see :mod:`fedc2a.seeding`) so that a round's outcome does not
depend on worker count or completion order.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import classifier
from .classifier import Snapshot, build_params, predict, snapshot
from .data import Dataset
from .errors import AggregationError, PartitionError, PoisonedGradientError, RoundError, UndefinedSimilarityError
from .metrics import BYTES_PER_SCALAR, PROBE_SIZE, accuracy, linear_cka
from .model import ModelConfig, Params
from .seeding import stream
from .tensor import AdamW, Tape, Tensor

CSV_COLUMNS = ("round", "client_id", "loss", "test_acc", "cka_drift", "bytes_up", "bytes_down")


# -- partitioning ------------------------------------------------------------


@dataclass
class ClientPartition:
    client_id: int
    indices: np.ndarray
    group: int | None = None


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else stream(seed, "partition")


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` closest to ``proportions * total``."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(labels, n_clients: int, beta: float, seed) -> list[ClientPartition]:
    """Per-class Dirichlet(beta) allocation of examples to clients.

    For every class a proportion vector over clients is drawn and the class's
    (shuffled) examples are dealt out by largest-remainder rounding.  Clients
    left empty take one example from the currently largest client.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if n_clients < 2:
        raise PartitionError(f"need at least two clients, got {n_clients}")
    if not beta > 0:
        raise PartitionError(f"beta must be positive, got {beta}")
    if n_clients > labels.size:
        raise PartitionError(f"{n_clients} clients exceed the {labels.size} available examples")
    rng = _rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        p = rng.dirichlet(np.full(n_clients, float(beta)))
        if not np.all(np.isfinite(p)) or p.sum() <= 0:
            p = np.eye(n_clients)[int(np.nanargmax(p))] if np.any(np.isfinite(p)) else np.full(n_clients, 1.0 / n_clients)
        p = p / p.sum()
        counts = largest_remainder(p, idx.size)
        for k, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            if chunk.size:
                buckets[k].append(chunk)
    parts = [np.concatenate(b) if b else np.zeros(0, dtype=np.int64) for b in buckets]
    for k in range(n_clients):
        if parts[k].size == 0:
            donor = int(np.argmax([p.size for p in parts]))
            parts[k], parts[donor] = parts[donor][-1:], parts[donor][:-1]
    return [ClientPartition(k, np.sort(p)) for k, p in enumerate(parts)]


def group_partition(labels, groups, n_clients: int, n_groups: int, beta: float, seed) -> list[ClientPartition]:
    """Clients are dealt round-robin to groups; each group's data is Dirichlet-split among its clients."""
    labels = np.asarray(labels, dtype=np.int64)
    groups = np.asarray(groups, dtype=np.int64)
    members = [list(range(g, n_clients, n_groups)) for g in range(n_groups)]
    if any(not m for m in members):
        raise PartitionError(f"{n_clients} clients cannot cover {n_groups} groups")
    rng = _rng(seed)
    out: dict[int, ClientPartition] = {}
    for g, ids in enumerate(members):
        idx = np.flatnonzero(groups == g)
        if idx.size < len(ids):
            raise PartitionError(f"group {g} has {idx.size} examples for {len(ids)} clients")
        if len(ids) == 1:
            out[ids[0]] = ClientPartition(ids[0], idx, g)
            continue
        for local in dirichlet_partition(labels[idx], len(ids), beta, rng):
            cid = ids[local.client_id]
            out[cid] = ClientPartition(cid, idx[local.indices], g)
    return [out[k] for k in range(n_clients)]


# -- clients -----------------------------------------------------------------


@dataclass
class FedConfig:
    n_clients: int = 20
    fraction: float = 0.25
    local_epochs: int = 1
    batch_size: int = 16
    lr: float = 5e-4
    weight_decay: float = 0.01
    rounds: int = 40
    seed: int = 0
    eval_batch_size: int = 64
    probe_size: int = PROBE_SIZE
    workers: int = 1


@dataclass
class ClientUpdate:
    client_id: int
    params: Snapshot
    n_examples: int
    losses: list[float]
    aborted: bool = False
    error: str = ""


def client_rng(seed: int, client_id: int, round_idx: int) -> np.random.Generator:
    return stream(seed, "client", client_id, round_idx)


class Client:
    """Holds one client's private data; only parameter snapshots leave it."""

    def __init__(self, client_id: int, data: Dataset, group: int | None = None):
        self.client_id = client_id
        self.group = group
        self._data = data

    def __len__(self) -> int:
        return len(self._data)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self._data.labels, minlength=self._data.n_classes)

    def local_train(
        self,
        global_params: Snapshot,
        template: Mapping[str, Tensor],
        cfg: ModelConfig,
        fed: FedConfig,
        round_idx: int,
    ) -> ClientUpdate:
        """Copy the global trainable set, run the local epochs, return the result."""
        return local_train(self._data, self.client_id, global_params, template, cfg, fed, round_idx)


def local_train(
    data: Dataset,
    client_id: int,
    global_params: Snapshot,
    template: Mapping[str, Tensor],
    cfg: ModelConfig,
    fed: FedConfig,
    round_idx: int,
) -> ClientUpdate:
    if len(data) == 0:
        raise PartitionError(f"client {client_id} has no data")
    params: Params = dict(template)
    trainable = {}
    for name, arr in global_params.items():
        trainable[name] = params[name] = Tensor(arr, requires_grad=True, name=name)
    opt = AdamW(trainable, lr=fed.lr, weight_decay=fed.weight_decay)
    rng = client_rng(fed.seed, client_id, round_idx)
    losses: list[float] = []
    n = len(data)
    try:
        for _ in range(fed.local_epochs):
            order = rng.permutation(n)
            for start in range(0, n, fed.batch_size):
                idx = order[start : start + fed.batch_size]
                opt.zero_grad()
                with Tape() as tape:
                    loss = classifier.loss(params, cfg, data.tokens[idx], data.labels[idx])
                tape.backward(loss)
                opt.step()
                losses.append(loss.item())
    except PoisonedGradientError as exc:
        return ClientUpdate(client_id, {}, n, losses, aborted=True, error=str(exc))
    return ClientUpdate(client_id, {k: t.data for k, t in trainable.items()}, n, losses)


# -- server --------------------------------------------------------------------


def fedavg_weights(sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0 or np.any(sizes <= 0):
        raise AggregationError("aggregation needs at least one update with positive size")
    return sizes / sizes.sum()


def fedavg_aggregate(updates: Sequence[tuple[Mapping[str, np.ndarray], int]]) -> Snapshot:
    """Dataset-size weighted mean of parameter snapshots.

    Computed as ``p_0 + sum_i a_i (p_i - p_0)``, which equals ``sum_i a_i p_i``
    and returns identical inputs bit-for-bit.
    """
    if not updates:
        raise AggregationError("no updates to aggregate")
    alphas = fedavg_weights([n for _, n in updates])
    base = updates[0][0]
    keys = set(base)
    for params, _ in updates[1:]:
        if set(params) != keys or any(params[k].shape != base[k].shape for k in keys):
            raise AggregationError("updates have mismatched parameter schemas")
    out = {}
    for k in sorted(keys):
        acc = np.array(base[k], dtype=np.float64, copy=True)
        for (params, _), a in zip(updates[1:], alphas[1:]):
            acc += a * (params[k] - base[k])
        out[k] = acc
    return out


@dataclass
class RoundLog:
    round: int
    sampled: list[int]
    client_losses: dict[int, float] = field(default_factory=dict)
    client_sizes: dict[int, int] = field(default_factory=dict)
    test_acc: float = float("nan")
    cka_drift: dict[int, float] = field(default_factory=dict)
    aborted: list[int] = field(default_factory=list)
    bytes_up: int = 0
    bytes_down: int = 0

    @property
    def mean_loss(self) -> float:
        ids = [c for c in self.client_losses if c not in self.aborted]
        if not ids:
            return float("nan")
        w = fedavg_weights([self.client_sizes[c] for c in ids])
        return float(sum(a * self.client_losses[c] for a, c in zip(w, ids)))

    @property
    def mean_drift(self) -> float:
        vals = [v for v in self.cka_drift.values() if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")


@dataclass
class FederationState:
    cfg: ModelConfig
    fed: FedConfig
    clients: list[Client]
    template: Params
    global_params: Snapshot
    test: Dataset
    probe_tokens: np.ndarray
    round: int = 0
    logs: list[RoundLog] = field(default_factory=list)

    @property
    def n_trainable(self) -> int:
        return sum(a.size for a in self.global_params.values())


def init_federation(
    cfg: ModelConfig,
    fed: FedConfig,
    backbone: Mapping[str, Tensor],
    train: Dataset,
    test: Dataset,
    partitions: Sequence[ClientPartition],
) -> FederationState:
    if not 0 < fed.fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fed.fraction}")
    template = build_params(cfg, backbone, fed.seed)
    clients = [Client(p.client_id, train.subset(p.indices), p.group) for p in partitions]
    if any(len(c) == 0 for c in clients):
        raise PartitionError("every client needs at least one example")
    rng = stream(fed.seed, "probe")
    probe = test.tokens[np.sort(rng.permutation(len(test))[: min(fed.probe_size, len(test))])]
    return FederationState(cfg, fed, clients, template, snapshot(template), test, probe)


def sample_clients(state: FederationState, round_idx: int) -> list[int]:
    K = len(state.clients)
    m = math.ceil(state.fed.fraction * K - 1e-9)
    rng = stream(state.fed.seed, "sample", round_idx)
    return sorted(int(i) for i in rng.choice(K, size=m, replace=False))


def _with(state: FederationState, params: Snapshot) -> Params:
    working = dict(state.template)
    for k, arr in params.items():
        working[k] = Tensor._wrap(arr)
    return working


def evaluate(state: FederationState, params: Snapshot | None = None) -> float:
    working = _with(state, state.global_params if params is None else params)
    logits = predict(working, state.cfg, state.test.tokens, state.fed.eval_batch_size)
    return accuracy(logits, state.test.labels)


def probe_logits(state: FederationState, params: Snapshot) -> np.ndarray:
    return predict(_with(state, params), state.cfg, state.probe_tokens, state.fed.eval_batch_size)


def _train_task(args):
    client, global_params, template, cfg, fed, round_idx = args
    return client.local_train(global_params, template, cfg, fed, round_idx)


def run_round(state: FederationState, executor=None) -> RoundLog:
    """Sample, broadcast, train locally, aggregate in client-id order, evaluate."""
    r = state.round + 1
    ids = sample_clients(state, r)
    theta = state.global_params
    tasks = [(state.clients[i], theta, state.template, state.cfg, state.fed, r) for i in ids]
    updates = list(executor.map(_train_task, tasks)) if executor else [_train_task(t) for t in tasks]
    updates.sort(key=lambda u: u.client_id)

    log = RoundLog(r, ids)
    done = [u for u in updates if not u.aborted]
    log.aborted = [u.client_id for u in updates if u.aborted]
    if not done:
        raise RoundError(f"round {r}: every sampled client aborted")
    global_logits = probe_logits(state, theta)
    for u in updates:
        log.client_sizes[u.client_id] = u.n_examples
        log.client_losses[u.client_id] = float(np.mean(u.losses)) if u.losses else float("nan")
        if u.aborted:
            continue
        try:
            log.cka_drift[u.client_id] = linear_cka(probe_logits(state, u.params), global_logits)
        except UndefinedSimilarityError:
            log.cka_drift[u.client_id] = float("nan")

    state.global_params = fedavg_aggregate([(u.params, u.n_examples) for u in done])
    state.round = r
    per_client = state.n_trainable * BYTES_PER_SCALAR
    log.bytes_down = len(ids) * per_client
    log.bytes_up = len(done) * per_client
    log.test_acc = evaluate(state)
    state.logs.append(log)
    return log


@dataclass
class ExperimentResult:
    initial_acc: float
    logs: list[RoundLog]
    final_params: Snapshot

    @property
    def accuracy_trace(self) -> list[float]:
        return [log.test_acc for log in self.logs]

    @property
    def bytes_total(self) -> int:
        return sum(log.bytes_up + log.bytes_down for log in self.logs)


def run_experiment(state: FederationState, rounds: int | None = None, stop_at: float | None = None) -> ExperimentResult:
    """Round 0 evaluation, then ``rounds`` rounds (or until ``stop_at`` accuracy)."""
    rounds = state.fed.rounds if rounds is None else rounds
    initial = evaluate(state)
    executor = ProcessPoolExecutor(state.fed.workers) if state.fed.workers > 1 else None
    try:
        for _ in range(rounds):
            log = run_round(state, executor)
            if stop_at is not None and log.test_acc >= stop_at:
                break
    finally:
        if executor is not None:
            executor.shutdown()
    return ExperimentResult(initial, list(state.logs), dict(state.global_params))


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def round_rows(result: ExperimentResult) -> list[tuple]:
    rows = [(0, "AGG", "", result.initial_acc, "", 0, 0)]
    for log in result.logs:
        per_up = log.bytes_up // max(len(log.sampled) - len(log.aborted), 1)
        per_down = log.bytes_down // max(len(log.sampled), 1)
        for cid in log.sampled:
            aborted = cid in log.aborted
            rows.append(
                (
                    log.round,
                    cid,
                    log.client_losses.get(cid, float("nan")),
                    "",
                    float("nan") if aborted else log.cka_drift.get(cid, float("nan")),
                    0 if aborted else per_up,
                    per_down,
                )
            )
        rows.append((log.round, "AGG", log.mean_loss, log.test_acc, log.mean_drift, log.bytes_up, log.bytes_down))
    return rows


def write_round_csv(result: ExperimentResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in round_rows(result):
            w.writerow([_fmt(x) for x in row])
