"""Command-line orchestration: single runs, sweeps and summary tables.

    fedc2a run    [-c CONFIG] [--set section.key=value ...] [-o OUTDIR]
    fedc2a sweep  [-c CONFIG] --methods c2a,adapter --betas 5.0,0.1 --seeds 4
                  [--budget 40 --epochs 1,2,4] [-j WORKERS]

Outputs go to ``-o`` or ``$FEDC2A_OUTPUT_DIR`` (default ``./runs``).  The
frozen backbone is cached under ``<outdir>/cache`` keyed by a content hash
of the pretraining corpus, the backbone dims and the pretraining settings.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as config_mod
from .config import ExperimentConfig, echo, parse_config, to_dict
from .data import Corpus, load_jsonl, split, synthesize_corpus
from .errors import FedC2AError
from .federation import (
    ExperimentResult,
    FedConfig,
    dirichlet_partition,
    group_partition,
    init_federation,
    run_experiment,
    write_round_csv,
)
from .metrics import format_rounds, format_speedup, mean_sd, param_percent, rounds_to_target, speedup, trainable_count
from .model import pretrain_backbone
from .seeding import stream
from .tensor import Tensor

log = logging.getLogger("fedc2a")

OUTPUT_ENV = "FEDC2A_OUTPUT_DIR"
SUMMARY_BASELINE = "adapter"


def output_dir(path=None) -> Path:
    return Path(path or os.environ.get(OUTPUT_ENV) or "runs")


# -- data and backbone --------------------------------------------------------


def load_corpus(c: ExperimentConfig) -> Corpus:
    if not c.dataset:
        return synthesize_corpus(c.corpus_spec())
    full = load_jsonl(c.dataset, c.vocab_size, c.n_classes, c.n_groups, c.seq_len)
    train, test = split(full, c.test_fraction, c.corpus_seed)
    # an external dataset pretrains on its own unlabeled training text
    return Corpus(train, test, train.tokens)


def backbone_key(c: ExperimentConfig, corpus: Corpus) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(corpus.pretrain, dtype=np.int64).tobytes())
    dims = c.backbone_config()
    h.update(
        json.dumps(
            [dims.vocab_size, dims.max_seq_len, dims.d, dims.n_layers, dims.n_heads, dims.d_ff, c.pretrain_steps, c.corpus_seed]
        ).encode()
    )
    return h.hexdigest()[:16]


def load_backbone(c: ExperimentConfig, corpus: Corpus, cache_dir: Path | None) -> dict[str, Tensor]:
    """Pretrain the backbone, or reuse the on-disk copy with the same key."""
    path = None
    if cache_dir is not None:
        path = cache_dir / f"backbone-{backbone_key(c, corpus)}.npz"
        if path.exists():
            with np.load(path) as z:
                return {k: Tensor(z[k], name=k) for k in z.files}
    bb = pretrain_backbone(corpus.pretrain, c.backbone_config(), steps=c.pretrain_steps, seed=c.corpus_seed)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.stem + f".{os.getpid()}.tmp.npz")
        np.savez(tmp, **{k: t.data for k, t in bb.items()})
        os.replace(tmp, path)
    return bb


# -- single run ---------------------------------------------------------------


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    run_dir: Path
    rounds_csv: Path
    summary: dict
    trace: list[float] = field(default_factory=list)

    @property
    def summary_path(self) -> Path:
        return self.run_dir / "report.json"


def run_name(c: ExperimentConfig) -> str:
    return f"{c.method}_{c.partition}_beta{c.beta:g}_E{c.local_epochs}_R{c.rounds}_seed{c.seed}"


def fed_config(c: ExperimentConfig) -> FedConfig:
    return FedConfig(
        n_clients=c.n_clients,
        fraction=c.fraction,
        local_epochs=c.local_epochs,
        batch_size=c.effective_batch_size,
        lr=c.effective_lr,
        weight_decay=c.weight_decay,
        rounds=c.rounds,
        seed=c.seed,
        eval_batch_size=c.effective_batch_size,
        workers=c.workers,
    )


def partition(c: ExperimentConfig, corpus: Corpus):
    rng = stream(c.seed, "partition")
    train = corpus.train
    if c.partition == "group":
        return group_partition(train.labels, train.groups, c.n_clients, train.n_groups, c.beta, rng)
    return dirichlet_partition(train.labels, c.n_clients, c.beta, rng)


def summarize(c: ExperimentConfig, result: ExperimentResult) -> dict:
    trace = result.accuracy_trace
    cfg = c.model_config()
    drifts = [log.mean_drift for log in result.logs]
    return {
        "method": c.method,
        "beta": c.beta,
        "seed": c.seed,
        "local_epochs": c.local_epochs,
        "rounds": c.rounds,
        "initial_acc": result.initial_acc,
        "final_acc": trace[-1] if trace else result.initial_acc,
        "best_acc": max(trace) if trace else result.initial_acc,
        "rounds_to_target": {
            repr(t): (rounds_to_target(trace, t) if trace else None) for t in c.targets
        },
        "mean_drift_cka": float(np.nanmean(drifts)) if drifts and not np.all(np.isnan(drifts)) else None,
        "bytes_total": result.bytes_total,
        "trainable_params": trainable_count(cfg),
        "param_percent": param_percent(cfg),
        "aborted_clients": sum(len(log.aborted) for log in result.logs),
        "accuracy_trace": trace,
    }


def run(c: ExperimentConfig, outdir=None, corpus: Corpus | None = None) -> ExperimentReport:
    """Pretrain (or load) the backbone, partition, federate, write outputs."""
    root = output_dir(outdir)
    run_dir = root / run_name(c)
    run_dir.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(c) if corpus is None else corpus
    backbone = load_backbone(c, corpus, root / "cache")
    parts = partition(c, corpus)
    state = init_federation(c.model_config(), fed_config(c), backbone, corpus.train, corpus.test, parts)
    log.info("running %s", run_name(c))
    result = run_experiment(state)

    rounds_csv = run_dir / "rounds.csv"
    write_round_csv(result, rounds_csv)
    (run_dir / "config.ini").write_text(echo(c), encoding="utf-8")
    summary = summarize(c, result)
    report = ExperimentReport(c, run_dir, rounds_csv, summary, result.accuracy_trace)
    payload = {"config": to_dict(c), "rounds_csv": rounds_csv.name, "summary": summary}
    report.summary_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report


# -- sweeps -------------------------------------------------------------------


def epochs_rounds_grid(budget: int, epochs: Sequence[int]) -> list[tuple[int, int]]:
    """(E, R) cells with E * R == budget."""
    cells = []
    for e in epochs:
        if e < 1 or budget % e:
            raise ValueError(f"{e} local epochs do not divide the update budget {budget}")
        cells.append((e, budget // e))
    return cells


def sweep_configs(
    base: ExperimentConfig,
    methods: Sequence[str],
    betas: Sequence[float],
    seeds: Sequence[int],
    cells: Sequence[tuple[int, int]] | None = None,
) -> list[ExperimentConfig]:
    cells = cells or [(base.local_epochs, base.rounds)]
    return [
        base.replace(method=m, beta=b, seed=s, local_epochs=e, rounds=r, lr=base.lr if m == base.method else 0.0)
        for (e, r) in cells
        for b in betas
        for m in methods
        for s in seeds
    ]


def _run_task(args):
    c, outdir = args
    return run(c, outdir)


def sweep(configs: Sequence[ExperimentConfig], outdir=None, workers: int = 1) -> list[ExperimentReport]:
    """Run independent cells, optionally in parallel; report order follows ``configs``."""
    if not configs:
        return []
    # pretrain once up front so workers only read the cache
    first = configs[0]
    load_backbone(first, load_corpus(first), output_dir(outdir) / "cache")
    tasks = [(c, outdir) for c in configs]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_run_task, tasks))
    return [_run_task(t) for t in tasks]


# -- summary table ---------------------------------------------------------------


def _group_key(r: ExperimentReport):
    c = r.config
    return (c.beta, c.local_epochs, c.rounds, c.method)


def emit_results(reports: Sequence[ExperimentReport], path) -> list[dict]:
    """Aggregate reports over seeds into one CSV row per (method, beta, E, R).

    Rounds-to-target is read off the seed-averaged accuracy curve; speedups
    are relative to the ``adapter`` row of the same (beta, E, R) cell.
    """
    if not reports:
        raise ValueError("emit_results needs at least one report")
    groups: dict[tuple, list[ExperimentReport]] = {}
    for r in reports:
        groups.setdefault(_group_key(r), []).append(r)
    targets = sorted({t for r in reports for t in r.config.targets})

    def mean_trace(rs):
        return list(np.mean([r.trace for r in rs], axis=0)) if rs[0].trace else []

    reached = {}
    for key, rs in groups.items():
        trace = mean_trace(rs)
        reached[key] = {t: (rounds_to_target(trace, t) if trace else None) for t in targets}

    rows = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], k[2], config_mod.METHODS.index(k[3]))):
        beta, E, R, method = key
        rs = groups[key]
        m, sd = mean_sd([r.summary["final_acc"] for r in rs])
        row = {
            "method": method,
            "beta": f"{beta:g}",
            "local_epochs": E,
            "rounds": R,
            "n_seeds": len(rs),
            "final_acc": f"{m:.4f} ± {sd:.4f}",
            "final_acc_mean": f"{m:.6f}",
            "final_acc_sd": f"{sd:.6f}",
            "param_percent": f"{rs[0].summary['param_percent']:.4f}",
        }
        base = reached.get((beta, E, R, SUMMARY_BASELINE))
        for t in targets:
            row[f"rounds_to_{t:g}"] = format_rounds(reached[key][t], R)
            if base is None:
                row[f"speedup_{t:g}"] = ""
            else:
                row[f"speedup_{t:g}"] = format_speedup(*speedup(base[t], reached[key][t], R))
        rows.append(row)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


# -- entry point ---------------------------------------------------------------


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedc2a", description="Federated PEFT experiments with client-conditioned adapters.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("-c", "--config", help="INI config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("-o", "--output", help=f"output directory (default ${OUTPUT_ENV} or ./runs)")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("run", help="run one experiment"))
    sp = sub.add_parser("sweep", help="method x beta x seed (x epochs/rounds) grid")
    common(sp)
    sp.add_argument("--methods", default="c2a,adapter")
    sp.add_argument("--betas", default="5.0,1.0,0.1")
    sp.add_argument("--seeds", type=int, default=4, help="number of seeds, starting at the config seed")
    sp.add_argument("--budget", type=int, help="local epochs x rounds held constant across cells")
    sp.add_argument("--epochs", default="1,2,4", help="local-epoch values for the --budget grid")
    sp.add_argument("-j", "--jobs", type=int, default=1, help="sweep cells run in parallel")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = list(args.overrides)
    if args.config is None and not any(o.split("=", 1)[0].endswith("method") for o in overrides):
        overrides.insert(0, "experiment.method=c2a")
    try:
        base = parse_config(args.config, overrides)
        out = output_dir(args.output)
        if args.command == "run":
            report = run(base, out)
            print(report.summary_path)
            return 0
        cells = epochs_rounds_grid(args.budget, _ints(args.epochs)) if args.budget else None
        seeds = range(base.seed, base.seed + args.seeds)
        configs = sweep_configs(base, args.methods.split(","), _floats(args.betas), seeds, cells)
        for c in configs:
            config_mod.validate(c)
        reports = sweep(configs, out, args.jobs)
        summary = out / "summary.csv"
        emit_results(reports, summary)
        print(summary)
        return 0
    except (FedC2AError, OSError, ValueError) as exc:
        print(f"fedc2a: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
