"""Desk-scale transfer studies: forgetting and method ordering, Fisher sample size, cost.

Every study is a grid of independent cells keyed by a string such as
``"kfac/lam=1000.0/seed=3"``. A :class:`CellStore` may be passed to reuse
results of cells finished earlier, which is how interrupted studies resume.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import fisher as fisher_mod
from .data import TaskPair
from .errors import BayesPeftError, ConfigError, ContractError
from .lora import attach_lora
from .model import Network, attach_head, char_lm_spec, classifier_spec
from .penalty import VARIANT_FOR, PenaltyConfig, layer_quadratic
from .trainer import (Evaluation, SweepRow, TrainConfig, _run_sweep_cell, _SweepCell, evaluate, fit, run_cells,
                      select_lambda, summarize)

SCHEMA_VERSION = 1
SEEDS = (0, 1, 2, 3, 4)
METHODS = ("none", "l2sp", "ewc", "kfac")

_R10 = math.sqrt(10.0)


def _grid(lo: float, n: int) -> tuple:
    return tuple(float(f"{lo * _R10 ** k:.6g}") for k in range(n))


@dataclass(frozen=True)
class PairSetup:
    """Per-pair defaults: pre-training, fine-tuning, adapter placement, lambda grids."""
    kind: str
    pretrain: TrainConfig
    finetune: TrainConfig
    adapted: tuple
    grids: dict
    b_tolerance: float  # allowed task-B slack versus the unregularized run
    b_relative: bool


SETUPS = {
    "clusters": PairSetup(
        "clusters", TrainConfig(lr=1e-3, epochs=3), TrainConfig(), ("fc1", "fc2"),
        {"l2sp": _grid(1e-3, 9), "ewc": _grid(1.0, 9), "kfac": _grid(1.0, 9)}, 0.02, False),
    "charlm": PairSetup(
        "charlm", TrainConfig(lr=2e-3, epochs=8), TrainConfig(lr=2e-3, epochs=10), ("fc1", "fc2", "out"),
        {"l2sp": _grid(1e-4, 7), "ewc": _grid(1e-2, 9), "kfac": _grid(1e-2, 9)}, 0.05, True),
}


def setup_for(kind: str) -> PairSetup:
    try:
        return SETUPS[kind]
    except KeyError:
        raise ConfigError(f"unknown task pair {kind!r}") from None


def network_spec(kind: str):
    return classifier_spec() if kind == "clusters" else char_lm_spec()


def pretrain(pair: TaskPair, cfg: Optional[TrainConfig] = None, seed: int = 0) -> tuple[Network, dict]:
    """Train every layer on task A; returns the frozen net and its task-A metrics."""
    cfg = cfg or setup_for(pair.kind).pretrain
    net = Network.init(network_spec(pair.kind), seed)
    for lay in net.layers:
        lay.trainable = True
    net, report = fit(net, pair.a_pretrain, None, PenaltyConfig(), cfg)
    for lay in net.layers:
        lay.trainable = False
    metrics = {"task_a_" + pair.a_metric: evaluate(net, pair.a_heldout, pair.a_metric),
               "task_a_accuracy": evaluate(net, pair.a_heldout, "accuracy"),
               "train_objective": report.final.objective}
    return net, metrics


@dataclass
class FineTuneFactory:
    """Builds a fresh copy of theta_0 with adapters (and a task-B head) for one seed.

    Picklable, so sweep cells can run in worker processes.
    """
    base: Network
    adapted: tuple
    rank: int = 16
    gamma: float = 2.0
    head: Optional[str] = None
    head_classes: int = 4
    head_seed: int = 0

    def __call__(self, seed: int) -> Network:
        net = self.base.copy()
        if self.head:
            attach_head(net, self.head, self.head_classes, self.head_seed)
        for i, name in enumerate(self.adapted):
            lay = net.layer(name)
            attach_lora(lay, min(self.rank, lay.d_out, lay.d_in), self.gamma, seed=seed * 100 + i)
        return net


def make_factory(pair: TaskPair, base: Network, rank: int = 16, gamma: float = 2.0) -> FineTuneFactory:
    if base is None:
        raise ContractError("no pre-trained checkpoint for this pair")
    classes = int(pair.b_train.y.max()) + 1
    # the head initialization is tied to the pair, not the training seed, so seeds
    # differ only in adapter initialization and batch order
    return FineTuneFactory(base, setup_for(pair.kind).adapted, rank, gamma, pair.b_head, classes, pair.seed)


def evaluation_for(pair: TaskPair) -> Evaluation:
    return Evaluation(pair.b_val, pair.b_metric, pair.a_heldout, pair.a_metric, b_head=pair.b_head)


# -- cell bookkeeping ---------------------------------------------------------

def cell_key(method: str, lam: float, seed: int, tag: str = "") -> str:
    key = f"{method}/lam={float(lam)!r}/seed={seed}"
    return f"{tag}/{key}" if tag else key


class CellStore:
    """Append-only JSON-lines manifest of finished cells (key -> result)."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.results: dict = {}
        if self.path and self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self.results[rec["key"]] = rec["result"]

    def __contains__(self, key):
        return key in self.results

    def get(self, key):
        return self.results[key]

    def put(self, key, result) -> None:
        self.results[key] = result
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as fh:
                fh.write(json.dumps({"key": key, "result": result}) + "\n")


def _as_result(r):
    return list(r) if isinstance(r, tuple) else r


def run_grid(factory, train, cells: Sequence[tuple], cfg: TrainConfig, evaluation: Evaluation,
             jobs: int = 1, store: Optional[CellStore] = None) -> dict:
    """Run ``(key, fisher, penalty, seed)`` cells not already in ``store``; return key -> result.

    A result is ``[task_b, task_a]`` or an error string.
    """
    store = store if store is not None else CellStore()
    todo = [c for c in cells if c[0] not in store]
    work = [_SweepCell(factory, train, fis, pen, replace(cfg, seed=int(seed)), evaluation)
            for _, fis, pen, seed in todo]
    # run in chunks so a long study persists progress as it goes
    step = max(jobs, 1) * 4
    for i in range(0, len(work), step):
        out = run_cells(_run_sweep_cell, work[i:i + step], jobs)
        for (key, *_), res in zip(todo[i:i + step], out):
            store.put(key, _as_result(res))
    return {c[0]: store.get(c[0]) for c in cells}


def pooled_sd(*groups: Sequence[float]) -> float:
    """sqrt(sum (n_i - 1) s_i^2 / sum (n_i - 1))."""
    num = sum((len(g) - 1) * np.var(g, ddof=1) for g in groups if len(g) > 1)
    den = sum(len(g) - 1 for g in groups if len(g) > 1)
    return float(math.sqrt(num / den)) if den else 0.0


def _row_dict(row: SweepRow) -> dict:
    return {"method": row.method, "lambda": row.lam, "task_b_mean": row.task_b_mean, "task_b_sd": row.task_b_sd,
            "task_a_mean": row.task_a_mean, "task_a_sd": row.task_a_sd, "task_b": row.task_b,
            "task_a": row.task_a, "errors": row.errors}


def _rows_from(results: dict, method: str, grid, seeds, tag="") -> list[SweepRow]:
    rows = []
    for lam in grid:
        m = method if lam else "none"
        res = [results[cell_key(m, lam, s, tag)] for s in seeds]
        rows.append(summarize(m, float(lam), [r if isinstance(r, str) else tuple(r) for r in res]))
    return rows


def _fishers(pair: TaskPair, net: Network, methods, n: int, seed: Optional[int]) -> dict:
    out = {}
    for m in methods:
        if m == "none":
            continue
        out[m] = fisher_mod.estimate(VARIANT_FOR[m], net, pair.a_pool.x, pair.a_pool.y, n, seed=seed)
    return out


# -- studies --------------------------------------------------------------------

@dataclass
class StudyReport:
    study: str
    pair: str
    payload: dict
    table: list = field(default_factory=list)  # flat rows for CSV
    sidecar: dict = field(default_factory=dict)  # wall-clock data, excluded from determinism

    def to_dict(self) -> dict:
        return {"schema": "bayespeft-study", "schema_version": SCHEMA_VERSION, "software": __version__,
                "study": self.study, "pair": self.pair, **self.payload}


def run_forgetting_study(pair: TaskPair, base: Optional[Network], methods: Sequence[str] = METHODS,
                         seeds: Sequence[int] = SEEDS, grids: Optional[dict] = None, fisher_samples: int = 1024,
                         fisher_seed: Optional[int] = 0, cfg: Optional[TrainConfig] = None, rank: int = 16,
                         gamma: float = 2.0, jobs: int = 1, store: Optional[CellStore] = None) -> StudyReport:
    """Fine-tune theta_0 on task B with each method at its selected lambda.

    Each method sweeps its lambda grid over all seeds; the selected lambda is
    the largest one keeping the task-B metric within the pair's tolerance of the
    unregularized run.
    """
    setup = setup_for(pair.kind)
    factory = make_factory(pair, base, rank, gamma)
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    grids = {**setup.grids, **(grids or {})}
    cfg = cfg or setup.finetune
    seeds = list(seeds)
    ev = evaluation_for(pair)
    fishers = _fishers(pair, base, methods, fisher_samples, fisher_seed)

    cells = [(cell_key("none", 0.0, s), None, PenaltyConfig(), s) for s in seeds]
    for m in methods:
        if m != "none":
            cells += [(cell_key(m, lam, s), fishers[m], PenaltyConfig(m, float(lam)), s)
                      for lam in grids[m] for s in seeds]
    results = run_grid(factory, pair.b_train, cells, cfg, ev, jobs, store)

    pre_a = evaluate(base, pair.a_heldout, pair.a_metric)
    none = _rows_from(results, "none", [0.0], seeds)[0]
    if none.errors:
        raise BayesPeftError(f"unregularized run failed: {none.errors[0]}")
    sweep = [none]
    selected = {"none": none}
    for m in methods:
        if m == "none":
            continue
        rows = _rows_from(results, m, grids[m], seeds)
        sweep += rows
        selected[m] = select_lambda(rows, none.task_b_mean, pair.b_higher_better, setup.b_tolerance, setup.b_relative)

    sd = pooled_sd([pre_a] * len(none.task_a), none.task_a)
    gap = none.task_a_mean - pre_a
    payload = {
        "pair_seed": pair.seed, "seeds": seeds, "fisher": {"samples": fisher_samples, "seed": fisher_seed},
        "grids": {m: list(grids[m]) for m in methods if m != "none"},
        "finetune": asdict(cfg), "lora": {"rank": rank, "gamma": gamma, "layers": list(setup.adapted)},
        "metrics": {"task_b": pair.b_metric, "task_a": pair.a_metric},
        "b_tolerance": {"value": setup.b_tolerance, "relative": setup.b_relative},
        "pretrained": {"task_a": pre_a},
        "forgetting": {"gap": gap, "pooled_sd": sd, "z": gap / sd if sd > 0 else math.inf},
        "sweep": [_row_dict(r) for r in sweep],
        "selected": {m: _row_dict(r) for m, r in selected.items()},
        "recovery": {m: (none.task_a_mean - r.task_a_mean) / gap if gap else float("nan")
                     for m, r in selected.items() if m != "none"},
        "task_b_change": {m: r.task_b_mean - none.task_b_mean for m, r in selected.items() if m != "none"},
        "ordering": _ordering(selected, len(seeds)),
    }
    table = [{"method": m, "lambda": r.lam, "task_b_mean": r.task_b_mean, "task_b_sd": r.task_b_sd,
              "task_a_mean": r.task_a_mean, "task_a_sd": r.task_a_sd} for m, r in selected.items()]
    return StudyReport("forgetting", pair.kind, payload, table)


def _ordering(selected: dict, n_seeds: int) -> dict:
    """Per-seed counts of 'retention(x) at least as good as retention(y)' (lower metric is better)."""
    out = {}
    for x, y in (("kfac", "ewc"), ("ewc", "l2sp"), ("kfac", "l2sp")):
        if x in selected and y in selected:
            ax, ay = selected[x].task_a, selected[y].task_a
            out[f"{x}>={y}"] = int(sum(a <= b for a, b in zip(ax, ay)))
    if all(m in selected for m in ("kfac", "ewc", "l2sp")):
        k, e, l2 = (selected[m].task_a for m in ("kfac", "ewc", "l2sp"))
        out["kfac>=ewc>=l2sp"] = int(sum(a <= b <= c for a, b, c in zip(k, e, l2)))
    out["seeds"] = n_seeds
    return out


def run_sample_size_study(pair: TaskPair, base: Optional[Network], lams: dict, sizes: Sequence[int] = (1024, 128, 16),
                          methods: Sequence[str] = ("ewc", "kfac"), seeds: Sequence[int] = SEEDS,
                          fisher_seed: int = 0, cfg: Optional[TrainConfig] = None, rank: int = 16,
                          gamma: float = 2.0, jobs: int = 1, store: Optional[CellStore] = None) -> StudyReport:
    """Fine-tune with Fisher estimates from pools of decreasing size at fixed lambda per method."""
    setup = setup_for(pair.kind)
    factory = make_factory(pair, base, rank, gamma)
    cfg = cfg or setup.finetune
    seeds = list(seeds)
    for n in sizes:
        if n > len(pair.a_pool) or n < 1:
            raise ContractError(f"Fisher sample size {n} outside 1..{len(pair.a_pool)}")
    cells = []
    for m in methods:
        if m not in ("l2sp", "ewc", "kfac"):
            raise ConfigError(f"sample-size study needs a curvature method, got {m!r}")
        for n in sizes:
            est = fisher_mod.estimate(VARIANT_FOR[m], base, pair.a_pool.x, pair.a_pool.y, n, seed=fisher_seed)
            cells += [(cell_key(m, lams[m], s, f"n={n}"), est, PenaltyConfig(m, float(lams[m])), s) for s in seeds]
    results = run_grid(factory, pair.b_train, cells, cfg, evaluation_for(pair), jobs, store)

    cells_out, summary, table = {}, {}, []
    for m in methods:
        by_size = {}
        for n in sizes:
            row = _rows_from(results, m, [lams[m]], seeds, f"n={n}")[0]
            by_size[n] = row
            cells_out[f"{m}/n={n}"] = _row_dict(row)
            table.append({"method": m, "samples": n, "lambda": row.lam, "task_b_mean": row.task_b_mean,
                          "task_b_sd": row.task_b_sd, "task_a_mean": row.task_a_mean, "task_a_sd": row.task_a_sd})
        means = [r.task_a_mean for r in by_size.values()]
        sd = pooled_sd(*[r.task_a for r in by_size.values()])
        big, small = by_size[max(sizes)], by_size[min(sizes)]
        summary[m] = {"spread": max(means) - min(means), "pooled_sd": sd,
                      "spread_in_sd": (max(means) - min(means)) / sd if sd > 0 else math.inf,
                      "largest_beats_smallest": int(sum(a < b for a, b in zip(big.task_a, small.task_a)))}
    degrades = {m: summary[m]["spread_in_sd"] for m in methods}
    payload = {"pair_seed": pair.seed, "seeds": seeds, "sizes": list(sizes), "fisher_seed": fisher_seed,
               "lambdas": {m: float(lams[m]) for m in methods}, "finetune": asdict(cfg),
               "cells": cells_out, "summary": summary,
               "kfac_degrades_more": bool(degrades.get("kfac", 0) > degrades.get("ewc", 0))}
    return StudyReport("sample_size", pair.kind, payload, table)


def _timed(fn, repeats: int) -> float:
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _slope(xs, ys) -> float:
    lx, ly = np.log(xs), np.log(np.maximum(ys, 1e-12))
    return float(np.polyfit(lx, ly, 1)[0])


def run_cost_study(dims: Sequence[int] = (16, 32, 64, 128), samples: int = 256, seed: int = 0,
                   repeats: int = 5) -> StudyReport:
    """Estimation time, penalty time and storage of each curvature on square d x d layers.

    Storage goes into the deterministic report; timings and the exponents fitted
    to them go into the sidecar.
    """
    rng = np.random.default_rng(seed)
    rows, timing = [], []
    for d in dims:
        net = Network.init(classifier_spec(classes=d, input_dim=d, hidden=(d,)), seed)
        x = rng.standard_normal((samples, d))
        y = rng.integers(d, size=samples)
        delta = rng.standard_normal((d, d))
        for method in ("l2sp", "ewc", "kfac"):
            kind = VARIANT_FOR[method]
            est = fisher_mod.estimate(kind, net, x, y, samples, names=["fc1"])
            t_est = _timed(lambda: fisher_mod.estimate(kind, net, x, y, samples, names=["fc1"]), repeats)
            curv = est["fc1"]
            t_pen = _timed(lambda: [layer_quadratic(delta, curv) for _ in range(20)], repeats) / 20
            rows.append({"method": method, "d_out": d, "d_in": d, "parameters": d * d,
                         "storage": curv.storage(), "data_pass": method != "l2sp"})
            timing.append({"method": method, "d": d, "estimate_s": t_est, "penalty_s": t_pen})
    exps = {}
    for method in ("l2sp", "ewc", "kfac"):
        t = [r for r in timing if r["method"] == method]
        ds = [r["d"] for r in t]
        exps[method] = {"penalty": _slope(ds, [r["penalty_s"] for r in t]),
                        "estimate": _slope(ds, [r["estimate_s"] for r in t]) if method != "l2sp" else 0.0}
    storage_ratio = {m: [b["storage"] / a["storage"] for a, b in zip(*(
        [r for r in rows if r["method"] == m][:-1], [r for r in rows if r["method"] == m][1:]))]
        for m in ("ewc", "kfac")}
    payload = {"dims": list(dims), "samples": samples, "seed": seed, "layers": rows,
               "storage_ratio_per_doubling": storage_ratio,
               "reference_orders": {"l2sp": {"estimate": "0", "penalty": "d_o d_i", "storage": "0"},
                                    "ewc": {"estimate": "d_o d_i", "penalty": "d_o d_i", "storage": "d_o d_i"},
                                    "kfac": {"estimate": "d_o^2 + d_i^2", "penalty": "d_o d_i (d_o + d_i)",
                                             "storage": "d_o^2 + d_i^2"}}}
    return StudyReport("cost", "synthetic", payload, rows, {"timings": timing, "exponents": exps})
