"""Adam fine-tuning with a Laplace penalty, lambda sweeps, and retention metrics."""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BayesPeftError, ConfigError, ContractError, TrainingError
from .fisher import FisherEstimate
from .model import Network, mean_cross_entropy
from .penalty import PenaltyConfig, penalty_value, total_loss_node, validate

METRICS = ("accuracy", "loss", "perplexity")


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    schedule: str = "linear"  # "constant" or "linear" (decay to zero)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.schedule not in ("constant", "linear"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if self.weight_decay != 0:
            raise ConfigError("weight decay is fixed at 0")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")


class Adam:
    def __init__(self, params: dict, cfg: TrainConfig, total_steps: int):
        self.cfg = cfg
        self.total = total_steps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def lr(self) -> float:
        if self.cfg.schedule == "linear":
            return self.cfg.lr * (1.0 - self.t / self.total)
        return self.cfg.lr

    def step(self, params: dict, grads: dict) -> dict:
        c = self.cfg
        lr = self.lr()
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            m = self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            v = self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * (g * g)
            out[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
        return out


def evaluate(net: Network, split: Split, metric: str, head: Optional[str] = None) -> float:
    if len(split) == 0:
        raise ContractError("cannot evaluate on an empty set")
    logits = net.predict(split.x, head=head)
    if metric == "accuracy":
        return float(np.mean(logits.argmax(axis=1) == split.y))
    loss = mean_cross_entropy(logits, np.asarray(split.y, dtype=np.int64))
    if metric == "loss":
        return loss
    if metric == "perplexity":
        return math.exp(loss)
    raise ContractError(f"unknown metric {metric!r}")


def evaluate_retention(net: Network, heldout: Split, metric: str = "loss", head: Optional[str] = None) -> float:
    """Task-A metric on held-out data through the pre-trained output layer."""
    return evaluate(net, heldout, metric, head)


@dataclass
class Evaluation:
    """What to measure after each epoch."""
    b_val: Split
    b_metric: str
    a_heldout: Split
    a_metric: str
    b_head: Optional[str] = None
    a_head: Optional[str] = None


@dataclass
class EpochRecord:
    epoch: int
    task_b: float
    task_a: float
    penalty: float
    objective: float  # mean total loss over the epoch's steps
    delta_norms: dict


@dataclass
class RunReport:
    method: str
    lam: float
    seed: int
    epochs: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)  # seconds per epoch; not deterministic

    @property
    def final(self) -> EpochRecord:
        return self.epochs[-1]

    def rows(self) -> list[dict]:
        out = []
        for rec in self.epochs:
            row = {"method": self.method, "lambda": self.lam, "seed": self.seed, "epoch": rec.epoch,
                   "task_b": rec.task_b, "task_a": rec.task_a, "penalty": rec.penalty,
                   "objective": rec.objective}
            row.update({f"dw_{k}": v for k, v in rec.delta_norms.items()})
            out.append(row)
        return out

    def to_dict(self) -> dict:
        return {"method": self.method, "lambda": self.lam, "seed": self.seed,
                "epochs": [asdict(e) for e in self.epochs]}


def fit(net: Network, train: Split, fisher: Optional[FisherEstimate], penalty: PenaltyConfig,
        cfg: TrainConfig, evaluation: Optional[Evaluation] = None,
        head: Optional[str] = None) -> tuple[Network, RunReport]:
    """Minimize task loss + penalty over the net's trainable parameters with Adam.

    Predictions go through ``head`` (default: the evaluation's task-B head).
    Trainable parameters off that path (e.g. another head) are left untouched.
    """
    names = validate(net, fisher, penalty)
    if head is None and evaluation is not None:
        head = evaluation.b_head
    params = net.parameters()
    if not params:
        raise ContractError("network has no trainable parameters")
    n = len(train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    opt = Adam(params, cfg, steps_per_epoch * cfg.epochs)
    rng = np.random.default_rng(cfg.seed)
    report = RunReport(penalty.kind, penalty.lam if penalty.kind != "none" else 0.0, cfg.seed)
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        obj_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            total, _, _, fp = total_loss_node(net, train.x[idx], train.y[idx], fisher, penalty, head, names)
            value = float(total.value[0, 0])
            if not math.isfinite(value):
                raise TrainingError("non-finite training loss", step)
            grads = fp.tape.backward(total)
            for k, v in opt.step(params, grads).items():
                net.set_parameter(k, v)
            params = net.parameters()
            obj_sum += value
            step += 1
        report.wall_clock.append(time.perf_counter() - t0)
        report.epochs.append(_record(net, fisher, penalty, evaluation, epoch + 1, obj_sum / steps_per_epoch))
    return net, report


def _record(net, fisher, penalty, evaluation, epoch, objective) -> EpochRecord:
    pen = penalty_value(net, fisher, penalty) if penalty.kind != "none" else 0.0
    norms = {lay.name: float(np.linalg.norm(lay.delta())) for lay in net.all_layers()
             if lay.delta() is not None and not lay.is_head}
    if evaluation is None:
        return EpochRecord(epoch, float("nan"), float("nan"), pen, objective, norms)
    b = evaluate(net, evaluation.b_val, evaluation.b_metric, evaluation.b_head)
    a = evaluate(net, evaluation.a_heldout, evaluation.a_metric, evaluation.a_head)
    return EpochRecord(epoch, b, a, pen, objective, norms)


# -- sweeps ------------------------------------------------------------------

def run_cells(fn: Callable, cells: Sequence, jobs: int = 1) -> list:
    """Apply ``fn`` to every cell; results come back in cell order."""
    if jobs <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, cells))


def geometric_grid(lo: float, hi: float, ratio: float = 10.0) -> list[float]:
    if lo <= 0 or hi < lo or ratio <= 1:
        raise ConfigError(f"bad geometric grid {lo}..{hi} x{ratio}")
    n = int(round(math.log(hi / lo) / math.log(ratio)))
    return [float(f"{lo * ratio ** i:.12g}") for i in range(n + 1)]


@dataclass
class SweepRow:
    method: str
    lam: float
    task_b_mean: float
    task_b_sd: float
    task_a_mean: float
    task_a_sd: float
    task_b: list
    task_a: list
    errors: list = field(default_factory=list)


def summarize(method: str, lam: float, results: Sequence) -> SweepRow:
    """Aggregate per-seed (task_b, task_a) pairs or exceptions into one row."""
    ok = [r for r in results if not isinstance(r, BaseException) and not isinstance(r, str)]
    errs = [str(r) for r in results if isinstance(r, (BaseException, str))]
    b = [r[0] for r in ok]
    a = [r[1] for r in ok]
    return SweepRow(method, lam, _mean(b), _sd(b), _mean(a), _sd(a), b, a, errs)


def _mean(v):
    return float(np.mean(v)) if v else float("nan")


def _sd(v):
    return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0


@dataclass(frozen=True)
class _SweepCell:
    factory: Callable
    train: Split
    fisher: Optional[FisherEstimate]
    penalty: PenaltyConfig
    cfg: TrainConfig
    evaluation: Evaluation


def _run_sweep_cell(cell: _SweepCell):
    try:
        net = cell.factory(cell.cfg.seed)
        _, rep = fit(net, cell.train, cell.fisher, cell.penalty, cell.cfg, cell.evaluation)
        return rep.final.task_b, rep.final.task_a
    except BayesPeftError as exc:
        return f"{type(exc).__name__}: {exc}"


def sweep_lambda(factory: Callable[[int], Network], train: Split, fisher: Optional[FisherEstimate], kind: str,
                 grid: Sequence[float], cfg: TrainConfig, evaluation: Evaluation, seeds: Sequence[int] = (0,),
                 jobs: int = 1) -> list[SweepRow]:
    """One fit per (lambda, seed); ``factory(seed)`` returns a fresh net at theta_0.

    Failed cells are recorded in the row's ``errors`` and do not stop the sweep.
    """
    if not grid:
        raise ConfigError("empty lambda grid")
    cells = []
    for lam in grid:
        pen = PenaltyConfig("none") if lam == 0 else PenaltyConfig(kind, float(lam))
        for s in seeds:
            cells.append(_SweepCell(factory, train, fisher, pen, _with_seed(cfg, s), evaluation))
    results = run_cells(_run_sweep_cell, cells, jobs)
    rows = []
    k = len(seeds)
    for i, lam in enumerate(grid):
        rows.append(summarize(kind if lam else "none", float(lam), results[i * k:(i + 1) * k]))
    return rows


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    d = asdict(cfg)
    d["seed"] = int(seed)
    return TrainConfig(**d)


def select_lambda(rows: Sequence[SweepRow], baseline_b: float, b_higher_better: bool,
                  tolerance: float = 0.0, relative: bool = False) -> Optional[SweepRow]:
    """Pick the largest lambda whose task-B metric keeps up with the baseline.

    Candidates are rows whose mean task-B metric is no worse than the
    unregularized ``baseline_b`` (up to ``tolerance``, absolute or relative).
    The largest candidate lambda wins; rows sharing that lambda are separated by
    task-A retention (lower is better). Without candidates, the row with the
    best task-B metric is returned.
    """
    valid = [r for r in rows if not math.isnan(r.task_b_mean)]
    if not valid:
        return None
    slack = tolerance * abs(baseline_b) if relative else tolerance

    def acceptable(r):
        if b_higher_better:
            return r.task_b_mean >= baseline_b - slack
        return r.task_b_mean <= baseline_b + slack

    cands = [r for r in valid if acceptable(r)]
    if not cands:
        key = (lambda r: -r.task_b_mean) if b_higher_better else (lambda r: r.task_b_mean)
        return min(valid, key=key)
    return min(cands, key=lambda r: (-r.lam, r.task_a_mean))


def retention_monotone(rows: Sequence[SweepRow]) -> bool:
    """True when, for a majority of seeds, task-A retention never worsens as lambda grows."""
    ordered = sorted(rows, key=lambda r: r.lam)
    n_seeds = min(len(r.task_a) for r in ordered)
    votes = 0
    for s in range(n_seeds):
        seq = [r.task_a[s] for r in ordered]
        votes += all(b <= a + 1e-12 for a, b in zip(seq, seq[1:]))
    return votes * 2 > n_seeds
