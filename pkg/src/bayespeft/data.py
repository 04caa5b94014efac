"""Synthetic two-task transfer pairs: Gaussian clusters and Markov character streams."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .trainer import Split

CLUSTER_DIM = 16
CLUSTER_CLASSES = 4
CLUSTER_SIGMA = 0.5
CLUSTER_RADIUS = 3.0
CLUSTER_SIGMA_B = 0.8
CLUSTER_SHIFT = 1.5

VOCAB = 16
CONTEXT = 8
DIRICHLET_ALPHA = 0.2
FAVOURED_A = range(0, 10)   # characters each source prefers; the overlap keeps
FAVOURED_B = range(6, 16)   # the two tasks related but in conflict
BACKGROUND = 0.1

SPLIT_SIZES = {"a_pretrain": 4096, "a_pool": 1024, "a_heldout": 1024, "b_train": 2048, "b_val": 512}
CHARLM_SIZES = {"a_pretrain": 32768, "a_pool": 1024, "a_heldout": 1024, "b_train": 8192, "b_val": 512}


@dataclass
class TaskPair:
    kind: str  # "clusters" or "charlm"
    seed: int
    a_pretrain: Split
    a_pool: Split
    a_heldout: Split
    b_train: Split
    b_val: Split
    meta: dict = field(default_factory=dict)

    @property
    def a_metric(self) -> str:
        return "loss" if self.kind == "clusters" else "perplexity"

    @property
    def b_metric(self) -> str:
        return "accuracy" if self.kind == "clusters" else "perplexity"

    @property
    def b_higher_better(self) -> bool:
        return self.kind == "clusters"

    @property
    def b_head(self):
        """Head used for task B: a fresh classifier head, or the shared LM output."""
        return "taskB" if self.kind == "clusters" else None


def _row_hashes(x: np.ndarray) -> set:
    return {hashlib.sha1(np.ascontiguousarray(row).tobytes()).hexdigest() for row in x}


def _check_disjoint(splits: dict) -> None:
    seen = {}
    for name, keys in splits.items():
        for other, okeys in seen.items():
            if keys & okeys:
                raise DataError(f"splits {name!r} and {other!r} overlap")
        seen[name] = keys


def _random_rotation(rng, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def _sample_clusters(rng, centers: np.ndarray, n: int, sigma: float) -> Split:
    k = len(centers)
    y = np.tile(np.arange(k), n // k + 1)[:n]
    y = y[rng.permutation(n)]
    x = centers[y] + sigma * rng.standard_normal((n, centers.shape[1]))
    return Split(x, y.astype(np.int64))


def make_clusters(seed: int = 0, sizes: dict = None, sigma_b: float = CLUSTER_SIGMA_B,
                  shift_norm: float = CLUSTER_SHIFT) -> TaskPair:
    """Four Gaussian clusters in R^16 for task A; rotated and translated clusters for task B."""
    sizes = {**SPLIT_SIZES, **(sizes or {})}
    rng = np.random.default_rng([seed, 1])
    dirs = rng.standard_normal((CLUSTER_CLASSES, CLUSTER_DIM))
    centers_a = CLUSTER_RADIUS * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    rot = _random_rotation(rng, CLUSTER_DIM)
    shift = rng.standard_normal(CLUSTER_DIM)
    shift *= shift_norm / np.linalg.norm(shift)
    centers_b = centers_a @ rot.T + shift
    splits = {}
    for name, n in sizes.items():
        if name.startswith("a_"):
            splits[name] = _sample_clusters(rng, centers_a, n, CLUSTER_SIGMA)
        else:
            splits[name] = _sample_clusters(rng, centers_b, n, sigma_b)
    _check_disjoint({k: _row_hashes(v.x) for k, v in splits.items() if k.startswith("a_")})
    return TaskPair("clusters", seed, meta={"centers_a": centers_a, "centers_b": centers_b}, **splits)


def markov_table(rng, vocab: int = VOCAB, alpha: float = DIRICHLET_ALPHA, favoured=None,
                 background: float = BACKGROUND) -> np.ndarray:
    """P[i, j, k] = p(next = k | previous two = i, j).

    Rows are Dirichlet draws with total concentration ``alpha * vocab``; when
    ``favoured`` is given, that mass is tilted towards those characters and the
    rest get weight ``background``.
    """
    w = np.ones(vocab)
    if favoured is not None:
        w = np.full(vocab, background)
        w[list(favoured)] = 1.0
    return rng.dirichlet(alpha * vocab * w / w.sum(), size=(vocab, vocab))


def sample_stream(rng, table: np.ndarray, length: int) -> np.ndarray:
    vocab = table.shape[0]
    cdf = np.cumsum(table, axis=2)
    out = np.empty(length, dtype=np.int64)
    out[:2] = rng.integers(vocab, size=2)
    u = rng.random(length)
    for t in range(2, length):
        k = int(np.searchsorted(cdf[out[t - 2], out[t - 1]], u[t], side="right"))
        out[t] = min(k, vocab - 1)
    return out


def windows(stream: np.ndarray, context: int = CONTEXT, vocab: int = VOCAB) -> Split:
    """One-hot context windows (position-major) and next-character targets."""
    n = len(stream) - context
    idx = np.arange(n)[:, None] + np.arange(context)[None, :]
    ctx = stream[idx]
    x = np.zeros((n, context * vocab))
    x[np.arange(n)[:, None], np.arange(context)[None, :] * vocab + ctx] = 1.0
    return Split(x, stream[context:context + n].copy())


def make_charlm(seed: int = 0, sizes: dict = None, alpha: float = DIRICHLET_ALPHA) -> TaskPair:
    """Two 2nd-order Markov sources over a shared 16-character alphabet.

    Each split is cut from its own independently generated stream (burn-in
    discarded), so splits never share a sample position. Identical windows can
    still recur by chance, as they would in any text corpus.
    """
    sizes = {**CHARLM_SIZES, **(sizes or {})}
    rng = np.random.default_rng([seed, 2])
    table_a = markov_table(rng, alpha=alpha, favoured=FAVOURED_A)
    table_b = markov_table(rng, alpha=alpha, favoured=FAVOURED_B)
    splits = {}
    for i, (name, n) in enumerate(sizes.items()):
        srng = np.random.default_rng([seed, 3, i])
        table = table_a if name.startswith("a_") else table_b
        splits[name] = windows(sample_stream(srng, table, n + CONTEXT + 64)[64:])
    keys = {name: {(i, t) for t in range(len(splits[name]))} for i, name in enumerate(sizes)}
    _check_disjoint({k: v for k, v in keys.items() if k.startswith("a_")})
    return TaskPair("charlm", seed, meta={"table_a": table_a, "table_b": table_b}, **splits)


def make_pair(kind: str, seed: int = 0) -> TaskPair:
    if kind == "clusters":
        return make_clusters(seed)
    if kind == "charlm":
        return make_charlm(seed)
    raise DataError(f"unknown task pair {kind!r}")
