"""Empirical Fisher estimates for linear layers at the pre-trained weights.

Three fidelities, one per regularizer:

* ``identity``  - no data pass (L2-SP).
* ``diagonal``  - mean over samples of the squared per-sample weight gradient (EWC).
* ``kronecker`` - factors A = E[a a^T] and G = E[g g^T] over samples (KFAC).

Gradients are of the task-A training loss at the data labels, taken with
respect to the full weight W of each layer, so one estimate serves any
parameterization of the weight shift.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import serialize
from .errors import ContractError, DataError, FormatError, ShapeError
from .model import Network, capture_pass

FISHER_FORMAT = "bayespeft-fisher"
FISHER_VERSION = 1
DEFAULT_DAMPING = 1e-8
CHUNK = 256

KINDS = ("identity", "diagonal", "kronecker")


@dataclass
class LayerCurvature:
    kind: str
    d_out: int
    d_in: int
    diag: Optional[np.ndarray] = None  # d_out x d_in
    A: Optional[np.ndarray] = None  # d_in x d_in, damping included
    G: Optional[np.ndarray] = None  # d_out x d_out, damping included

    def storage(self) -> int:
        """Number of stored reals."""
        if self.kind == "diagonal":
            return self.diag.size
        if self.kind == "kronecker":
            return self.A.size + self.G.size
        return 0


@dataclass
class FisherEstimate:
    kind: str
    layers: dict = field(default_factory=dict)  # name -> LayerCurvature
    sample_count: int = 0
    damping: float = 0.0
    seed: Optional[int] = None

    def __getitem__(self, name: str) -> LayerCurvature:
        return self.layers[name]

    def storage(self) -> int:
        return sum(c.storage() for c in self.layers.values())


def _layer_names(net: Network, names) -> list[str]:
    names = list(net.regularizable() if names is None else names)
    for n in names:
        if net.layer(n).is_head:
            raise ContractError(f"head {n!r} has no pre-trained value to estimate curvature for")
    return names


def _draw(x, y, n_samples: int, seed: Optional[int]):
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y)
    if n_samples < 1:
        raise ContractError(f"n_samples must be >= 1, got {n_samples}")
    if n_samples > len(x):
        raise DataError(f"sample pool holds {len(x)} examples, {n_samples} requested")
    if seed is None:
        idx = np.arange(n_samples)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(len(x), size=n_samples, replace=False))
    return x[idx], y[idx]


def _sweep(net: Network, x, y, names, head):
    """Yield per-layer (a, g) for consecutive chunks of the sample set, in order."""
    for start in range(0, len(x), CHUNK):
        yield capture_pass(net, x[start:start + CHUNK], y[start:start + CHUNK], names=names, head=head)


def estimate_diagonal(net: Network, x, y, n_samples: int, names=None, seed: Optional[int] = None,
                      head: Optional[str] = None) -> FisherEstimate:
    names = _layer_names(net, names)
    xs, ys = _draw(x, y, n_samples, seed)
    acc = {n: np.zeros((net.layer(n).d_out, net.layer(n).d_in)) for n in names}
    for chunk in _sweep(net, xs, ys, names, head):
        for n in names:
            a, g = chunk[n]
            # sum_i (g_i a_i^T)^2 elementwise == (g^2)^T (a^2)
            acc[n] += (g * g).T @ (a * a)
    est = FisherEstimate("diagonal", sample_count=n_samples, damping=0.0, seed=seed)
    for n in names:
        lay = net.layer(n)
        est.layers[n] = LayerCurvature("diagonal", lay.d_out, lay.d_in, diag=acc[n] / n_samples)
    return est


def estimate_kronecker(net: Network, x, y, n_samples: int, names=None, seed: Optional[int] = None,
                       damping: float = DEFAULT_DAMPING, head: Optional[str] = None) -> FisherEstimate:
    if damping < 0:
        raise ContractError(f"damping must be >= 0, got {damping}")
    names = _layer_names(net, names)
    xs, ys = _draw(x, y, n_samples, seed)
    acc_a = {n: np.zeros((net.layer(n).d_in,) * 2) for n in names}
    acc_g = {n: np.zeros((net.layer(n).d_out,) * 2) for n in names}
    for chunk in _sweep(net, xs, ys, names, head):
        for n in names:
            a, g = chunk[n]
            acc_a[n] += a.T @ a
            acc_g[n] += g.T @ g
    est = FisherEstimate("kronecker", sample_count=n_samples, damping=float(damping), seed=seed)
    for n in names:
        lay = net.layer(n)
        A = _symmetrize(acc_a[n] / n_samples) + damping * np.eye(lay.d_in)
        G = _symmetrize(acc_g[n] / n_samples) + damping * np.eye(lay.d_out)
        est.layers[n] = LayerCurvature("kronecker", lay.d_out, lay.d_in, A=A, G=G)
    return est


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def estimate_identity(net: Network, names=None) -> FisherEstimate:
    """Identity curvature for every layer; needs no data."""
    est = FisherEstimate("identity", sample_count=1, damping=0.0)
    for n in _layer_names(net, names):
        lay = net.layer(n)
        est.layers[n] = LayerCurvature("identity", lay.d_out, lay.d_in)
    return est


def estimate(kind: str, net: Network, x=None, y=None, n_samples: int = 1024, names=None,
             seed: Optional[int] = None, damping: float = DEFAULT_DAMPING,
             head: Optional[str] = None) -> FisherEstimate:
    """Dispatch on ``kind`` (identity, diagonal, kronecker)."""
    if kind == "identity":
        return estimate_identity(net, names)
    if x is None or y is None:
        raise DataError(f"{kind} estimation needs task-A samples")
    if kind == "diagonal":
        return estimate_diagonal(net, x, y, n_samples, names, seed, head)
    if kind == "kronecker":
        return estimate_kronecker(net, x, y, n_samples, names, seed, damping, head)
    raise ContractError(f"unknown estimator kind {kind!r}")


# -- files ------------------------------------------------------------------

def fisher_record(est: FisherEstimate) -> dict:
    layers = []
    for name, c in est.layers.items():
        rec = {"name": name, "kind": c.kind, "d_out": c.d_out, "d_in": c.d_in}
        if c.kind == "diagonal":
            rec["diag"] = serialize.encode_matrix(c.diag)
        elif c.kind == "kronecker":
            rec["A"] = serialize.encode_matrix(c.A)
            rec["G"] = serialize.encode_matrix(c.G)
        layers.append(rec)
    return {"format": FISHER_FORMAT, "version": FISHER_VERSION, "kind": est.kind,
            "sample_count": est.sample_count, "damping": est.damping.hex(), "seed": est.seed,
            "layers": layers}


def save(est: FisherEstimate, path):
    return serialize.write_record(path, fisher_record(est))


def load(path, net: Optional[Network] = None) -> FisherEstimate:
    rec = serialize.read_record(path, FISHER_FORMAT, FISHER_VERSION)
    try:
        kind = rec["kind"]
        if kind not in KINDS:
            raise FormatError(f"unknown estimator kind {kind!r}")
        est = FisherEstimate(kind, sample_count=int(rec["sample_count"]),
                             damping=float.fromhex(rec["damping"]), seed=rec["seed"])
        for lrec in rec["layers"]:
            c = LayerCurvature(lrec["kind"], int(lrec["d_out"]), int(lrec["d_in"]))
            if c.kind == "diagonal":
                c.diag = serialize.decode_matrix(lrec["diag"])
            elif c.kind == "kronecker":
                c.A = serialize.decode_matrix(lrec["A"])
                c.G = serialize.decode_matrix(lrec["G"])
            est.layers[lrec["name"]] = c
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed curvature record ({exc})") from exc
    for name, c in est.layers.items():
        shapes = {"diagonal": [(c.diag, (c.d_out, c.d_in))],
                  "kronecker": [(c.A, (c.d_in, c.d_in)), (c.G, (c.d_out, c.d_out))]}.get(c.kind, [])
        for m, want in shapes:
            if m.shape != want:
                raise FormatError(f"{path}: layer {name!r} payload {m.shape}, declared {want}")
    if net is not None:
        check_compatible(est, net)
    return est


def check_compatible(est: FisherEstimate, net: Network) -> None:
    for name, c in est.layers.items():
        lay = net.layer(name)
        if (lay.d_out, lay.d_in) != (c.d_out, c.d_in):
            raise ShapeError(f"curvature for {name!r} is {c.d_out}x{c.d_in}, layer is {lay.d_out}x{lay.d_in}")
