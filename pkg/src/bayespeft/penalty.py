"""Laplace penalties on the weight shift of each regularized layer.

For a layer with shift D = W - W0 the per-layer quadratic form is

    l2sp : ||D||_F^2
    ewc  : <F, D * D>
    kfac : <D, G D A>   (equal to vec(D)^T (A kron G) vec(D), column-major vec)

and the penalty is ``lam`` times the sum over layers. There is no factor 1/2.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .fisher import FisherEstimate, LayerCurvature
from .lora import delta_weight_node
from .model import Network, task_loss_node
from .tensor import Node, Tape

KINDS = ("none", "l2sp", "ewc", "kfac")
VARIANT_FOR = {"l2sp": "identity", "ewc": "diagonal", "kfac": "kronecker"}


@dataclass(frozen=True)
class PenaltyConfig:
    kind: str = "none"
    lam: float = 0.0
    layers: Optional[tuple] = None  # None: every adapted non-head layer

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown penalty kind {self.kind!r}")
        if self.kind != "none" and not (self.lam >= 0 and np.isfinite(self.lam)):
            raise ConfigError(f"lambda must be a finite value >= 0, got {self.lam}")

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.lam != 0


def regularized_layers(net: Network, config: PenaltyConfig) -> list[str]:
    if config.layers is not None:
        return list(config.layers)
    return net.adapted()


def validate(net: Network, fisher: Optional[FisherEstimate], config: PenaltyConfig) -> list[str]:
    """Check ``config`` against ``net`` and ``fisher``; return the regularized layer names."""
    if config.kind == "none":
        return []
    names = regularized_layers(net, config)
    want = VARIANT_FOR[config.kind]
    if fisher is None:
        raise ConfigError(f"{config.kind} penalty needs a curvature estimate")
    for name in names:
        lay = net.layer(name)
        if lay.is_head:
            raise ContractError(f"head {name!r} cannot be regularized")
        if lay.delta() is None:
            raise ContractError(f"layer {name!r} has no adapter and is not trainable")
        if name not in fisher.layers:
            raise ConfigError(f"curvature estimate has no entry for layer {name!r}")
        c = fisher.layers[name]
        if c.kind != want:
            raise ConfigError(f"{config.kind} penalty needs {want} curvature, layer {name!r} has {c.kind}")
        if (c.d_out, c.d_in) != (lay.d_out, lay.d_in):
            raise ShapeError(f"curvature for {name!r} is {c.d_out}x{c.d_in}, layer is {lay.d_out}x{lay.d_in}")
    return names


def layer_quadratic(delta: np.ndarray, c: LayerCurvature) -> float:
    if c.kind == "identity":
        return float(np.sum(delta * delta))
    if c.kind == "diagonal":
        return float(np.sum(c.diag * (delta * delta)))
    if c.kind == "kronecker":
        return float(np.sum(delta * (c.G @ delta @ c.A)))
    raise ContractError(f"unknown curvature kind {c.kind!r}")


def layer_quadratic_node(tape: Tape, delta: Node, c: LayerCurvature) -> Node:
    if c.kind == "identity":
        return tape.inner(delta, delta)
    if c.kind == "diagonal":
        return tape.inner(tape.mul(tape.constant(c.diag), delta), delta)
    if c.kind == "kronecker":
        gda = tape.matmul(tape.matmul(tape.constant(c.G), delta), tape.constant(c.A))
        return tape.inner(delta, gda)
    raise ContractError(f"unknown curvature kind {c.kind!r}")


def penalty_value(net: Network, fisher: Optional[FisherEstimate], config: PenaltyConfig) -> float:
    names = validate(net, fisher, config)
    if config.kind == "none":
        return 0.0
    total = 0.0
    for name in names:
        total += layer_quadratic(net.layer(name).delta(), fisher.layers[name])
    return config.lam * total


def penalty_node(tape: Tape, deltas: dict, fisher: FisherEstimate, config: PenaltyConfig, names) -> Node:
    terms = [layer_quadratic_node(tape, deltas[n], fisher.layers[n]) for n in names]
    return tape.scale(tape.add_scalars(terms), config.lam)


def _delta_nodes(net: Network, tape: Tape, names, existing: dict) -> dict:
    """Delta nodes for ``names``, reusing those already built by a forward pass."""
    deltas = dict(existing)
    for n in names:
        if n in deltas:
            continue
        lay = net.layer(n)
        if lay.adapter is not None:
            ad = lay.adapter
            deltas[n] = delta_weight_node(tape, tape.param(ad.A, f"{n}.A"), tape.param(ad.B, f"{n}.B"), ad.gamma)
        else:
            deltas[n] = tape.sub(tape.param(lay.weight, f"{n}.W"), tape.constant(lay.anchor))
    return deltas


def penalty_gradients(net: Network, fisher: Optional[FisherEstimate], config: PenaltyConfig) -> dict:
    """Gradients of the penalty with respect to every trainable parameter."""
    names = validate(net, fisher, config)
    grads = {k: np.zeros_like(v) for k, v in net.parameters().items()}
    if config.kind == "none":
        return grads
    tape = Tape()
    deltas = _delta_nodes(net, tape, names, {})
    grads.update(tape.backward(penalty_node(tape, deltas, fisher, config, names)))
    return grads


def delta_gradient(delta: np.ndarray, c: LayerCurvature, lam: float) -> np.ndarray:
    """Closed-form d(penalty)/d(delta) for one layer (curvature assumed symmetric)."""
    if c.kind == "identity":
        return 2.0 * lam * delta
    if c.kind == "diagonal":
        return 2.0 * lam * c.diag * delta
    if c.kind == "kronecker":
        return 2.0 * lam * (c.G @ delta @ c.A)
    raise ContractError(f"unknown curvature kind {c.kind!r}")


def analytic_gradients(net: Network, fisher: FisherEstimate, config: PenaltyConfig) -> dict:
    """Closed-form penalty gradients, chained through delta = gamma A B^T where adapted."""
    names = validate(net, fisher, config)
    grads = {k: np.zeros_like(v) for k, v in net.parameters().items()}
    for n in names:
        lay = net.layer(n)
        gd = delta_gradient(lay.delta(), fisher.layers[n], config.lam)
        if lay.adapter is not None:
            ad = lay.adapter
            grads[f"{n}.A"] = ad.gamma * gd @ ad.B
            grads[f"{n}.B"] = ad.gamma * gd.T @ ad.A
        else:
            grads[f"{n}.W"] = gd
    return grads


def total_loss_node(net: Network, x, labels, fisher: Optional[FisherEstimate], config: PenaltyConfig,
                    head: Optional[str] = None, names=None):
    """Task loss plus penalty on one tape; returns (total, task, penalty-or-None, forward pass)."""
    if names is None:
        names = validate(net, fisher, config)
    task, fp = task_loss_node(net, x, labels, head=head)
    if not config.active:
        return task, task, None, fp
    deltas = _delta_nodes(net, fp.tape, names, fp.deltas)
    pen = penalty_node(fp.tape, deltas, fisher, config, names)
    return fp.tape.add(task, pen), task, pen, fp


def total_loss(net: Network, x, labels, fisher: Optional[FisherEstimate], config: PenaltyConfig,
               head: Optional[str] = None) -> float:
    total, _, _, _ = total_loss_node(net, x, labels, fisher, config, head)
    return float(total.value[0, 0])
