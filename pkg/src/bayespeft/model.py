"""Bias-free MLP classifiers and fixed-context character language models.

A :class:`Network` is an ordered list of :class:`LinearLayer` objects (hidden
layers followed by the pre-trained output layer ``out``) plus any number of
attached task heads. ``forward`` builds the computation on a :class:`Tape`;
``predict`` is the tape-free path used for evaluation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import serialize
from .errors import ContractError, ShapeError
from .lora import LoraAdapter, delta_weight_node
from .tensor import Node, Tape, seeded_gaussian

CHECKPOINT_FORMAT = "bayespeft-checkpoint"
ADAPTER_FORMAT = "bayespeft-adapters"
FORMAT_VERSION = 1


@dataclass
class LinearLayer:
    name: str
    weight: np.ndarray
    trainable: bool = False
    adapter: Optional[LoraAdapter] = None
    capture: bool = False
    is_head: bool = False
    # copy of W at theta_0, set when the layer is fully fine-tuned
    anchor: Optional[np.ndarray] = None

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    def effective_weight(self) -> np.ndarray:
        if self.adapter is not None:
            ad = self.adapter
            return self.weight + ad.gamma * (ad.A @ ad.B.T)
        return self.weight

    def delta(self) -> Optional[np.ndarray]:
        """Shift of the effective weight from theta_0, or None if the layer cannot move."""
        if self.adapter is not None:
            return self.adapter.gamma * (self.adapter.A @ self.adapter.B.T)
        if self.anchor is not None:
            return self.weight - self.anchor
        return None


@dataclass(frozen=True)
class NetworkSpec:
    kind: str  # "classifier" or "char_lm"
    dims: tuple  # input width, hidden widths..., output width
    activation: str = "relu"
    context_len: int = 8

    def __post_init__(self):
        if self.kind not in ("classifier", "char_lm"):
            raise ContractError(f"unknown network kind {self.kind!r}")
        if len(self.dims) < 2 or any(int(d) < 1 for d in self.dims):
            raise ShapeError(f"bad layer dims {self.dims}")
        if self.activation not in ("relu", "tanh", "identity"):
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.kind == "char_lm":
            if self.context_len < 1:
                raise ContractError("context_len must be >= 1")
            if self.dims[0] != self.dims[-1] * self.context_len:
                raise ShapeError(f"char_lm input width {self.dims[0]} != vocab {self.dims[-1]} x context {self.context_len}")

    @property
    def vocab(self) -> int:
        return self.dims[-1]


def classifier_spec(classes: int = 4, input_dim: int = 16, hidden=(32, 32)) -> NetworkSpec:
    return NetworkSpec("classifier", (input_dim, *hidden, classes))


def char_lm_spec(vocab: int = 16, context_len: int = 8, hidden=(64, 64)) -> NetworkSpec:
    return NetworkSpec("char_lm", (vocab * context_len, *hidden, vocab), context_len=context_len)


@dataclass
class ForwardPass:
    tape: Tape
    logits: Node
    deltas: dict = field(default_factory=dict)  # layer name -> delta-weight node
    inputs: dict = field(default_factory=dict)  # layer name -> input activations (batch x d_in)
    preacts: dict = field(default_factory=dict)  # layer name -> pre-activation node


class Network:
    def __init__(self, spec: NetworkSpec, layers: list[LinearLayer]):
        self.spec = spec
        self.layers = layers
        self.heads: dict[str, LinearLayer] = {}

    @classmethod
    def init(cls, spec: NetworkSpec, seed: int = 0) -> "Network":
        layers = []
        n = len(spec.dims) - 1
        for i in range(n):
            d_in, d_out = spec.dims[i], spec.dims[i + 1]
            name = "out" if i == n - 1 else f"fc{i + 1}"
            std = math.sqrt(2.0 / d_in) if i < n - 1 else 1.0 / math.sqrt(d_in)
            layers.append(LinearLayer(name, seeded_gaussian(d_out, d_in, 0.0, std, seed * 1009 + i)))
        return cls(spec, layers)

    # -- structure ----------------------------------------------------------

    def layer(self, name: str) -> LinearLayer:
        for lay in self.all_layers():
            if lay.name == name:
                return lay
        raise ContractError(f"no layer named {name!r}")

    def all_layers(self) -> list[LinearLayer]:
        return self.layers + list(self.heads.values())

    def path(self, head: Optional[str] = None) -> list[LinearLayer]:
        """Layers traversed when predicting through ``head`` (default: ``out``)."""
        if head is None or head == "out":
            return self.layers
        if head not in self.heads:
            raise ContractError(f"no head named {head!r}")
        return self.layers[:-1] + [self.heads[head]]

    def regularizable(self) -> list[str]:
        """Layers with a pre-trained value; heads are excluded."""
        return [lay.name for lay in self.layers]

    def adapted(self) -> list[str]:
        return [lay.name for lay in self.all_layers() if lay.delta() is not None and not lay.is_head]

    def set_capture(self, on: bool = True) -> None:
        for lay in self.all_layers():
            lay.capture = on

    def enable_full_finetune(self, names=None) -> None:
        for lay in self.layers:
            if names is None or lay.name in names:
                if lay.adapter is not None:
                    raise ContractError(f"layer {lay.name!r} has an adapter")
                lay.trainable = True
                lay.anchor = lay.weight.copy()

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed by ``<layer>.<A|B|W>``, in layer order."""
        out = {}
        for lay in self.all_layers():
            if lay.adapter is not None:
                out[f"{lay.name}.A"] = lay.adapter.A
                out[f"{lay.name}.B"] = lay.adapter.B
            elif lay.trainable:
                out[f"{lay.name}.W"] = lay.weight
        return out

    def set_parameter(self, key: str, value: np.ndarray) -> None:
        name, part = key.rsplit(".", 1)
        lay = self.layer(name)
        if part == "W":
            lay.weight = value
        elif part in ("A", "B") and lay.adapter is not None:
            setattr(lay.adapter, part, value)
        else:
            raise ContractError(f"unknown parameter {key!r}")

    # -- evaluation ---------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 2 or x.shape[1] != self.spec.dims[0]:
            raise ShapeError(f"input shape {x.shape} does not match input width {self.spec.dims[0]}")

    def forward(self, x: np.ndarray, head: Optional[str] = None, tape: Optional[Tape] = None) -> ForwardPass:
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        tape = tape or Tape()
        fp = ForwardPass(tape, None)
        h = tape.constant(x)
        path = self.path(head)
        for i, lay in enumerate(path):
            w = self._weight_node(tape, lay, fp)
            if lay.capture:
                fp.inputs[lay.name] = h.value
            s = tape.matmul(h, tape.transpose(w))
            if lay.capture:
                fp.preacts[lay.name] = s
            h = s if i == len(path) - 1 else tape.activation(self.spec.activation, s)
        fp.logits = h
        return fp

    def _weight_node(self, tape: Tape, lay: LinearLayer, fp: ForwardPass) -> Node:
        if lay.adapter is not None:
            ad = lay.adapter
            delta = delta_weight_node(tape, tape.param(ad.A, f"{lay.name}.A"),
                                      tape.param(ad.B, f"{lay.name}.B"), ad.gamma)
            fp.deltas[lay.name] = delta
            return tape.add(tape.constant(lay.weight), delta)
        if lay.trainable:
            w = tape.param(lay.weight, f"{lay.name}.W")
            if lay.anchor is not None:
                fp.deltas[lay.name] = tape.sub(w, tape.constant(lay.anchor))
            return w
        if lay.capture:
            # a leaf that requires grad so the pre-activation gradient gets recorded
            return tape.param(lay.weight, f"{lay.name}.W")
        return tape.constant(lay.weight)

    def predict(self, x: np.ndarray, head: Optional[str] = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        path = self.path(head)
        h = x
        for i, lay in enumerate(path):
            h = h @ lay.effective_weight().T
            if i < len(path) - 1:
                h = _activate(self.spec.activation, h)
        return h

    def copy(self) -> "Network":
        import copy
        return copy.deepcopy(self)


def _activate(kind: str, s: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.where(s > 0, s, 0.0)
    if kind == "tanh":
        return np.tanh(s)
    return s


def task_loss_node(net: Network, x, labels, head: Optional[str] = None, tape: Optional[Tape] = None,
                   reduction: str = "mean"):
    """Cross-entropy of ``labels`` under the network; returns (loss node, forward pass)."""
    labels = np.asarray(labels)
    if labels.size == 0 or len(x) == 0:
        raise ContractError("empty batch")
    fp = net.forward(x, head=head, tape=tape)
    return fp.tape.softmax_cross_entropy(fp.logits, labels, reduction=reduction), fp


def task_loss(net: Network, x, labels, head: Optional[str] = None) -> float:
    """Mean cross-entropy, evaluated without a tape."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0 or len(x) == 0:
        raise ContractError("empty batch")
    return mean_cross_entropy(net.predict(x, head=head), labels)


def mean_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def perplexity(loss: float) -> float:
    return math.exp(loss)


def accuracy(net: Network, x, labels, head: Optional[str] = None) -> float:
    return float(np.mean(net.predict(x, head=head).argmax(axis=1) == np.asarray(labels)))


def capture_pass(net: Network, x, labels, names=None, head: Optional[str] = None):
    """Per-sample layer inputs ``a`` (n x d_in) and pre-activation gradients ``g`` (n x d_out).

    Gradients are of each sample's own loss (sum reduction), so row i of
    ``g`` is exactly dL_i/ds_l and the weight gradient of sample i is
    ``outer(g[i], a[i])``.
    """
    wanted = set(names) if names is not None else None
    saved = {lay.name: lay.capture for lay in net.all_layers()}
    for lay in net.all_layers():
        lay.capture = wanted is None or lay.name in wanted
    try:
        loss, fp = task_loss_node(net, x, labels, head=head, reduction="sum")
        fp.tape.backward(loss)
    finally:
        for lay in net.all_layers():
            lay.capture = saved[lay.name]
    return {name: (fp.inputs[name], fp.preacts[name].grad) for name in fp.preacts}


def attach_head(net: Network, name: str, classes: int, seed: int = 0) -> Network:
    """Append a fresh, fully trainable output head fed by the last hidden layer."""
    if name in net.heads or name == "out":
        raise ContractError(f"head {name!r} already exists")
    d_in = net.layers[-1].d_in
    if classes < 1:
        raise ShapeError(f"head needs >= 1 class, got {classes}")
    w = seeded_gaussian(classes, d_in, 0.0, 1.0 / math.sqrt(d_in), seed)
    net.heads[name] = LinearLayer(name, w, trainable=True, is_head=True)
    return net


# -- checkpoints --------------------------------------------------------------

def _spec_record(spec: NetworkSpec) -> dict:
    return {"kind": spec.kind, "dims": list(spec.dims), "activation": spec.activation,
            "context_len": spec.context_len}


def checkpoint_record(net: Network) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": FORMAT_VERSION,
        "spec": _spec_record(net.spec),
        "layers": [{"name": lay.name, "is_head": lay.is_head, "weight": serialize.encode_matrix(lay.effective_weight())}
                   for lay in net.all_layers()],
    }


def save_checkpoint(net: Network, path):
    """Write effective weights (adapters folded in) as the new theta_0."""
    return serialize.write_record(path, checkpoint_record(net))


def load_checkpoint(path) -> Network:
    rec = serialize.read_record(path, CHECKPOINT_FORMAT, FORMAT_VERSION)
    s = rec["spec"]
    spec = NetworkSpec(s["kind"], tuple(s["dims"]), s["activation"], s["context_len"])
    net = Network(spec, [])
    for lrec in rec["layers"]:
        lay = LinearLayer(lrec["name"], serialize.decode_matrix(lrec["weight"]), is_head=lrec["is_head"])
        if lay.is_head:
            lay.trainable = True
            net.heads[lay.name] = lay
        else:
            net.layers.append(lay)
    dims = [net.layers[0].d_in] + [lay.d_out for lay in net.layers]
    if tuple(dims) != spec.dims:
        raise serialize.FormatError(f"{path}: declared dims {spec.dims} but payload dims {tuple(dims)}")
    return net


def save_adapters(net: Network, path):
    layers = []
    for lay in net.all_layers():
        if lay.adapter is not None:
            ad = lay.adapter
            layers.append({"name": lay.name, "d_out": lay.d_out, "d_in": lay.d_in, "gamma": ad.gamma,
                           "rank": ad.rank, "A": serialize.encode_matrix(ad.A), "B": serialize.encode_matrix(ad.B)})
    return serialize.write_record(path, {"format": ADAPTER_FORMAT, "version": FORMAT_VERSION, "layers": layers})


def load_adapters(net: Network, path) -> Network:
    rec = serialize.read_record(path, ADAPTER_FORMAT, FORMAT_VERSION)
    for lrec in rec["layers"]:
        lay = net.layer(lrec["name"])
        if (lay.d_out, lay.d_in) != (lrec["d_out"], lrec["d_in"]):
            raise ShapeError(f"adapter for {lay.name!r} expects {lrec['d_out']}x{lrec['d_in']}, base is {lay.d_out}x{lay.d_in}")
        lay.adapter = LoraAdapter(serialize.decode_matrix(lrec["A"]), serialize.decode_matrix(lrec["B"]),
                                  float(lrec["gamma"]), int(lrec["rank"]))
        lay.trainable = False
    return net
