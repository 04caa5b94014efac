"""Slow brute-force references used to check the main code path.

Nothing here calls :mod:`bayespeft.tensor`, the tape, or numpy matrix
products. Forward and backward passes are written as explicit per-sample
Python loops; numpy is only used for elementwise outer products and storage.
Size guards hard-fail instead of subsampling.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, OracleError

MAX_BLOCK_PARAMS = 256
MAX_KRON_DIM = 1024


def _rows(m) -> list[list[float]]:
    return [[float(v) for v in row] for row in np.asarray(m)]


def _effective_weights(net, head=None) -> list[list[list[float]]]:
    """Effective weight of every layer on the path, with gamma*A*B^T summed by hand."""
    out = []
    for lay in net.path(head):
        w = _rows(lay.weight)
        if lay.adapter is not None:
            A, B, gamma = _rows(lay.adapter.A), _rows(lay.adapter.B), lay.adapter.gamma
            r = len(A[0])
            for i in range(len(w)):
                for j in range(len(w[0])):
                    w[i][j] += gamma * sum(A[i][k] * B[j][k] for k in range(r))
        out.append(w)
    return out


def _act(kind: str, v: float) -> float:
    if kind == "relu":
        return v if v > 0 else 0.0
    if kind == "tanh":
        return math.tanh(v)
    return v


def _act_grad(kind: str, v: float) -> float:
    if kind == "relu":
        return 1.0 if v > 0 else 0.0
    if kind == "tanh":
        t = math.tanh(v)
        return 1.0 - t * t
    return 1.0


def _forward_one(weights, activation, x):
    """Return (inputs per layer, pre-activations per layer) for one sample."""
    h = [float(v) for v in x]
    inputs, pre = [], []
    for li, w in enumerate(weights):
        inputs.append(h)
        s = [sum(wij * hj for wij, hj in zip(row, h)) for row in w]
        pre.append(s)
        h = s if li == len(weights) - 1 else [_act(activation, v) for v in s]
    return inputs, pre


def _log_softmax(z):
    m = max(z)
    lse = m + math.log(sum(math.exp(v - m) for v in z))
    return [v - lse for v in z]


def replay_logits(net, x, head=None) -> np.ndarray:
    weights = _effective_weights(net, head)
    return np.array([_forward_one(weights, net.spec.activation, xi)[1][-1] for xi in np.asarray(x)])


def replay_loss(net, x, labels, head=None) -> float:
    """Mean cross-entropy recomputed sample by sample."""
    weights = _effective_weights(net, head)
    total = 0.0
    for xi, yi in zip(np.asarray(x), np.asarray(labels)):
        logits = _forward_one(weights, net.spec.activation, xi)[1][-1]
        total -= _log_softmax(logits)[int(yi)]
    return total / len(labels)


def per_sample_weight_grad(net, layer_name: str, x, label, head=None) -> np.ndarray:
    """d(loss of one sample)/dW for ``layer_name`` via hand-written backprop."""
    layers = net.path(head)
    names = [lay.name for lay in layers]
    if layer_name not in names:
        raise ContractError(f"layer {layer_name!r} is not on the path")
    target = names.index(layer_name)
    weights = _effective_weights(net, head)
    inputs, pre = _forward_one(weights, net.spec.activation, x)
    logp = _log_softmax(pre[-1])
    g = [math.exp(v) for v in logp]
    g[int(label)] -= 1.0
    for li in range(len(weights) - 1, target, -1):
        w = weights[li]
        back = [sum(w[i][j] * g[i] for i in range(len(g))) for j in range(len(w[0]))]
        g = [b * _act_grad(net.spec.activation, s) for b, s in zip(back, pre[li - 1])]
    a = inputs[target]
    return np.array([[gi * aj for aj in a] for gi in g])


def vec(m) -> np.ndarray:
    """Column-major vectorization."""
    return np.asarray(m, dtype=np.float64).flatten(order="F")


def exact_fisher_block(net, layer_name: str, x, labels, head=None) -> np.ndarray:
    """Mean over samples of vec(grad) vec(grad)^T for one layer (empirical Fisher)."""
    lay = net.layer(layer_name)
    dim = lay.d_out * lay.d_in
    if dim > MAX_BLOCK_PARAMS:
        raise ContractError(f"layer {layer_name!r} has {dim} weights, oracle limit is {MAX_BLOCK_PARAMS}")
    block = np.zeros((dim, dim))
    x, labels = np.asarray(x), np.asarray(labels)
    for xi, yi in zip(x, labels):
        v = vec(per_sample_weight_grad(net, layer_name, xi, yi, head))
        block += np.multiply.outer(v, v)
    return block / len(labels)


def dense_kron(A, G) -> np.ndarray:
    """Literal Kronecker product: block (i, j) is A[i, j] * G."""
    A, G = np.asarray(A, dtype=np.float64), np.asarray(G, dtype=np.float64)
    (p, q), (m, n) = A.shape, G.shape
    if p * m > MAX_KRON_DIM or q * n > MAX_KRON_DIM:
        raise ContractError(f"kron result {p * m}x{q * n} exceeds {MAX_KRON_DIM}x{MAX_KRON_DIM}")
    out = np.zeros((p * m, q * n))
    for i in range(p):
        for j in range(q):
            out[i * m:(i + 1) * m, j * n:(j + 1) * n] = A[i, j] * G
    return out


def quadratic_form(M, v) -> float:
    """v^T M v by explicit double loop."""
    M, v = np.asarray(M), np.asarray(v)
    return float(sum(v[i] * sum(M[i, j] * v[j] for j in range(len(v))) for i in range(len(v))))


def finite_diff_grad(f, params: dict, eps: float = 1e-4) -> dict:
    """Central differences of scalar ``f(params)`` for every coordinate of every array.

    ``params`` maps names to float arrays; they are perturbed in place and
    restored afterwards.
    """
    if eps <= 0:
        raise ContractError(f"eps must be > 0, got {eps}")
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = f(params)
            flat[k] = orig - eps
            down = f(params)
            flat[k] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise OracleError(f"non-finite objective while perturbing {name}[{k}]")
            gflat[k] = (up - down) / (2.0 * eps)
        grads[name] = g
    return grads


def markov_entropy_rate(transitions: np.ndarray) -> float:
    """Entropy rate (nats/symbol) of a 2nd-order chain with P[i, j, k] = p(k | i, j).

    The stationary distribution over pairs is found by power iteration.
    """
    T = np.asarray(transitions)
    V = T.shape[0]
    pi = np.full((V, V), 1.0 / (V * V))
    for _ in range(10000):
        nxt = np.zeros((V, V))
        for i in range(V):
            for j in range(V):
                nxt[j, :] += pi[i, j] * T[i, j, :]
        if np.abs(nxt - pi).max() < 1e-15:
            pi = nxt
            break
        pi = nxt
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(T > 0, T * np.log(T), 0.0).sum(axis=2)
    return float((pi * ent).sum())
