"""Recurrent network kernels with exact backpropagation through time.

The LSTM cell uses one weight matrix per gate acting on the concatenation
(h_prev ++ x_t), in that order:

    i = sigmoid(W_i (h++x) + b_i)      input gate
    f = sigmoid(W_f (h++x) + b_f)      forget gate
    o = sigmoid(W_o (h++x) + b_o)      output gate
    g = tanh   (W_c (h++x) + b_c)      candidate state
    c_t = f * c_prev + i * g
    h_t = o * tanh(c_t)

lstm_step fuses the whole cell into two graph nodes with a hand-derived
backward; lstm_step_composed builds the same arithmetic from autodiff
primitives and is kept as a bit-for-bit reference. A bidirectional layer
runs a second cell over the reversed sequence and re-reverses its outputs,
so position t carries (forward state at t ++ backward state at t); the
layer's final state is (last forward state ++ last backward state), which
generally differs from the last element of the per-step sequence.

Everything here is float64 and deterministic given the numpy Generator
passed to the init functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Node, as_node, backward, grad_of, no_grad
from .errors import ConfigError, ShapeError

Array = np.ndarray

__all__ = [
    "LstmParams", "BiLstmParams", "FcParams", "AdamState", "GradCheckReport",
    "lstm_step", "lstm_step_composed", "lstm_forward", "bilstm_forward",
    "fc_forward", "mse_loss", "adam_update", "init_lstm_params",
    "init_bilstm_params", "init_fc_params", "xavier_uniform", "orthogonal",
    "lstm_param_count", "bilstm_param_count", "fc_param_count",
    "count_scalars", "finite_diff_grad", "rel_error", "check_gradients",
    "zero_grads", "backward", "grad_of", "no_grad",
]


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class LstmParams:
    """One direction of one recurrent layer. Weight shape: (K, K + input)."""

    W_i: Node
    W_f: Node
    W_o: Node
    W_c: Node
    b_i: Node
    b_f: Node
    b_o: Node
    b_c: Node

    @property
    def hidden(self) -> int:
        return self.W_i.value.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_i.value.shape[1] - self.hidden

    def named(self, prefix: str) -> Iterator[tuple[str, Node]]:
        for key in ("W_i", "W_f", "W_o", "W_c", "b_i", "b_f", "b_o", "b_c"):
            yield f"{prefix}.{key}", getattr(self, key)


@dataclass
class BiLstmParams:
    fwd: LstmParams
    bwd: LstmParams

    @property
    def hidden(self) -> int:
        return self.fwd.hidden

    @property
    def input_dim(self) -> int:
        return self.fwd.input_dim

    def named(self, prefix: str) -> Iterator[tuple[str, Node]]:
        yield from self.fwd.named(f"{prefix}.fwd")
        yield from self.bwd.named(f"{prefix}.bwd")


@dataclass
class FcParams:
    """Dense layer y = act(W x + b); activation is linear or relu."""

    W: Node
    b: Node
    activation: str = "linear"

    @property
    def in_dim(self) -> int:
        return self.W.value.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.value.shape[0]

    def named(self, prefix: str) -> Iterator[tuple[str, Node]]:
        yield f"{prefix}.W", self.W
        yield f"{prefix}.b", self.b


# ---------------------------------------------------------------------------
# forward ops


def _sig(z: Array) -> Array:
    return ad.stable_sigmoid(z)


def _check_step_shapes(p: LstmParams, x: Node, h_prev: Node, c_prev: Node) -> None:
    K = p.hidden
    if x.value.ndim != 1 or x.value.shape[0] != p.input_dim:
        raise ShapeError(
            f"lstm_step: input shape {x.value.shape} does not match "
            f"layer input dim {p.input_dim}")
    if h_prev.value.shape != (K,) or c_prev.value.shape != (K,):
        raise ShapeError(
            f"lstm_step: state shapes {h_prev.value.shape}/{c_prev.value.shape} "
            f"do not match hidden size {K}")


def lstm_step(p: LstmParams, x, h_prev, c_prev) -> tuple[Node, Node]:
    """One LSTM cell update. Returns (h_t, c_t) as graph nodes.

    Fused: the forward is a single pass of numpy calls and the backward is
    derived by hand over the cached activations. Bit-identical to
    lstm_step_composed (same operations in the same order).
    """
    x, h_prev, c_prev = as_node(x), as_node(h_prev), as_node(c_prev)
    _check_step_shapes(p, x, h_prev, c_prev)

    v = np.concatenate([h_prev.value, x.value])
    i = _sig(p.W_i.value @ v + p.b_i.value)
    f = _sig(p.W_f.value @ v + p.b_f.value)
    o = _sig(p.W_o.value @ v + p.b_o.value)
    g = np.tanh(p.W_c.value @ v + p.b_c.value)
    c = f * c_prev.value + i * g
    th = np.tanh(c)
    h = o * th

    parents = (p.W_i, p.W_f, p.W_o, p.W_c, p.b_i, p.b_f, p.b_o, p.b_c,
               x, h_prev, c_prev)
    K = h_prev.value.shape[0]

    def push(dc: Array, dzo: Array | None) -> None:
        # distribute a cell-state gradient (and optionally an output-gate
        # pre-activation gradient) to every input of the cell
        dzf = (dc * c_prev.value) * f * (1.0 - f)
        dzi = (dc * g) * i * (1.0 - i)
        dzc = (dc * i) * (1.0 - g * g)
        if p.W_i.requires_grad:
            p.W_i._accumulate(np.outer(dzi, v))
        if p.W_f.requires_grad:
            p.W_f._accumulate(np.outer(dzf, v))
        if p.W_c.requires_grad:
            p.W_c._accumulate(np.outer(dzc, v))
        if p.b_i.requires_grad:
            p.b_i._accumulate(dzi)
        if p.b_f.requires_grad:
            p.b_f._accumulate(dzf)
        if p.b_c.requires_grad:
            p.b_c._accumulate(dzc)
        dv = p.W_i.value.T @ dzi + p.W_f.value.T @ dzf + p.W_c.value.T @ dzc
        if dzo is not None:
            if p.W_o.requires_grad:
                p.W_o._accumulate(np.outer(dzo, v))
            if p.b_o.requires_grad:
                p.b_o._accumulate(dzo)
            dv += p.W_o.value.T @ dzo
        if h_prev.requires_grad:
            h_prev._accumulate(dv[:K])
        if x.requires_grad:
            x._accumulate(dv[K:])
        if c_prev.requires_grad:
            c_prev._accumulate(dc * f)

    def h_bwd(dh: Array) -> None:
        dzo = (dh * th) * o * (1.0 - o)
        push(dh * o * (1.0 - th * th), dzo)

    def c_bwd(dc: Array) -> None:
        push(dc, None)

    h_node = ad._result(h, parents, h_bwd)
    c_node = ad._result(c, parents, c_bwd)
    return h_node, c_node


def lstm_step_composed(p: LstmParams, x, h_prev, c_prev) -> tuple[Node, Node]:
    """Reference cell built from autodiff primitives; see lstm_step."""
    x, h_prev, c_prev = as_node(x), as_node(h_prev), as_node(c_prev)
    _check_step_shapes(p, x, h_prev, c_prev)
    v = ad.concat([h_prev, x])
    i = ad.sigmoid(ad.add(ad.matvec(p.W_i, v), p.b_i))
    f = ad.sigmoid(ad.add(ad.matvec(p.W_f, v), p.b_f))
    o = ad.sigmoid(ad.add(ad.matvec(p.W_o, v), p.b_o))
    g = ad.tanh(ad.add(ad.matvec(p.W_c, v), p.b_c))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


def lstm_forward(p: LstmParams, xs, h0=None, c0=None,
                 step: Callable = lstm_step) -> tuple[list[Node], Node, Node]:
    """Run a sequence through one direction. Returns (per-step h, h_T, c_T)."""
    xs = list(xs)
    if not xs:
        raise ShapeError("lstm_forward: empty sequence")
    K = p.hidden
    h = as_node(np.zeros(K)) if h0 is None else as_node(h0)
    c = as_node(np.zeros(K)) if c0 is None else as_node(c0)
    hs: list[Node] = []
    for x in xs:
        h, c = step(p, x, h, c)
        hs.append(h)
    return hs, h, c


def bilstm_forward(p: BiLstmParams, xs,
                   step: Callable = lstm_step) -> tuple[list[Node], Node]:
    """Bidirectional pass. Returns (per-step 2K outputs, final 2K state).

    Per-step output t is (forward h_t ++ backward h_t) with the backward
    stream re-reversed to original time order. The final state concatenates
    the two directions' own last states.
    """
    xs = list(xs)
    if p.fwd.hidden != p.bwd.hidden or p.fwd.input_dim != p.bwd.input_dim:
        raise ShapeError("bilstm_forward: direction shapes disagree")
    f_hs, f_last, _ = lstm_forward(p.fwd, xs, step=step)
    b_hs, b_last, _ = lstm_forward(p.bwd, list(reversed(xs)), step=step)
    b_hs = list(reversed(b_hs))
    steps = [ad.concat([hf, hb]) for hf, hb in zip(f_hs, b_hs)]
    final = ad.concat([f_last, b_last])
    return steps, final


def fc_forward(p: FcParams, x) -> Node:
    x = as_node(x)
    if x.value.shape != (p.in_dim,):
        raise ShapeError(
            f"fc_forward: input shape {x.value.shape} does not match ({p.in_dim},)")
    z = ad.add(ad.matvec(p.W, x), p.b)
    if p.activation == "linear":
        return z
    if p.activation == "relu":
        return ad.relu(z)
    raise ConfigError(f"unknown activation {p.activation!r}")


def mse_loss(pred, target) -> Node:
    """Mean squared error between two equal-length vectors (graph node)."""
    pred, target = as_node(pred), as_node(target)
    if pred.value.size != target.value.size:
        raise ShapeError(
            f"mse_loss: length mismatch {pred.value.size} vs {target.value.size}")
    return ad.vmean(ad.square(ad.sub(pred, target)))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam with bias correction. t counts completed steps."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def adam_update(state: AdamState, params: dict[str, Array],
                grads: dict[str, Array]) -> tuple[dict[str, Array], AdamState]:
    """One optimizer step. Pure: returns fresh params and a fresh state.

    Parameters absent from `params` (e.g. frozen groups) keep no moment
    entries and are untouched.
    """
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise ShapeError(f"adam_update: parameter/gradient name mismatch: {sorted(missing)}")
    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_p: dict[str, Array] = {}
    new_m: dict[str, Array] = {}
    new_v: dict[str, Array] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_update: {name}: grad shape {g.shape} vs param {p.shape}")
        m = state.beta1 * state.m.get(name, 0.0) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(name, 0.0) + (1.0 - state.beta2) * (g * g)
        m = np.asarray(m, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_p[name] = p - step
        new_m[name] = m
        new_v[name] = v
    carried_m = dict(state.m)
    carried_m.update(new_m)
    carried_v = dict(state.v)
    carried_v.update(new_v)
    return new_p, AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                            eps=state.eps, t=t, m=carried_m, v=carried_v)


# ---------------------------------------------------------------------------
# initialization


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, int],
                   fan_in: int, fan_out: int) -> Array:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def orthogonal(rng: np.random.Generator, k: int) -> Array:
    """Orthogonal k x k matrix from the QR of a Gaussian draw, sign-fixed."""
    a = rng.standard_normal((k, k))
    q, r = np.linalg.qr(a)
    d = np.diagonal(r)
    return q * np.where(d >= 0.0, 1.0, -1.0)


def init_lstm_params(input_dim: int, hidden: int,
                     rng: np.random.Generator) -> LstmParams:
    """Recurrent block orthogonal, input block Xavier-uniform, forget bias 1."""
    if input_dim < 1 or hidden < 1:
        raise ConfigError(f"init_lstm_params: bad dims input={input_dim} hidden={hidden}")

    def gate_w() -> Node:
        rec = orthogonal(rng, hidden)
        inp = xavier_uniform(rng, (hidden, input_dim), input_dim, hidden)
        return Node(np.concatenate([rec, inp], axis=1), requires_grad=True)

    W_i, W_f, W_o, W_c = gate_w(), gate_w(), gate_w(), gate_w()
    zeros = lambda: Node(np.zeros(hidden), requires_grad=True)
    b_f = Node(np.ones(hidden), requires_grad=True)
    return LstmParams(W_i=W_i, W_f=W_f, W_o=W_o, W_c=W_c,
                      b_i=zeros(), b_f=b_f, b_o=zeros(), b_c=zeros())


def init_bilstm_params(input_dim: int, hidden: int,
                       rng: np.random.Generator) -> BiLstmParams:
    return BiLstmParams(fwd=init_lstm_params(input_dim, hidden, rng),
                        bwd=init_lstm_params(input_dim, hidden, rng))


def init_fc_params(in_dim: int, out_dim: int, rng: np.random.Generator,
                   activation: str = "linear") -> FcParams:
    if activation not in ("linear", "relu"):
        raise ConfigError(f"unknown activation {activation!r}")
    W = Node(xavier_uniform(rng, (out_dim, in_dim), in_dim, out_dim),
             requires_grad=True)
    return FcParams(W=W, b=Node(np.zeros(out_dim), requires_grad=True),
                    activation=activation)


# ---------------------------------------------------------------------------
# parameter counting


def lstm_param_count(input_dim: int, hidden: int) -> int:
    """Trainable scalars in one direction: 4 gates of (K,(input+K)) plus bias."""
    return 4 * (hidden * (input_dim + hidden) + hidden)


def bilstm_param_count(input_dim: int, hidden: int) -> int:
    return 2 * lstm_param_count(input_dim, hidden)


def fc_param_count(in_dim: int, out_dim: int) -> int:
    return out_dim * in_dim + out_dim


def count_scalars(named: Iterable[tuple[str, Node]]) -> int:
    return sum(node.value.size for _, node in named)


def zero_grads(named: Iterable[tuple[str, Node]]) -> None:
    for _, node in named:
        node.zero_grad()


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_grad(f: Callable[[dict[str, Array]], float],
                     params: dict[str, Array], eps: float = 1e-5) -> dict[str, Array]:
    """Central-difference gradient of f at params, one coordinate at a time.

    f must read the arrays in the dict it is handed (they are perturbed in
    place and restored). Cost is 2 evaluations per scalar.
    """
    grads: dict[str, Array] = {}
    for name, arr in params.items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = f(params)
            flat[k] = orig - eps
            fm = f(params)
            flat[k] = orig
            gf[k] = (fp - fm) / (2.0 * eps)
        grads[name] = g
    return grads


def rel_error(a: Array, b: Array, floor: float = 1e-4) -> float:
    """Max elementwise |a-b| / max(|a|,|b|,floor).

    The floor turns the comparison into an absolute one for near-zero
    gradients, where a pure ratio only measures finite-difference noise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))


@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    max_rel_err: float
    worst_param: str

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def check_gradients(build_loss: Callable[[], Node], named: dict[str, Node],
                    eps: float = 1e-5,
                    mangle: Callable[[dict[str, Array]], None] | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients with the finite-difference oracle.

    build_loss must rebuild the scalar loss graph from the current values of
    the nodes in `named` each time it is called. `mangle` is a test hook
    applied to the analytic gradients before comparison (used to verify the
    checker itself catches injected faults).
    """
    zero_grads(named.items())
    loss = build_loss()
    backward(loss)
    analytic = {name: grad_of(node).copy() for name, node in named.items()}
    if mangle is not None:
        mangle(analytic)

    originals = {name: node.value for name, node in named.items()}
    work = {name: node.value.copy() for name, node in named.items()}
    for name, node in named.items():
        node.value = work[name]

    def probe(_: dict[str, Array]) -> float:
        with no_grad():
            return float(build_loss())

    try:
        numeric = finite_diff_grad(probe, work, eps=eps)
    finally:
        for name, node in named.items():
            node.value = originals[name]

    per_param = {name: rel_error(analytic[name], numeric[name]) for name in named}
    worst = max(per_param, key=per_param.get) if per_param else ""
    worst_err = per_param[worst] if per_param else 0.0
    return GradCheckReport(per_param=per_param, max_rel_err=worst_err,
                           worst_param=worst)
