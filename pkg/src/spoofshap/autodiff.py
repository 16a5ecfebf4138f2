"""Minimal reverse-mode differentiation engine on numpy arrays.

The engine supports exactly the primitives the two spoofing classifiers
need: strided valid-padding convolutions (1D and 2D), residual addition,
relu, global max pooling, affine layers, softmax and a weighted
cross-entropy loss.  Graphs are static: a topologically ordered list of
nodes with explicit parameter and input slots.  Evaluation is pure and
deterministic; gradient buffers are per-call.

Conventions:
  * conv1d data is (channels, length); conv2d data is (channels, h, w).
  * All convolutions use valid padding, so spatial size shrinks and
    variable-length inputs are handled without padding tricks.
  * `add` aligns branches of unequal spatial size by cropping trailing
    positions of the longer branch (both operands keep position 0
    aligned); channel counts must match exactly.
  * global max pooling breaks ties toward the lowest flattened index,
    which keeps gradients deterministic.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

OPS = (
    "input",
    "param",
    "conv1d",
    "conv2d",
    "add",
    "relu",
    "global_max_pool",
    "affine",
    "softmax",
)


class ShapeError(ValueError):
    """Raised when node inputs are inconsistent; message names the node."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive receives or produces non-finite values."""


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple
    attrs: dict = field(default_factory=dict)
    name: str = ""


class Graph:
    """Topologically ordered primitive applications.

    `param_ids` lists the parameter nodes in declaration order; parameter
    values are supplied to :func:`evaluate` as a list in the same order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.param_ids: list[int] = []
        self.param_shapes: list[tuple] = []
        self.input_id: Optional[int] = None
        self.output_id: Optional[int] = None

    # -- construction ------------------------------------------------

    def _push(self, node: Node) -> int:
        for i in node.inputs:
            if not (0 <= i < len(self.nodes)):
                raise ValueError(f"node {node.name!r}: input {i} not yet defined")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def input(self, name: str = "input") -> int:
        if self.input_id is not None:
            raise ValueError("graph already has an input node")
        self.input_id = self._push(Node("input", (), {}, name))
        return self.input_id

    def param(self, shape: Sequence[int], name: str) -> int:
        nid = self._push(Node("param", (), {"shape": tuple(shape)}, name))
        self.param_ids.append(nid)
        self.param_shapes.append(tuple(shape))
        return nid

    def conv1d(self, x: int, c_in: int, c_out: int, kernel: int, stride: int,
               name: str) -> int:
        w = self.param((c_out, c_in, kernel), f"{name}.w")
        b = self.param((c_out,), f"{name}.b")
        return self._push(Node("conv1d", (x, w, b), {"stride": stride}, name))

    def conv2d(self, x: int, c_in: int, c_out: int, kernel: int, stride: int,
               name: str) -> int:
        w = self.param((c_out, c_in, kernel, kernel), f"{name}.w")
        b = self.param((c_out,), f"{name}.b")
        return self._push(Node("conv2d", (x, w, b), {"stride": stride}, name))

    def add(self, a: int, b: int, name: str = "add") -> int:
        return self._push(Node("add", (a, b), {}, name))

    def relu(self, x: int, name: str = "relu") -> int:
        return self._push(Node("relu", (x,), {}, name))

    def global_max_pool(self, x: int, name: str = "gmp") -> int:
        return self._push(Node("global_max_pool", (x,), {}, name))

    def affine(self, x: int, d_in: int, d_out: int, name: str) -> int:
        w = self.param((d_out, d_in), f"{name}.w")
        b = self.param((d_out,), f"{name}.b")
        return self._push(Node("affine", (x, w, b), {}, name))

    def softmax(self, x: int, name: str = "softmax") -> int:
        return self._push(Node("softmax", (x,), {}, name))

    def set_output(self, nid: int) -> None:
        self.output_id = nid

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes)


# ---------------------------------------------------------------------------
# forward primitives
# ---------------------------------------------------------------------------

def _conv1d_fwd(x, w, b, stride, name):
    c_out, c_in, k = w.shape
    if x.ndim != 2 or x.shape[0] != c_in:
        raise ShapeError(
            f"node {name!r}: expected input ({c_in}, L), got {x.shape}")
    if x.shape[1] < k:
        raise ShapeError(
            f"node {name!r}: length {x.shape[1]} shorter than kernel {k}")
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)[:, ::stride, :]
    l_out = win.shape[1]
    win2 = np.ascontiguousarray(win.transpose(1, 0, 2)).reshape(l_out, c_in * k)
    out = win2 @ w.reshape(c_out, c_in * k).T
    out += b
    return out.T, win2


def _conv2d_fwd(x, w, b, stride, name):
    c_out, c_in, kh, kw = w.shape
    if x.ndim != 3 or x.shape[0] != c_in:
        raise ShapeError(
            f"node {name!r}: expected input ({c_in}, H, W), got {x.shape}")
    if x.shape[1] < kh or x.shape[2] < kw:
        raise ShapeError(
            f"node {name!r}: spatial size {x.shape[1:]} smaller than kernel "
            f"({kh}, {kw})")
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride, :, :]
    h_out, w_out = win.shape[1], win.shape[2]
    win2 = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4))
    win2 = win2.reshape(h_out * w_out, c_in * kh * kw)
    out = win2 @ w.reshape(c_out, -1).T
    out += b
    return np.ascontiguousarray(out.T.reshape(c_out, h_out, w_out)), win2


def _add_fwd(a, b, name):
    if a.ndim != b.ndim or a.shape[0] != b.shape[0]:
        raise ShapeError(
            f"node {name!r}: incompatible operands {a.shape} vs {b.shape}")
    spatial = tuple(min(sa, sb) for sa, sb in zip(a.shape[1:], b.shape[1:]))
    sl = (slice(None),) + tuple(slice(0, s) for s in spatial)
    return a[sl] + b[sl]


def _gmp_fwd(x, name):
    if x.ndim < 2:
        raise ShapeError(f"node {name!r}: need (channels, spatial...), got {x.shape}")
    flat = x.reshape(x.shape[0], -1)
    idx = np.argmax(flat, axis=1)  # first occurrence = lowest index tie-break
    return flat[np.arange(flat.shape[0]), idx], idx


def _affine_fwd(x, w, b, name):
    if x.ndim != 1 or x.shape[0] != w.shape[1]:
        raise ShapeError(
            f"node {name!r}: expected input ({w.shape[1]},), got {x.shape}")
    return w @ x + b


def softmax(z: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over a vector."""
    z = np.asarray(z)
    e = np.exp(z - np.max(z))
    return e / np.sum(e)


# ---------------------------------------------------------------------------
# evaluation and backprop
# ---------------------------------------------------------------------------

def _forward(graph: Graph, params, x, dtype=None):
    """Run the graph forward; returns (values, aux) lists indexed by node id."""
    if len(params) != len(graph.param_ids):
        raise ValueError(
            f"expected {len(graph.param_ids)} parameter tensors, got {len(params)}")
    values: list = [None] * len(graph.nodes)
    aux: list = [None] * len(graph.nodes)
    p_iter = iter(params)
    for nid, node in enumerate(graph.nodes):
        op = node.op
        if op == "input":
            v = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
        elif op == "param":
            p = next(p_iter)
            if tuple(p.shape) != node.attrs["shape"]:
                raise ShapeError(
                    f"node {node.name!r}: parameter shape {p.shape} != "
                    f"declared {node.attrs['shape']}")
            v = p.astype(dtype) if dtype is not None and p.dtype != dtype else p
        elif op == "conv1d":
            xi, wi, bi = node.inputs
            v, aux[nid] = _conv1d_fwd(values[xi], values[wi], values[bi],
                                      node.attrs["stride"], node.name)
        elif op == "conv2d":
            xi, wi, bi = node.inputs
            v, aux[nid] = _conv2d_fwd(values[xi], values[wi], values[bi],
                                      node.attrs["stride"], node.name)
        elif op == "add":
            v = _add_fwd(values[node.inputs[0]], values[node.inputs[1]], node.name)
        elif op == "relu":
            v = np.maximum(values[node.inputs[0]], 0)
        elif op == "global_max_pool":
            v, aux[nid] = _gmp_fwd(values[node.inputs[0]], node.name)
        elif op == "affine":
            xi, wi, bi = node.inputs
            v = _affine_fwd(values[xi], values[wi], values[bi], node.name)
        elif op == "softmax":
            v = softmax(values[node.inputs[0]])
        else:  # pragma: no cover - guarded by the builder
            raise ValueError(f"unknown op {op!r}")
        values[nid] = v
    return values, aux


def evaluate(graph: Graph, params, x, dtype=None) -> np.ndarray:
    """Deterministic forward pass; returns the output node's value."""
    if graph.output_id is None:
        raise ValueError("graph has no output node")
    values, _ = _forward(graph, params, x, dtype)
    return values[graph.output_id]


def _backward(graph: Graph, values, aux, seed, wrt="all"):
    """Reverse sweep from the output node seeded with `seed`.

    wrt: "all" computes parameter and input gradients; "input" skips the
    parameter-gradient GEMMs; "params" skips the stem's input gradient.
    """
    grads: list = [None] * len(graph.nodes)
    grads[graph.output_id] = np.asarray(seed, dtype=values[graph.output_id].dtype)
    need_params = wrt in ("all", "params")
    need_input = wrt in ("all", "input")

    def accum(nid, g):
        if grads[nid] is None:
            grads[nid] = g
        else:
            grads[nid] = grads[nid] + g

    for nid in range(len(graph.nodes) - 1, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        node = graph.nodes[nid]
        op = node.op
        if op in ("input", "param"):
            continue
        if op == "conv1d":
            xi, wi, bi = node.inputs
            x = values[xi]
            w = values[wi]
            win2 = aux[nid]
            c_out, c_in, k = w.shape
            stride = node.attrs["stride"]
            l_out = g.shape[1]
            if need_params:
                accum(wi, (g @ win2).reshape(c_out, c_in, k))
                accum(bi, g.sum(axis=1))
            if need_input or xi != graph.input_id:
                contrib = (w.reshape(c_out, -1).T @ g)  # (c_in*k, l_out)
                contrib = contrib.reshape(c_in, k, l_out)
                dx = np.zeros_like(x)
                for kk in range(k):
                    dx[:, kk:kk + l_out * stride:stride] += contrib[:, kk, :]
                accum(xi, dx)
        elif op == "conv2d":
            xi, wi, bi = node.inputs
            x = values[xi]
            w = values[wi]
            win2 = aux[nid]
            c_out, c_in, kh, kw = w.shape
            stride = node.attrs["stride"]
            h_out, w_out = g.shape[1], g.shape[2]
            g2 = g.reshape(c_out, -1)
            if need_params:
                accum(wi, (g2 @ win2).reshape(c_out, c_in, kh, kw))
                accum(bi, g2.sum(axis=1))
            if need_input or xi != graph.input_id:
                contrib = (w.reshape(c_out, -1).T @ g2)
                contrib = contrib.reshape(c_in, kh, kw, h_out, w_out)
                dx = np.zeros_like(x)
                for ih in range(kh):
                    for iw in range(kw):
                        dx[:, ih:ih + h_out * stride:stride,
                           iw:iw + w_out * stride:stride] += contrib[:, ih, iw]
                accum(xi, dx)
        elif op == "add":
            for src in node.inputs:
                full = np.zeros_like(values[src])
                sl = (slice(None),) + tuple(slice(0, s) for s in g.shape[1:])
                full[sl] = g
                accum(src, full)
        elif op == "relu":
            xi = node.inputs[0]
            accum(xi, g * (values[xi] > 0))
        elif op == "global_max_pool":
            xi = node.inputs[0]
            x = values[xi]
            idx = aux[nid]
            dx = np.zeros((x.shape[0], int(np.prod(x.shape[1:]))), dtype=x.dtype)
            dx[np.arange(x.shape[0]), idx] = g
            accum(xi, dx.reshape(x.shape))
        elif op == "affine":
            xi, wi, bi = node.inputs
            if need_params:
                accum(wi, np.outer(g, values[xi]))
                accum(bi, g.copy())
            if need_input or xi != graph.input_id:
                accum(xi, values[wi].T @ g)
        elif op == "softmax":
            xi = node.inputs[0]
            p = values[nid]
            accum(xi, p * (g - np.dot(g, p)))

    param_grads = None
    if need_params:
        param_grads = []
        for pid, shape in zip(graph.param_ids, graph.param_shapes):
            gp = grads[pid]
            if gp is None:
                gp = np.zeros(shape, dtype=values[graph.output_id].dtype)
            param_grads.append(gp)
    input_grad = grads[graph.input_id] if need_input else None
    if need_input and input_grad is None:
        input_grad = np.zeros_like(values[graph.input_id])
    return param_grads, input_grad


def gradients(graph: Graph, params, x, output_index: int, dtype=None, wrt="all"):
    """Exact reverse-mode derivatives of output[output_index].

    Returns (param_grads, input_grad); either entry is None when excluded
    by `wrt`.  Max-pool ties are broken toward the lowest index.
    """
    values, aux = _forward(graph, params, x, dtype)
    out = values[graph.output_id]
    if out.ndim != 1:
        raise ValueError("output node must produce a vector")
    if not (0 <= output_index < out.shape[0]):
        raise ValueError(f"output_index {output_index} out of range {out.shape}")
    seed = np.zeros_like(out)
    seed[output_index] = 1.0
    return _backward(graph, values, aux, seed, wrt)


def backward_from_output(graph: Graph, params, x, seed, dtype=None, wrt="all"):
    """Backprop an arbitrary adjoint seed at the output node.

    Used for losses and probability targets whose derivative w.r.t. the
    output vector is computed outside the graph.
    """
    values, aux = _forward(graph, params, x, dtype)
    param_grads, input_grad = _backward(graph, values, aux, seed, wrt)
    return values[graph.output_id], param_grads, input_grad


# ---------------------------------------------------------------------------
# weighted cross-entropy primitive
# ---------------------------------------------------------------------------

def weighted_cross_entropy(logits, label: int, weights) -> float:
    """loss = -weights[label] * log(softmax(logits)[label])."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("non-finite logits in weighted_cross_entropy")
    w = float(weights[label])
    if w <= 0 or any(float(wi) <= 0 for wi in weights):
        raise ValueError("class weights must be positive")
    zmax = np.max(z)
    logsumexp = zmax + np.log(np.sum(np.exp(z - zmax)))
    return -w * (z[label] - logsumexp)


def weighted_cross_entropy_grad(logits, label: int, weights) -> np.ndarray:
    """d loss / d logits = weights[label] * (softmax(logits) - onehot(label))."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("non-finite logits in weighted_cross_entropy")
    p = softmax(z)
    p[label] -= 1.0
    return float(weights[label]) * p


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def _activation_signature(graph: Graph, values, aux):
    """Kink pattern of the piecewise-linear ops: relu signs and argmax picks."""
    sig = []
    for nid, node in enumerate(graph.nodes):
        if node.op == "relu":
            sig.append((values[graph.nodes[nid].inputs[0]] > 0).tobytes())
        elif node.op == "global_max_pool":
            sig.append(aux[nid].tobytes())
    return tuple(sig)


def finite_difference_check(graph: Graph, params, x, eps: float = 1e-5,
                            output_index: int = 0, coords=None, rng=None):
    """Compare analytic gradients with central finite differences.

    All evaluation is done in double precision.  Coordinates whose
    perturbation flips a relu sign or a max-pool argmax (the documented
    nondifferentiable points) are excluded.  Returns the max relative
    error over checked coordinates, normalized by max(1, |analytic|).

    coords: optional number of randomly chosen parameter coordinates to
    check per tensor (all input coordinates are always checked); None
    checks everything.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params64 = [np.asarray(p, dtype=np.float64) for p in params]
    x64 = np.asarray(x, dtype=np.float64)
    pg, xg = gradients(graph, params64, x64, output_index)

    base_vals, base_aux = _forward(graph, params64, x64)
    base_sig = _activation_signature(graph, base_vals, base_aux)

    def f_and_sig(ps, xv):
        vals, aux = _forward(graph, ps, xv)
        return (float(vals[graph.output_id][output_index]),
                _activation_signature(graph, vals, aux))

    worst = 0.0
    rng = np.random.default_rng(0) if rng is None else rng

    def check_coord(get_plus, get_minus, analytic):
        nonlocal worst
        (fp, sp) = get_plus()
        (fm, sm) = get_minus()
        if sp != base_sig or sm != base_sig:
            return  # crossed a kink; finite difference is invalid here
        numeric = (fp - fm) / (2 * eps)
        err = abs(numeric - analytic) / max(1.0, abs(analytic))
        worst = max(worst, err)

    for t, p in enumerate(params64):
        flat = p.reshape(-1)
        n = flat.size
        if coords is None or coords >= n:
            picks = range(n)
        else:
            picks = rng.choice(n, size=coords, replace=False)
        ag = pg[t].reshape(-1)
        for i in picks:
            orig = flat[i]

            def plus(i=i, t=t, orig=orig):
                flat = params64[t].reshape(-1)
                flat[i] = orig + eps
                r = f_and_sig(params64, x64)
                flat[i] = orig
                return r

            def minus(i=i, t=t, orig=orig):
                flat = params64[t].reshape(-1)
                flat[i] = orig - eps
                r = f_and_sig(params64, x64)
                flat[i] = orig
                return r

            check_coord(plus, minus, float(ag[i]))

    xflat = x64.reshape(-1)
    agx = xg.reshape(-1)
    for i in range(xflat.size):
        orig = xflat[i]

        def plus(i=i, orig=orig):
            xflat[i] = orig + eps
            r = f_and_sig(params64, x64)
            xflat[i] = orig
            return r

        def minus(i=i, orig=orig):
            xflat[i] = orig - eps
            r = f_and_sig(params64, x64)
            xflat[i] = orig
            return r

        check_coord(plus, minus, float(agx[i]))

    return worst
