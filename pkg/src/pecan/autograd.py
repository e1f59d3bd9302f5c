"""Reverse-mode autodiff over numpy arrays, sized for this network family.

Nodes hold float64 values; each op wires a closure that maps the output
gradient to parent gradients. Gradients are only materialized along paths
that end in a parameter (needs flags are propagated at graph build time).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from ._kernels import dedup_columns, l1_exact_backward, l1_surrogate_backward
from .matcher import l1_scores, softmax_columns, ste_assign_vjp
from .tensor import ShapeError


class Node:
    __slots__ = ("value", "grad", "parents", "_backward", "needs")

    def __init__(self, value, parents=(), backward=None, needs=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward
        self.needs = needs

    @property
    def shape(self):
        return self.value.shape


def param(value) -> Node:
    """A trainable leaf; backward() leaves its gradient in .grad."""
    return Node(value, needs=True)


def const(value) -> Node:
    """A non-trainable leaf; no gradient is computed for it."""
    return Node(value)


def _op(value, parents, backward) -> Node:
    return Node(value, parents, backward, needs=any(p.needs for p in parents))


def backward(loss: Node):
    """Accumulate gradients of a scalar loss into every needing node."""
    if loss.value.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    topo: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.needs:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))
    loss.grad = np.ones(())
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if g is None or not parent.needs:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


def matmul(a: Node, b: Node) -> Node:
    value = T.matmul(a.value, b.value)

    def back(g):
        ga = g @ b.value.T if a.needs else None
        gb = a.value.T @ g if b.needs else None
        return ga, gb

    return _op(value, (a, b), back)


def add_bias(x: Node, b: Node) -> Node:
    """x [c_out, n] plus a per-row bias [c_out]."""
    if b.value.ndim != 1 or b.value.shape[0] != x.value.shape[0]:
        raise ShapeError(f"bias {b.value.shape} does not match rows of {x.value.shape}")
    value = x.value + b.value[:, None]

    def back(g):
        return (g if x.needs else None), (g.sum(axis=1) if b.needs else None)

    return _op(value, (x, b), back)


def relu(x: Node) -> Node:
    mask = x.value > 0

    def back(g):
        return (g * mask,)

    return _op(np.maximum(x.value, 0.0), (x,), back)


def reshape(x: Node, shape: tuple) -> Node:
    old = x.value.shape

    def back(g):
        return (g.reshape(old),)

    return _op(x.value.reshape(shape), (x,), back)


def transpose(x: Node, axes: tuple) -> Node:
    inverse = tuple(np.argsort(axes))

    def back(g):
        return (g.transpose(inverse),)

    return _op(x.value.transpose(axes), (x,), back)


def conv_cols(x: Node, geom: T.ConvGeometry) -> Node:
    """im2col over a batch node [B, c, h, w]; backward is fold."""
    batch = x.value.shape[0]
    value = T.im2col_batch(x.value, geom)

    def back(g):
        return (T.fold_batch(g, geom, batch),)

    return _op(value, (x,), back)


def cols_to_maps(x: Node, batch: int, c_out: int, h: int, w: int) -> Node:
    """[c_out, B*n] columns (image-major) back to feature maps [B, c_out, h, w]."""
    n = h * w
    value = x.value.reshape(c_out, batch, n).transpose(1, 0, 2).reshape(batch, c_out, h, w)

    def back(g):
        return (g.reshape(batch, c_out, n).transpose(1, 0, 2).reshape(c_out, batch * n),)

    return _op(value, (x,), back)


def maxpool(x: Node, k: int = 2, stride: int = 2) -> Node:
    """Max pooling with floor semantics; gradient goes to the first max."""
    b, c, h, w = x.value.shape
    win = np.lib.stride_tricks.sliding_window_view(x.value, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(b, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)  # ties resolve to the first (row-major) element
    value = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros_like(x.value)
        bi, ci, ohi, owi = np.indices(arg.shape)
        hi = ohi * stride + arg // k
        wi = owi * stride + arg % k
        np.add.at(gx, (bi, ci, hi, wi), g)
        return (gx,)

    return _op(value, (x,), back)


def softmax_cross_entropy(logits: Node, labels: np.ndarray) -> Node:
    """Mean cross-entropy of [B, classes] logits against integer labels."""
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.value.shape[0]
    value = -logp[np.arange(b), labels].mean()

    def back(g):
        soft = np.exp(logp)
        soft[np.arange(b), labels] -= 1.0
        return (g * soft / b,)

    return _op(value, (logits,), back)


def _grouped(x: np.ndarray, D: int) -> np.ndarray:
    rows, n = x.shape
    return x.reshape(D, rows // D, n)


def pecan_substitute(
    cols: Node,
    protos: Node,
    method: str,
    tau: float,
    slope_a: float = 1.0,
    grad_mode: str = "ste_tanh",
) -> Node:
    """Replace each column-group subvector by its codebook reconstruction.

    cols is [D*d, n]; protos [D, d, p]. For "pecan_a" the reconstruction is
    the attention blend C @ softmax(C^T x / tau) with its exact gradient.
    For "pecan_d":

    - grad_mode "ste_tanh" (the training path): hard nearest-L1 forward,
      straight-through softmax(-dist/tau) backward, with tanh(slope_a * r)
      smoothing the sign factors of the distance derivative on both the
      prototype and the feature side.
    - grad_mode "relaxed_exact": soft forward C @ softmax(-dist/tau) with
      its exact analytic gradient (true sign factors), the path that central
      finite differences can validate.
    """
    if method not in ("pecan_a", "pecan_d"):
        raise ValueError(f"pecan_substitute got method {method!r}")
    if grad_mode not in ("ste_tanh", "relaxed_exact"):
        raise ValueError(f"unknown grad_mode {grad_mode!r}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if protos.value.ndim != 3:
        raise ShapeError(f"prototypes must be [D, d, p], got {protos.value.shape}")
    D, d, p = protos.value.shape
    if cols.value.shape[0] != D * d:
        raise ShapeError(f"columns have {cols.value.shape[0]} rows, prototypes need {D * d}")
    xg = _grouped(cols.value, D)  # [D, d, n]
    n = xg.shape[2]
    c = protos.value

    if method == "pecan_a":
        scores = np.einsum("jdp,jdn->jpn", c, xg)
        k = np.empty((D, p, n))
        for j in range(D):
            k[j] = softmax_columns(scores[j] / tau)
        value = np.einsum("jdp,jpn->jdn", c, k).reshape(D * d, n)

        def back_a(g):
            gg = _grouped(g, D)  # [D, d, n]
            gk = np.einsum("jdp,jdn->jpn", c, gg)
            gs = k * (gk - (gk * k).sum(axis=1, keepdims=True)) / tau
            gc = np.einsum("jdn,jpn->jdp", gg, k) + np.einsum("jdn,jpn->jdp", xg, gs)
            gx = np.einsum("jdp,jpn->jdn", c, gs) if cols.needs else None
            return (gx.reshape(D * d, n) if gx is not None else None), (gc if protos.needs else None)

        return _op(value, (cols, protos), back_a)

    # pecan_d: one dedup pass serves forward scores and the surrogate backward
    dedup = dedup_columns(cols.value) if grad_mode == "ste_tanh" else None
    scores = np.empty((D, p, n))
    uniq_scores = None
    if dedup is not None:
        uniq, inverse = dedup
        uniq_scores = np.empty((D, p, len(uniq)))
        for j in range(D):
            uniq_scores[j] = l1_scores(xg[j][:, uniq], c[j])
            scores[j] = uniq_scores[j][:, inverse]
    else:
        for j in range(D):
            scores[j] = l1_scores(xg[j], c[j])

    if grad_mode == "relaxed_exact":
        k = np.empty((D, p, n))
        for j in range(D):
            k[j] = softmax_columns(scores[j] / tau)
        value = np.einsum("jdp,jpn->jdn", c, k).reshape(D * d, n)

        def back_relaxed(g):
            gg = _grouped(g, D)
            gc = np.zeros_like(c) if protos.needs else None
            gx = np.zeros_like(xg) if cols.needs else None
            for j in range(D):
                gk = c[j].T @ gg[j]
                gs = ste_assign_vjp(scores[j], tau, gk)
                gxj, gcj = l1_exact_backward(xg[j], c[j], gs, need_gx=cols.needs)
                if gc is not None:
                    gc[j] = gg[j] @ k[j].T + gcj
                if gx is not None:
                    gx[j] = gxj
            return (gx.reshape(D * d, n) if gx is not None else None), gc

        return _op(value, (cols, protos), back_relaxed)

    idx = scores.argmax(axis=1)  # [D, n], ties to the lowest index
    value = np.take_along_axis(c, idx[:, None, :], axis=2).reshape(D * d, n)

    def back_ste(g):
        gg = _grouped(g, D)
        gc = np.zeros_like(c) if protos.needs else None
        gx = np.zeros_like(xg) if cols.needs else None
        # Folding duplicate columns is exact for the prototype gradient (the
        # score gradient is linear in the upstream blend gradient at fixed
        # scores) but not for per-column feature gradients, so it only kicks
        # in when the input needs no gradient.
        fold_dups = dedup is not None and not cols.needs
        for j in range(D):
            gk = c[j].T @ gg[j]  # [p, n]
            if fold_dups:
                uniq, inverse = dedup
                gk_u = np.zeros((p, len(uniq)))
                np.add.at(gk_u.T, inverse, gk.T)
                gs_u = ste_assign_vjp(uniq_scores[j], tau, gk_u)
                gxj, gcj = l1_surrogate_backward(xg[j][:, uniq], c[j], gs_u, slope_a, need_gx=False)
            else:
                gs = ste_assign_vjp(scores[j], tau, gk)
                gxj, gcj = l1_surrogate_backward(xg[j], c[j], gs, slope_a, need_gx=cols.needs)
            if gc is not None:
                np.add.at(gc[j].T, idx[j], gg[j].T)  # direct C @ K path, K one-hot
                gc[j] += gcj
            if gx is not None:
                gx[j] = gxj
        return (gx.reshape(D * d, n) if gx is not None else None), gc

    return _op(value, (cols, protos), back_ste)


def numerical_grad(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar f at x, one element at a time."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = f(x)
        flat[i] = keep - eps
        lo = f(x)
        flat[i] = keep
        gf[i] = (hi - lo) / (2 * eps)
    return g
