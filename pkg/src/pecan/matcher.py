"""Prototype matching: soft attention, hard nearest-L1, straight-through relax."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._kernels import l1_score_matrix
from .tensor import ShapeError

METHODS = ("baseline", "pecan_a", "pecan_d")


@dataclass
class MatchConfig:
    """How a layer matches features to prototypes.

    tau is the softmax temperature (soft attention for pecan_a, the relaxed
    assignment for pecan_d). epoch/total_epochs drive the surrogate slope
    schedule of pecan_d training.
    """

    method: str
    tau: float = 1.0
    epoch: int = 0
    total_epochs: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.total_epochs < 1 or not 0 <= self.epoch <= self.total_epochs:
            raise ValueError(
                f"need 0 <= epoch <= total_epochs with total_epochs >= 1, "
                f"got epoch={self.epoch} total_epochs={self.total_epochs}"
            )


def softmax_columns(s: np.ndarray) -> np.ndarray:
    """Numerically stable softmax down axis 0 (per column)."""
    z = s - s.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _as_cols(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 1:
        return x[:, None], True
    if x.ndim == 2:
        return x, False
    raise ShapeError(f"expected a vector or column matrix, got shape {x.shape}")


def attention_scores(x: np.ndarray, c: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Soft assignment softmax(c^T x / tau).

    x is a single subvector [d] or columns [d, n]; c holds prototypes as
    columns [d, p]. Result matches x's arity: [p] or [p, n], columns summing
    to 1.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    cols, single = _as_cols(x)
    if c.ndim != 2 or c.shape[0] != cols.shape[0]:
        raise ShapeError(f"prototype matrix {c.shape} does not match features {x.shape}")
    k = softmax_columns((c.T @ cols) / tau)
    return k[:, 0] if single else k


def l1_scores(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Negated L1 distances, [p] or [p, n]; argmax is the nearest prototype."""
    cols, single = _as_cols(x)
    if c.ndim != 2 or c.shape[0] != cols.shape[0]:
        raise ShapeError(f"prototype matrix {c.shape} does not match features {x.shape}")
    s = l1_score_matrix(cols, c)
    return s[:, 0] if single else s


def hard_assign(scores: np.ndarray) -> np.ndarray | int:
    """Index of the max score per column; ties go to the lowest index."""
    cols, single = _as_cols(scores)
    idx = cols.argmax(axis=0)
    return int(idx[0]) if single else idx


def relaxed_assign(scores: np.ndarray, tau: float) -> np.ndarray:
    """softmax(scores / tau); sharpens toward one-hot as tau -> 0."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    cols, single = _as_cols(scores)
    k = softmax_columns(cols / tau)
    return k[:, 0] if single else k


def one_hot(idx: np.ndarray, p: int) -> np.ndarray:
    """Columns of the identity: [p, n] with out[idx[i], i] = 1."""
    idx = np.atleast_1d(idx)
    out = np.zeros((p, len(idx)))
    out[idx, np.arange(len(idx))] = 1.0
    return out


def ste_assign(scores: np.ndarray, tau: float) -> np.ndarray:
    """Straight-through assignment: hard one-hot forward.

    Forward value is one_hot(argmax scores). The matching backward contract
    is ste_assign_vjp: gradients are those of relaxed_assign(scores, tau),
    i.e. the hard quantization is transparent to the chain rule.
    """
    cols, single = _as_cols(scores)
    k = one_hot(cols.argmax(axis=0), cols.shape[0])
    return k[:, 0] if single else k


def ste_assign_vjp(scores: np.ndarray, tau: float, g: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of the straight-through assignment.

    By the straight-through contract this is exactly the softmax Jacobian of
    relaxed_assign at the given scores: with st = softmax(scores/tau),
    grad_scores = st * (g - <g, st>) / tau, columnwise.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    cols, single = _as_cols(scores)
    gc, _ = _as_cols(g)
    if gc.shape != cols.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match scores {scores.shape}")
    st = softmax_columns(cols / tau)
    out = st * (gc - (gc * st).sum(axis=0, keepdims=True)) / tau
    return out[:, 0] if single else out


def surrogate_slope(epoch: int, total_epochs: int) -> float:
    """Slope schedule a(e) = exp(4 e / E); 1 at the start, e^4 at the end."""
    if total_epochs < 1 or not 0 <= epoch <= total_epochs:
        raise ValueError(f"bad schedule point epoch={epoch} total_epochs={total_epochs}")
    return math.exp(4.0 * epoch / total_epochs)


def sign_grad(r: np.ndarray | float, epoch: int, total_epochs: int) -> np.ndarray | float:
    """Smoothed sign used in place of d|r|/dr: tanh(a(e) * r).

    Early in training the slope is gentle and gradients flow broadly; by the
    final epoch tanh(e^4 * r) is close to sign(r) except in a narrow band
    around zero.
    """
    a = surrogate_slope(epoch, total_epochs)
    return np.tanh(a * np.asarray(r, dtype=np.float64)) if isinstance(r, np.ndarray) else math.tanh(a * r)
