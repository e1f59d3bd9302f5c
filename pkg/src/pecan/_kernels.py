"""Hot inner kernels, numba-jitted when available with exact numpy fallbacks."""

from __future__ import annotations

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _l1_scores_np(xt: np.ndarray, ct: np.ndarray) -> np.ndarray:
    # xt [n, d], ct [p, d] -> [p, n]
    return -np.abs(xt[None, :, :] - ct[:, None, :]).sum(axis=2)


if HAVE_NUMBA:

    @numba.njit(cache=True, fastmath=True)
    def _l1_scores_nb(xt, ct):  # pragma: no cover - exercised via wrapper
        n, d = xt.shape
        p = ct.shape[0]
        out = np.empty((p, n))
        for i in range(n):
            for m in range(p):
                acc = 0.0
                for r in range(d):
                    acc += abs(xt[i, r] - ct[m, r])
                out[m, i] = -acc
        return out


def l1_score_matrix(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Negated L1 distances between columns of x [d, n] and c [d, p].

    Returns scores [p, n]; score[m, i] = -sum_r |x[r, i] - c[r, m]|. Larger
    means closer, so argmax picks the nearest prototype.
    """
    xt = np.ascontiguousarray(x.T, dtype=np.float64)
    ct = np.ascontiguousarray(c.T, dtype=np.float64)
    if HAVE_NUMBA and x.shape[1] * c.shape[1] * x.shape[0] > 4096:
        return _l1_scores_nb(xt, ct)
    return _l1_scores_np(xt, ct)


def dedup_columns(x: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    """Exact duplicate-column detection for a [d, n] matrix.

    Returns (unique_col_indices, inverse) such that
    x[:, unique_col_indices][:, inverse] == x bitwise, or None when nothing
    is saved. Candidate groups come from a fixed random projection; a bitwise
    verification rejects the (measure-zero) chance of key collisions.
    """
    d, n = x.shape
    if n < 32:
        return None
    proj = np.random.RandomState(0x5EED).standard_normal(d)
    key = proj @ x
    _, uniq_idx, inverse = np.unique(key, return_index=True, return_inverse=True)
    if len(uniq_idx) > 0.9 * n:
        return None
    if not np.array_equal(x[:, uniq_idx][:, inverse], x):
        return None  # projection collision, give up rather than approximate
    return uniq_idx, inverse


def l1_surrogate_backward(
    x: np.ndarray,
    c: np.ndarray,
    g_scores: np.ndarray,
    a: float,
    chunk: int = 4096,
    need_gx: bool = True,
) -> tuple[np.ndarray | None, np.ndarray]:
    """Backward of L1 scores with tanh(a*(x - c)) standing in for sign.

    Given the upstream gradient on scores [p, n], returns (grad_x [d, n],
    grad_c [d, p]). score[m, i] = -sum_r |x[r, i] - c[r, m]|, so both
    partials carry the smoothed sign factor with opposite orientation:
    d score / d c = tanh(a*(x - c)), d score / d x = -tanh(a*(x - c)).

    The tanh tensor is contracted in float32: these are training gradients
    for a surrogate; the forward pass and all inference stay float64.
    """
    d, n = x.shape
    p = c.shape[1]
    x32 = x.astype(np.float32)
    c32 = c.astype(np.float32)
    g32 = g_scores.astype(np.float32)
    a32 = np.float32(a)
    grad_c = np.zeros((d, p), dtype=np.float32)
    grad_x = np.empty((d, n), dtype=np.float32) if need_gx else None
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        t = np.tanh(a32 * (x32[:, None, s:e] - c32[:, :, None]))  # [d, p, nc]
        grad_c += np.einsum("dpn,pn->dp", t, g32[:, s:e])
        if need_gx:
            grad_x[:, s:e] = -np.einsum("dpn,pn->dn", t, g32[:, s:e])
    return (grad_x.astype(np.float64) if need_gx else None), grad_c.astype(np.float64)


def l1_exact_backward(
    x: np.ndarray, c: np.ndarray, g_scores: np.ndarray, chunk: int = 4096, need_gx: bool = True
) -> tuple[np.ndarray | None, np.ndarray]:
    """Backward of L1 scores with the true sign factors, full float64.

    Matches central finite differences away from kinks; used by the relaxed
    gradient path and by gradcheck.
    """
    d, n = x.shape
    p = c.shape[1]
    grad_c = np.zeros((d, p))
    grad_x = np.empty((d, n)) if need_gx else None
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        t = np.sign(x[:, None, s:e] - c[:, :, None])
        grad_c += np.einsum("dpn,pn->dp", t, g_scores[:, s:e])
        if need_gx:
            grad_x[:, s:e] = -np.einsum("dpn,pn->dn", t, g_scores[:, s:e])
    return grad_x, grad_c
