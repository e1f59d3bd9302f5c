"""Dense tensor plumbing: conv geometry, im2col/fold, checked matmul."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


@dataclass(frozen=True)
class ConvGeometry:
    """Geometry of a 2-d convolution with square kernel.

    Output extents must come out integral: (h_in + 2*padding - k) has to be
    divisible by stride (same for width). Pooling does not use this class,
    it floors instead.
    """

    c_in: int
    h_in: int
    w_in: int
    k: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if min(self.c_in, self.h_in, self.w_in, self.k, self.stride) < 1:
            raise ShapeError(f"conv geometry fields must be positive, got {self}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        if self.k > self.h_in + 2 * self.padding or self.k > self.w_in + 2 * self.padding:
            raise ShapeError(f"kernel {self.k} exceeds padded input {self}")
        for extent in (self.h_in, self.w_in):
            if (extent + 2 * self.padding - self.k) % self.stride != 0:
                raise ShapeError(
                    f"non-integral output extent for {self}: "
                    f"({extent} + 2*{self.padding} - {self.k}) % {self.stride} != 0"
                )

    @property
    def h_out(self) -> int:
        return (self.h_in + 2 * self.padding - self.k) // self.stride + 1

    @property
    def w_out(self) -> int:
        return (self.w_in + 2 * self.padding - self.k) // self.stride + 1

    @property
    def n_cols(self) -> int:
        """Number of receptive fields, i.e. columns produced by im2col."""
        return self.h_out * self.w_out

    @property
    def rows(self) -> int:
        """Rows produced by im2col: c_in * k * k."""
        return self.c_in * self.k * self.k


def im2col(x: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Unfold an image into receptive-field columns.

    Column i holds the receptive field of output position i, outputs walked
    row-major. Within a column the rows group into c_in contiguous blocks of
    k*k values, each block row-major over the kernel window.

    Args:
        x: input image [c_in, h_in, w_in].
        geom: conv geometry matching x.

    Returns:
        Matrix [c_in * k * k, h_out * w_out].
    """
    if x.shape != (geom.c_in, geom.h_in, geom.w_in):
        raise ShapeError(f"im2col input {x.shape} does not match geometry {geom}")
    if geom.padding:
        x = np.pad(x, ((0, 0), (geom.padding, geom.padding), (geom.padding, geom.padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (geom.k, geom.k), axis=(1, 2))
    windows = windows[:, :: geom.stride, :: geom.stride]  # [c, h_out, w_out, k, k]
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(geom.rows, geom.n_cols)
    return np.ascontiguousarray(cols)


def _fold_targets(geom: ConvGeometry) -> np.ndarray:
    """Flat indices into the padded image for every (row, column) of im2col."""
    hp = geom.h_in + 2 * geom.padding
    wp = geom.w_in + 2 * geom.padding
    c = np.arange(geom.c_in)[:, None, None, None, None]
    ki = np.arange(geom.k)[None, :, None, None, None]
    kj = np.arange(geom.k)[None, None, :, None, None]
    oh = np.arange(geom.h_out)[None, None, None, :, None]
    ow = np.arange(geom.w_out)[None, None, None, None, :]
    tgt = c * (hp * wp) + (oh * geom.stride + ki) * wp + (ow * geom.stride + kj)
    return tgt.reshape(geom.rows, geom.n_cols)


def fold(cols: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Scatter-add columns back into an image; the adjoint of im2col.

    Overlapping receptive fields accumulate, so fold(im2col(x)) equals x
    times the per-pixel coverage count (obtainable as fold(im2col(ones))).

    Args:
        cols: matrix [c_in * k * k, h_out * w_out].
        geom: conv geometry the columns came from.

    Returns:
        Image [c_in, h_in, w_in]; padding rows/cols are cropped away.
    """
    if cols.shape != (geom.rows, geom.n_cols):
        raise ShapeError(f"fold input {cols.shape} does not match geometry {geom}")
    hp = geom.h_in + 2 * geom.padding
    wp = geom.w_in + 2 * geom.padding
    flat = np.zeros(geom.c_in * hp * wp, dtype=cols.dtype)
    np.add.at(flat, _fold_targets(geom).ravel(), cols.ravel())
    img = flat.reshape(geom.c_in, hp, wp)
    if geom.padding:
        img = img[:, geom.padding : geom.padding + geom.h_in, geom.padding : geom.padding + geom.w_in]
    return np.ascontiguousarray(img)


def im2col_batch(x: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """im2col over a batch [B, c, h, w], columns concatenated image-major.

    Column b * n_cols + i is column i of image b.
    """
    if x.ndim != 4 or x.shape[1:] != (geom.c_in, geom.h_in, geom.w_in):
        raise ShapeError(f"im2col_batch input {x.shape} does not match geometry {geom}")
    return np.concatenate([im2col(img, geom) for img in x], axis=1)


def fold_batch(cols: np.ndarray, geom: ConvGeometry, batch: int) -> np.ndarray:
    """Inverse layout of im2col_batch: scatter-add back to [B, c, h, w]."""
    n = geom.n_cols
    if cols.shape != (geom.rows, batch * n):
        raise ShapeError(f"fold_batch input {cols.shape} does not match {batch} x {geom}")
    return np.stack([fold(cols[:, b * n : (b + 1) * n], geom) for b in range(batch)])


def maxpool2d(x: np.ndarray, k: int = 2, stride: int = 2) -> np.ndarray:
    """Max pooling over [B, c, h, w] with floor semantics.

    Trailing rows/columns that do not fill a window are dropped, so an 11x11
    map pooled 2x2/2 comes out 5x5.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects [B, c, h, w], got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if k > h or k > w:
        raise ShapeError(f"pool window {k} exceeds input {x.shape}")
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return win.reshape(*win.shape[:4], k * k).max(axis=-1)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-d matrix product with an explicit inner-dimension check."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    return a @ b


def reshape_permute(t: np.ndarray, new_shape: tuple, axis_order: tuple | None = None) -> np.ndarray:
    """Reshape t to new_shape, then optionally permute axes.

    Element count must be preserved by the reshape. The main consumer turns a
    [c_out, D*d] filter matrix into [D, c_out, d] via new_shape=(c_out, D, d),
    axis_order=(1, 0, 2).
    """
    if int(np.prod(new_shape)) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}")
    out = t.reshape(new_shape)
    if axis_order is not None:
        if sorted(axis_order) != list(range(out.ndim)):
            raise ShapeError(f"axis_order {axis_order} is not a permutation of {out.ndim} axes")
        out = out.transpose(axis_order)
    return out
