"""Prototype codebooks: grouped feature views and k-means initialization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64
from .tensor import ShapeError


@dataclass
class GroupedFeatures:
    """im2col columns split into D contiguous row blocks of width d.

    data has shape [D, d, n]: group j holds rows j*d .. (j+1)*d - 1 of the
    original column matrix.
    """

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"grouped features must be [D, d, n], got {self.data.shape}")

    @property
    def D(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    @property
    def n(self) -> int:
        return self.data.shape[2]


def split_groups(x: np.ndarray, D: int) -> GroupedFeatures:
    """Split a column matrix [D*d, n] into D groups of d consecutive rows."""
    if x.ndim != 2:
        raise ShapeError(f"split_groups expects a 2-d column matrix, got {x.shape}")
    rows, n = x.shape
    if D < 1 or rows % D != 0:
        raise ShapeError(f"cannot split {rows} rows into {D} equal groups")
    return GroupedFeatures(x.reshape(D, rows // D, n))


def merge_groups(gf: GroupedFeatures) -> np.ndarray:
    """Inverse of split_groups: [D, d, n] back to [D*d, n]."""
    return gf.data.reshape(gf.D * gf.d, gf.n)


class Codebook:
    """Per-group prototype matrices.

    Normally every group has the same prototype count p and the codebook is
    just a [D, d, p] tensor. Pruning can leave groups with different counts,
    so storage is a list of [d, p_j] arrays; stack() recovers the rectangular
    tensor and refuses when the counts are ragged.
    """

    def __init__(self, groups: list[np.ndarray]):
        if not groups:
            raise ShapeError("codebook needs at least one group")
        d = groups[0].shape[0]
        for j, g in enumerate(groups):
            if g.ndim != 2 or g.shape[0] != d:
                raise ShapeError(f"group {j} has shape {g.shape}, expected [{d}, p_j]")
            if g.shape[1] < 1:
                raise ShapeError(f"group {j} has no prototypes")
        self.groups = [np.asarray(g, dtype=np.float64) for g in groups]

    @classmethod
    def from_array(cls, data: np.ndarray) -> "Codebook":
        if data.ndim != 3:
            raise ShapeError(f"codebook tensor must be [D, d, p], got {data.shape}")
        return cls([data[j] for j in range(data.shape[0])])

    @property
    def D(self) -> int:
        return len(self.groups)

    @property
    def d(self) -> int:
        return self.groups[0].shape[0]

    @property
    def p_per_group(self) -> list[int]:
        return [g.shape[1] for g in self.groups]

    @property
    def uniform(self) -> bool:
        return len(set(self.p_per_group)) == 1

    @property
    def p(self) -> int:
        if not self.uniform:
            raise ShapeError(f"prototype counts are ragged: {self.p_per_group}")
        return self.groups[0].shape[1]

    def stack(self) -> np.ndarray:
        """Rectangular [D, d, p] view; only valid for uniform counts."""
        _ = self.p
        return np.stack(self.groups)


def kmeans_init(samples: np.ndarray, p: int, max_iters: int = 25, seed: int = 0) -> np.ndarray:
    """Cluster columns of samples [d, n] into p centers, squared Euclidean.

    k-means++ seeding driven by SplitMix64, then Lloyd iterations until
    assignments stop changing or max_iters is hit. A cluster that loses all
    members is reseeded to the sample farthest from its assigned center.

    Returns:
        Centers as columns, [d, p].
    """
    if samples.ndim != 2:
        raise ShapeError(f"kmeans samples must be [d, n], got {samples.shape}")
    d, n = samples.shape
    if n < 1 or p < 1:
        raise ShapeError(f"kmeans needs n >= 1 samples and p >= 1 centers, got n={n} p={p}")
    rng = SplitMix64(seed)
    pts = np.ascontiguousarray(samples.T, dtype=np.float64)  # [n, d]

    centers = np.empty((p, d))
    centers[0] = pts[rng.next_index(n)]
    best = ((pts - centers[0]) ** 2).sum(axis=1)
    for c in range(1, p):
        total = best.sum()
        if total > 0:
            cum = np.cumsum(best)
            idx = int(np.searchsorted(cum, rng.next_double() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = rng.next_index(n)
        centers[c] = pts[idx]
        best = np.minimum(best, ((pts - centers[c]) ** 2).sum(axis=1))

    pts_sq = (pts * pts).sum(axis=1)
    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iters):
        # ||x - c||^2 = ||x||^2 - 2 x.c + ||c||^2, clamped against fp dips
        d2 = pts_sq[:, None] - 2.0 * (pts @ centers.T) + (centers * centers).sum(axis=1)[None, :]
        np.maximum(d2, 0.0, out=d2)
        new_assign = d2.argmin(axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        mind2 = d2[np.arange(n), assign]
        taken: set[int] = set()
        for c in range(p):
            members = assign == c
            if members.any():
                centers[c] = pts[members].mean(axis=0)
            else:
                order = np.argsort(-mind2, kind="stable")
                far = next((int(i) for i in order if int(i) not in taken), None)
                if far is None:
                    # more empty clusters than samples: duplicates are unavoidable
                    far = int(order[0])
                taken.add(far)
                centers[c] = pts[far]
                assign[far] = c
    return np.ascontiguousarray(centers.T)


def init_codebook(features: GroupedFeatures, p: int, seed: int = 0, max_iters: int = 25) -> Codebook:
    """k-means each group of calibration columns; group j uses seed + j."""
    groups = [
        kmeans_init(features.data[j], p, max_iters=max_iters, seed=seed + j)
        for j in range(features.D)
    ]
    return Codebook(groups)
