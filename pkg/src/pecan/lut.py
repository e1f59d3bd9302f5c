"""Lookup-table engine: offline table build, audited inference, usage, pruning.

The runtime audit counts additions and multiplications from the actual
operand shapes of every counted kernel call, which keeps it independent of
the closed-form cost model. Counting conventions, applied uniformly:

- a dot product of length d costs d adds and d muls (accumulators start at
  zero and every term is accumulated);
- an L1 distance over d elements costs 2*d adds (subtract, accumulate);
  taking absolute values is free;
- argmax comparisons, exp, divisions and softmax normalization are free;
- bias additions, ReLU and pooling are performed but never counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codebook import Codebook, GroupedFeatures, split_groups
from .matcher import hard_assign, l1_scores, softmax_columns
from .network import LayerSpec, NetworkSpec
from .tensor import ShapeError, im2col_batch, maxpool2d, reshape_permute


class OpCounter:
    """Monotone tally of runtime additions and multiplications."""

    def __init__(self):
        self.adds = 0
        self.muls = 0

    def count(self, adds: int = 0, muls: int = 0):
        if adds < 0 or muls < 0:
            raise ValueError(f"op counts cannot decrease: adds={adds} muls={muls}")
        self.adds += int(adds)
        self.muls += int(muls)

    @property
    def total(self) -> int:
        return self.adds + self.muls

    def __repr__(self):
        return f"OpCounter(adds={self.adds}, muls={self.muls})"


def audit(run) -> OpCounter:
    """Run a closure against a fresh counter and hand the tally back.

    Counts reflect exactly the columns presented: audit a single image (or a
    single fc column) to get per-sample figures.
    """
    counter = OpCounter()
    run(counter)
    return counter


class LookupTable:
    """Per-group tables of prototype responses, [c_out, p_j] each.

    Group j of the table is W1[j] @ C1[j]: every column holds the layer
    output this group contributes when its subvector snaps to that
    prototype.
    """

    def __init__(self, groups: list[np.ndarray]):
        if not groups:
            raise ShapeError("lookup table needs at least one group")
        c_out = groups[0].shape[0]
        for j, g in enumerate(groups):
            if g.ndim != 2 or g.shape[0] != c_out:
                raise ShapeError(f"table group {j} has shape {g.shape}, expected [{c_out}, p_j]")
        self.groups = [np.asarray(g, dtype=np.float64) for g in groups]

    @property
    def D(self) -> int:
        return len(self.groups)

    @property
    def c_out(self) -> int:
        return self.groups[0].shape[0]

    @property
    def p_per_group(self) -> list[int]:
        return [g.shape[1] for g in self.groups]

    def stack(self) -> np.ndarray:
        if len(set(self.p_per_group)) != 1:
            raise ShapeError(f"table prototype counts are ragged: {self.p_per_group}")
        return np.stack(self.groups)


def build_lut(weights: np.ndarray, cb: Codebook) -> LookupTable:
    """Precompute prototype responses: group j gets W1[j] @ C1[j].

    weights is the [c_out, D*d] filter matrix (conv filters already
    unrolled). The reshape/permute view W1 [D, c_out, d] pairs each weight
    slice with its codebook group. This is offline work; none of it counts
    toward inference cost.
    """
    if weights.ndim != 2:
        raise ShapeError(f"weights must be [c_out, D*d], got {weights.shape}")
    c_out, rows = weights.shape
    if rows != cb.D * cb.d:
        raise ShapeError(f"weights width {rows} does not match codebook D*d = {cb.D}*{cb.d}")
    w1 = reshape_permute(weights, (c_out, cb.D, cb.d), (1, 0, 2))
    return LookupTable([w1[j] @ cb.groups[j] for j in range(cb.D)])


def lut_deviation(lut: LookupTable, weights: np.ndarray, cb: Codebook) -> float:
    """Max absolute deviation of a table from a fresh rebuild."""
    fresh = build_lut(weights, cb)
    return max(
        float(np.abs(a - b).max()) for a, b in zip(lut.groups, fresh.groups)
    )


@dataclass
class UsageHistogram:
    """How often each prototype won a hard assignment, per group."""

    counts: list[np.ndarray]

    @classmethod
    def zeros(cls, p_per_group: list[int]) -> "UsageHistogram":
        return cls([np.zeros(p, dtype=np.int64) for p in p_per_group])

    def add(self, group: int, binned: np.ndarray):
        self.counts[group] += binned

    @property
    def D(self) -> int:
        return len(self.counts)

    @property
    def n_assigned(self) -> int:
        """Columns assigned so far (identical across groups by construction)."""
        return int(self.counts[0].sum())

    def zero_count(self) -> int:
        return sum(int((c == 0).sum()) for c in self.counts)

    def stack(self) -> np.ndarray:
        if len({len(c) for c in self.counts}) != 1:
            raise ShapeError("histogram prototype counts are ragged")
        return np.stack(self.counts)


def _check_layer_shapes(feats: GroupedFeatures, cb: Codebook, lut: LookupTable):
    if cb.D != feats.D or lut.D != feats.D:
        raise ShapeError(f"group counts disagree: features {feats.D}, codebook {cb.D}, table {lut.D}")
    if cb.d != feats.d:
        raise ShapeError(f"group width disagrees: features {feats.d}, codebook {cb.d}")
    if cb.p_per_group != lut.p_per_group:
        raise ShapeError(f"prototype counts disagree: codebook {cb.p_per_group}, table {lut.p_per_group}")


def infer_d(
    feats: GroupedFeatures,
    cb: Codebook,
    lut: LookupTable,
    counter: OpCounter | None = None,
    usage: UsageHistogram | None = None,
) -> np.ndarray:
    """Multiplier-free inference: nearest-L1 prototype, then table lookup.

    Per column and group: compute p L1 distances (2*p*d adds), take the
    closest prototype, and accumulate that group's table column (c_out
    adds). No multiplications anywhere on this path.
    """
    _check_layer_shapes(feats, cb, lut)
    n = feats.n
    out = np.zeros((lut.c_out, n))
    for j in range(feats.D):
        scores = l1_scores(feats.data[j], cb.groups[j])  # [p_j, n]
        if counter is not None:
            counter.count(adds=2 * cb.groups[j].shape[1] * cb.d * n)
        idx = np.atleast_1d(hard_assign(scores))
        out += lut.groups[j][:, idx]
        if counter is not None:
            counter.count(adds=lut.c_out * n)
        if usage is not None:
            usage.add(j, np.bincount(idx, minlength=cb.groups[j].shape[1]))
    return out


def infer_a(
    feats: GroupedFeatures,
    cb: Codebook,
    lut: LookupTable,
    tau: float = 1.0,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """Soft-attention inference: blend table columns by softmax(C^T x / tau).

    Per column and group: p*d multiply-accumulates for the scores plus
    p*c_out for the blend. The blend and the cross-group sum share one
    zero-initialized accumulator, so no extra adds appear beyond the MACs.
    Softmax itself (exp, normalization) is free by convention.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    _check_layer_shapes(feats, cb, lut)
    n = feats.n
    out = np.zeros((lut.c_out, n))
    for j in range(feats.D):
        p_j = cb.groups[j].shape[1]
        scores = cb.groups[j].T @ feats.data[j]  # [p_j, n]
        if counter is not None:
            counter.count(adds=p_j * cb.d * n, muls=p_j * cb.d * n)
        k = softmax_columns(scores / tau)
        out += lut.groups[j] @ k
        if counter is not None:
            counter.count(adds=lut.c_out * p_j * n, muls=lut.c_out * p_j * n)
    return out


def usage_histogram(feats: GroupedFeatures, cb: Codebook) -> UsageHistogram:
    """Hard-assignment usage counts over a calibration batch of columns."""
    hist = UsageHistogram.zeros(cb.p_per_group)
    for j in range(feats.D):
        idx = np.atleast_1d(hard_assign(l1_scores(feats.data[j], cb.groups[j])))
        hist.add(j, np.bincount(idx, minlength=cb.groups[j].shape[1]))
    return hist


def prune_unused(
    cb: Codebook, lut: LookupTable, hist: UsageHistogram
) -> tuple[Codebook, LookupTable, list[np.ndarray]]:
    """Drop prototypes (and their table columns) that never won an assignment.

    Returns the pruned codebook, the pruned table, and per-group remaps:
    remap[j][m] is the new index of old prototype m, or -1 if removed. A
    group whose histogram is entirely zero keeps its single most-used (here:
    lowest-index) prototype rather than going empty.
    """
    if cb.p_per_group != [len(c) for c in hist.counts]:
        raise ShapeError(f"histogram sizes {[len(c) for c in hist.counts]} do not match codebook {cb.p_per_group}")
    new_cb, new_lut, remaps = [], [], []
    for j in range(cb.D):
        keep = hist.counts[j] > 0
        if not keep.any():
            keep = np.zeros_like(keep)
            keep[int(hist.counts[j].argmax())] = True
        kept_idx = np.flatnonzero(keep)
        remap = np.full(len(keep), -1, dtype=np.int64)
        remap[kept_idx] = np.arange(len(kept_idx))
        new_cb.append(cb.groups[j][:, kept_idx])
        new_lut.append(lut.groups[j][:, kept_idx])
        remaps.append(remap)
    return Codebook(new_cb), LookupTable(new_lut), remaps


@dataclass
class Model:
    """A network spec plus its concrete parameters.

    params maps "<layer>.weight" / "<layer>.bias" to float64 arrays (conv
    weights already unrolled to [c_out, c_in*k*k]). codebooks holds one
    Codebook per pecan layer. luts caches derived tables; build_luts
    (re)derives them all.
    """

    spec: NetworkSpec
    params: dict[str, np.ndarray]
    codebooks: dict[str, Codebook] = field(default_factory=dict)
    luts: dict[str, LookupTable] = field(default_factory=dict)

    def lut_for(self, layer: LayerSpec) -> LookupTable:
        if layer.name not in self.luts:
            self.luts[layer.name] = build_lut(self.params[f"{layer.name}.weight"], self.codebooks[layer.name])
        return self.luts[layer.name]

    def build_luts(self):
        for ly in self.spec.param_layers():
            if ly.method != "baseline":
                self.luts[ly.name] = build_lut(self.params[f"{ly.name}.weight"], self.codebooks[ly.name])


def _param_layer_forward(
    ly: LayerSpec,
    cols: np.ndarray,
    model: Model,
    counter: OpCounter | None,
    usage: dict[str, UsageHistogram] | None,
) -> np.ndarray:
    w = model.params[f"{ly.name}.weight"]
    b = model.params[f"{ly.name}.bias"]
    if ly.method == "baseline":
        out = w @ cols
        if counter is not None:
            counter.count(adds=w.shape[0] * w.shape[1] * cols.shape[1], muls=w.shape[0] * w.shape[1] * cols.shape[1])
    else:
        feats = split_groups(cols, ly.D)
        cb = model.codebooks[ly.name]
        table = model.lut_for(ly)
        if ly.method == "pecan_d":
            hist = None
            if usage is not None:
                hist = usage.setdefault(ly.name, UsageHistogram.zeros(cb.p_per_group))
            out = infer_d(feats, cb, table, counter=counter, usage=hist)
        else:
            out = infer_a(feats, cb, table, tau=ly.tau, counter=counter)
    return out + b[:, None]  # bias is uncounted by convention


def run_network(
    model: Model,
    x: np.ndarray,
    counter: OpCounter | None = None,
    usage: dict[str, UsageHistogram] | None = None,
) -> np.ndarray:
    """Forward a batch through the lookup-table engine.

    x is [B, c, h, w] (or [B, features] for a net that starts with fc).
    Returns logits [B, out_features]. Pass a counter to audit arithmetic;
    audit one image at a time for per-sample counts. Pass a dict as usage to
    collect per-layer hard-assignment histograms (pecan_d layers only).
    """
    spec = model.spec
    if not spec.shapes:
        spec.validate()
    B = x.shape[0]
    cur = x.astype(np.float64, copy=False)
    for ly in spec.layers:
        if ly.kind == "relu":
            cur = np.maximum(cur, 0.0)
        elif ly.kind == "maxpool":
            cur = maxpool2d(cur, ly.k, ly.stride)
        elif ly.kind == "conv":
            geom = spec.conv_geometry(ly)
            cols = im2col_batch(cur, geom)
            out = _param_layer_forward(ly, cols, model, counter, usage)
            cur = out.reshape(ly.c_out, B, geom.n_cols).transpose(1, 0, 2).reshape(
                B, ly.c_out, geom.h_out, geom.w_out
            )
        else:  # fc
            if cur.ndim > 2:
                cur = cur.reshape(B, -1)
            out = _param_layer_forward(ly, cur.T, model, counter, usage)
            cur = out.T
    return cur


def collect_usage(model: Model, x: np.ndarray, batch: int = 256) -> dict[str, UsageHistogram]:
    """Run calibration data through the net, tallying pecan_d assignments."""
    usage: dict[str, UsageHistogram] = {}
    for s in range(0, x.shape[0], batch):
        run_network(model, x[s : s + batch], usage=usage)
    return usage


def prune_model(model: Model, calibration: np.ndarray) -> tuple[Model, dict[str, dict]]:
    """Prune every pecan_d layer against a calibration set.

    Returns a new Model sharing the spec and weights, with pruned codebooks
    and tables (per-group prototype counts may come out ragged; the spec's
    nominal p is left as the pre-prune value), plus per-layer stats:
    prototype totals before/after and how many histogram zeros were seen.
    """
    usage = collect_usage(model, calibration)
    new_model = Model(model.spec, dict(model.params), dict(model.codebooks), dict(model.luts))
    stats: dict[str, dict] = {}
    for ly in model.spec.param_layers():
        if ly.method != "pecan_d" or ly.name not in usage:
            continue
        cb, table = model.codebooks[ly.name], model.lut_for(ly)
        hist = usage[ly.name]
        cb2, lut2, _ = prune_unused(cb, table, hist)
        new_model.codebooks[ly.name] = cb2
        new_model.luts[ly.name] = lut2
        stats[ly.name] = {
            "before": sum(cb.p_per_group),
            "after": sum(cb2.p_per_group),
            "zeros": hist.zero_count(),
        }
    return new_model, stats
