"""Training loop: Adam over the autograd graph, codebook calibration, metrics."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .codebook import Codebook, init_codebook, split_groups
from .lut import Model, run_network
from .matcher import surrogate_slope
from .network import NetworkSpec
from .tensor import im2col_batch, maxpool2d

STRATEGIES = ("from_scratch", "freeze_weights")


@dataclass
class TrainConfig:
    """Optimizer and schedule settings; defaults follow the digit protocol."""

    epochs: int = 150
    batch_size: int = 64
    lr: float = 0.01
    lr_decay_every: int = 50
    lr_decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    strategy: str = "freeze_weights"
    seed: int = 0
    kmeans_iters: int = 25
    calib_images: int = 1024
    grad_mode: str = "ste_tanh"

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"epochs and batch_size must be positive, got {self.epochs}, {self.batch_size}")
        if self.lr <= 0 or not 0 < self.lr_decay_factor <= 1 or self.lr_decay_every < 1:
            raise ValueError("bad learning-rate schedule")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.epsilon > 0):
            raise ValueError("bad adam hyperparameters")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if self.grad_mode not in ("ste_tanh", "relaxed_exact"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")
        if self.kmeans_iters < 1 or self.calib_images < 1:
            raise ValueError("kmeans_iters and calib_images must be positive")


class Adam:
    """Standard Adam with bias correction, one slot pair per parameter."""

    def __init__(self, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, ag.Node], trainable: set[str], lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name in sorted(trainable):
            node = params[name]
            g = node.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(node.value)
                self.v[name] = np.zeros_like(node.value)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1**self.t)
            vhat = self.v[name] / (1 - b2**self.t)
            node.value -= lr * mhat / (np.sqrt(vhat) + self.epsilon)


def init_params(spec: NetworkSpec, seed: int = 0) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases, for every conv/fc layer."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, np.ndarray] = {}
    for ly in spec.param_layers():
        fan_in = ly.rows
        params[f"{ly.name}.weight"] = rng.standard_normal((ly.c_out, fan_in)) * np.sqrt(2.0 / fan_in)
        params[f"{ly.name}.bias"] = np.zeros(ly.c_out)
    return params


def forward_nodes(
    spec: NetworkSpec,
    params: dict[str, ag.Node],
    x: np.ndarray,
    slope_a: float = 1.0,
    grad_mode: str = "ste_tanh",
) -> ag.Node:
    """Build the training graph for a batch [B, c, h, w]; returns logits [B, out]."""
    if not spec.shapes:
        spec.validate()
    batch = x.shape[0]
    cur = ag.const(x)
    for ly in spec.layers:
        if ly.kind == "relu":
            cur = ag.relu(cur)
        elif ly.kind == "maxpool":
            cur = ag.maxpool(cur, ly.k, ly.stride)
        elif ly.kind == "conv":
            geom = spec.conv_geometry(ly)
            cols = ag.conv_cols(cur, geom)
            if ly.method != "baseline":
                cols = ag.pecan_substitute(cols, params[f"{ly.name}.protos"], ly.method, ly.tau, slope_a, grad_mode)
            out = ag.add_bias(ag.matmul(params[f"{ly.name}.weight"], cols), params[f"{ly.name}.bias"])
            cur = ag.cols_to_maps(out, batch, ly.c_out, geom.h_out, geom.w_out)
        else:  # fc
            if len(cur.shape) > 2:
                cur = ag.reshape(cur, (batch, -1))
            cols = ag.transpose(cur, (1, 0))
            if ly.method != "baseline":
                cols = ag.pecan_substitute(cols, params[f"{ly.name}.protos"], ly.method, ly.tau, slope_a, grad_mode)
            out = ag.add_bias(ag.matmul(params[f"{ly.name}.weight"], cols), params[f"{ly.name}.bias"])
            cur = ag.transpose(out, (1, 0))
    return cur


def calibration_columns(spec: NetworkSpec, params: dict[str, np.ndarray], x: np.ndarray) -> dict[str, np.ndarray]:
    """Unfolded inputs of every pecan layer under a plain dense forward.

    Used to seed codebooks: the dense path (no reconstruction) is what the
    prototypes should learn to imitate.
    """
    if not spec.shapes:
        spec.validate()
    batch = x.shape[0]
    cur = x.astype(np.float64, copy=False)
    captured: dict[str, np.ndarray] = {}
    for ly in spec.layers:
        if ly.kind == "relu":
            cur = np.maximum(cur, 0.0)
        elif ly.kind == "maxpool":
            cur = maxpool2d(cur, ly.k, ly.stride)
        elif ly.kind == "conv":
            geom = spec.conv_geometry(ly)
            cols = im2col_batch(cur, geom)
            if ly.method != "baseline":
                captured[ly.name] = cols
            out = params[f"{ly.name}.weight"] @ cols + params[f"{ly.name}.bias"][:, None]
            cur = out.reshape(ly.c_out, batch, geom.n_cols).transpose(1, 0, 2).reshape(
                batch, ly.c_out, geom.h_out, geom.w_out
            )
        else:
            if cur.ndim > 2:
                cur = cur.reshape(batch, -1)
            cols = cur.T
            if ly.method != "baseline":
                captured[ly.name] = cols
            cur = (params[f"{ly.name}.weight"] @ cols + params[f"{ly.name}.bias"][:, None]).T
    return captured


def init_codebooks(
    spec: NetworkSpec, params: dict[str, np.ndarray], x: np.ndarray, seed: int = 0, iters: int = 25
) -> dict[str, Codebook]:
    """k-means codebooks from calibration columns, group j seeded with seed+j."""
    captured = calibration_columns(spec, params, x)
    books: dict[str, Codebook] = {}
    for ly in spec.param_layers():
        if ly.method == "baseline":
            continue
        feats = split_groups(captured[ly.name], ly.D)
        books[ly.name] = init_codebook(feats, ly.p, seed=seed, max_iters=iters)
    return books


def evaluate(model: Model, x: np.ndarray, y: np.ndarray, batch: int = 512) -> float:
    """Top-1 accuracy through the lookup-table engine."""
    hits = 0
    for s in range(0, x.shape[0], batch):
        logits = run_network(model, x[s : s + batch])
        hits += int((logits.argmax(axis=1) == y[s : s + batch]).sum())
    return hits / x.shape[0]


@dataclass
class TrainResult:
    model: Model
    metrics: list[str] = field(default_factory=list)
    train_seconds: float = 0.0


METRICS_HEADER = "epoch\ttrain_loss\ttrain_acc\ttest_acc\tlr\ta"


def train(
    spec: NetworkSpec,
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    cfg: TrainConfig,
    init_model: Model | None = None,
    log_path: str | None = None,
    verbose: bool = False,
) -> TrainResult:
    """Train a network; returns the final model and per-epoch metric lines.

    Under strategy "freeze_weights" only codebook prototypes update; weights
    and biases are the init_model's (or fresh He-init) values, untouched.
    Codebooks absent from init_model are seeded by k-means over calibration
    columns of the first calib_images training images. Deterministic for a
    fixed seed: single-threaded numpy, one PCG64 shuffle stream.
    """
    cfg.validate()
    spec.validate()
    if init_model is not None:
        params = {k: v.copy() for k, v in init_model.params.items()}
        codebooks = {k: Codebook([g.copy() for g in cb.groups]) for k, cb in init_model.codebooks.items()}
    else:
        params = init_params(spec, cfg.seed)
        codebooks = {}
    pecan_layers = [ly for ly in spec.param_layers() if ly.method != "baseline"]
    missing = [ly.name for ly in pecan_layers if ly.name not in codebooks]
    if missing:
        calib = train_x[: min(cfg.calib_images, train_x.shape[0])]
        fresh = init_codebooks(spec, params, calib, seed=cfg.seed, iters=cfg.kmeans_iters)
        for name in missing:
            codebooks[name] = fresh[name]
    if cfg.strategy == "freeze_weights" and not pecan_layers:
        raise ValueError("freeze_weights has nothing to train without pecan layers")

    nodes: dict[str, ag.Node] = {k: ag.param(v) for k, v in params.items()}
    for ly in pecan_layers:
        nodes[f"{ly.name}.protos"] = ag.param(codebooks[ly.name].stack())
    if cfg.strategy == "freeze_weights":
        trainable = {f"{ly.name}.protos" for ly in pecan_layers}
        for name, node in nodes.items():
            node.needs = name in trainable
    else:
        trainable = set(nodes)

    opt = Adam(cfg.beta1, cfg.beta2, cfg.epsilon)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    n = train_x.shape[0]
    metrics: list[str] = []
    log = open(log_path, "w") if log_path else None
    if log:
        log.write(METRICS_HEADER + "\n")
    t0 = time.time()
    try:
        for epoch in range(cfg.epochs):
            slope_a = surrogate_slope(epoch, cfg.epochs)
            lr = cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)
            perm = rng.permutation(n)
            loss_sum, hit_sum = 0.0, 0
            for s in range(0, n, cfg.batch_size):
                sel = perm[s : s + cfg.batch_size]
                xb, yb = train_x[sel], train_y[sel]
                for node in nodes.values():
                    node.grad = None
                logits = forward_nodes(spec, nodes, xb, slope_a, cfg.grad_mode)
                loss = ag.softmax_cross_entropy(logits, yb)
                ag.backward(loss)
                opt.step(nodes, trainable, lr)
                loss_sum += float(loss.value) * len(sel)
                hit_sum += int((logits.value.argmax(axis=1) == yb).sum())
            model = _snapshot(spec, nodes, pecan_layers)
            test_acc = evaluate(model, test_x, test_y)
            line = (
                f"{epoch}\t{loss_sum / n:.6f}\t{hit_sum / n:.4f}\t{test_acc:.4f}"
                f"\t{lr:.6g}\t{slope_a:.6g}"
            )
            metrics.append(line)
            if log:
                log.write(line + "\n")
                log.flush()
            if verbose:
                print(line, flush=True)
    finally:
        if log:
            log.close()
    return TrainResult(_snapshot(spec, nodes, pecan_layers), metrics, time.time() - t0)


def _snapshot(spec: NetworkSpec, nodes: dict[str, ag.Node], pecan_layers) -> Model:
    params = {k: v.value for k, v in nodes.items() if not k.endswith(".protos")}
    codebooks = {ly.name: Codebook.from_array(nodes[f"{ly.name}.protos"].value) for ly in pecan_layers}
    return Model(spec, params, codebooks)
