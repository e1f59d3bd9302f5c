"""Command-line front end: train, eval, count, audit, usage, prune, export-lut, gradcheck."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import autograd as ag
from .codebook import Codebook
from .config import load_config, parse_config
from .cost import HardwareModel, network_cost
from .cost import format_cost_table
from .dataio import (
    Checkpoint,
    cost_csv,
    load_checkpoint,
    load_digit_corpus,
    model_from_checkpoint,
    model_to_checkpoint,
    save_checkpoint,
    usage_csv,
)
from .lut import Model, OpCounter, collect_usage, prune_model, run_network
from .matcher import surrogate_slope
from .network import spec_to_manifest
from .train import TrainConfig, evaluate, init_params, train


def _load_cfg(args) -> tuple[TrainConfig, "NetworkSpec"]:
    if args.config:
        return load_config(args.config)
    return parse_config("")


def _model_from_args(args) -> Model:
    """A concrete model: from a checkpoint if given, else config + seed.

    Without a checkpoint the weights are fresh random init and pecan
    codebooks are seeded random prototypes; fine for arithmetic audits,
    meaningless for accuracy.
    """
    if args.checkpoint:
        return model_from_checkpoint(load_checkpoint(args.checkpoint))
    cfg, spec = _load_cfg(args)
    seed = cfg.seed if args.seed is None else args.seed
    params = init_params(spec, seed)
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    codebooks = {}
    for ly in spec.param_layers():
        if ly.method != "baseline":
            codebooks[ly.name] = Codebook.from_array(rng.standard_normal((ly.D, ly.d, ly.p)))
    return Model(spec, params, codebooks)


def cmd_train(args) -> int:
    cfg, spec = _load_cfg(args)
    if args.seed is not None:
        cfg.seed = args.seed
    train_x, train_y, test_x, test_y = load_digit_corpus(args.data_dir)
    init_model = None
    if args.checkpoint:
        init_model = model_from_checkpoint(load_checkpoint(args.checkpoint))
        if init_model.spec.layers != spec.layers:
            # weight init from a differently-configured net (e.g. baseline
            # weights feeding a pecan run): keep the config's spec, reuse params
            init_model = Model(spec, init_model.params, init_model.codebooks, {})
    elif cfg.strategy == "freeze_weights":
        print("note: freeze_weights without --checkpoint freezes random weights", file=sys.stderr)
    out = args.out or "model.ckpt"
    result = train(
        spec, train_x, train_y, test_x, test_y, cfg,
        init_model=init_model, log_path=out + ".metrics.tsv", verbose=True,
    )
    ck = model_to_checkpoint(result.model, extra={"train.seed": cfg.seed, "train.epochs": cfg.epochs})
    save_checkpoint(ck, out)
    final_acc = evaluate(result.model, test_x, test_y)
    print(f"saved {out}; test accuracy {final_acc:.4f}; {result.train_seconds:.1f}s")
    return 0


def cmd_eval(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    _, _, test_x, test_y = load_digit_corpus(args.data_dir)
    acc = evaluate(model, test_x, test_y)
    print(f"test accuracy {acc:.4f} over {len(test_y)} samples")
    return 0


def cmd_count(args) -> int:
    _, spec = _load_cfg(args)
    rows = network_cost(spec)
    hw = HardwareModel()
    print(format_cost_table(rows, hw))
    if args.out:
        with open(args.out, "w") as f:
            f.write(cost_csv(rows, hw))
        print(f"wrote {args.out}")
    return 0


def cmd_audit(args) -> int:
    model = _model_from_args(args)
    spec = model.spec
    seed = 0 if args.seed is None else args.seed
    rng = np.random.Generator(np.random.PCG64(seed))
    x = rng.random((1, *spec.input_shape))
    counter = OpCounter()
    run_network(model, x, counter=counter)
    expected = network_cost(spec)[-1]
    ok = counter.adds == expected.adds and counter.muls == expected.muls
    print(f"audited:  adds={counter.adds:,} muls={counter.muls:,}")
    print(f"closed:   adds={expected.adds:,} muls={expected.muls:,}")
    methods = {ly.method for ly in spec.param_layers()}
    if methods == {"pecan_d"}:
        mul_free = counter.muls == 0
        print(f"multiplier-free: {'yes' if mul_free else 'NO'}")
        ok = ok and mul_free
    print("audit PASS" if ok else "audit FAIL")
    return 0 if ok else 1


def cmd_usage(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    train_x, _, _, _ = load_digit_corpus(args.data_dir)
    usages = collect_usage(model, train_x[: args.calib])
    if not usages:
        print("no hard-assignment layers in this model; nothing to histogram")
        return 1
    for name in sorted(usages):
        hist = usages[name]
        print(f"{name}: {hist.n_assigned} columns, {hist.zero_count()} unused prototypes")
    if args.out:
        with open(args.out, "w") as f:
            f.write(usage_csv(usages))
        print(f"wrote {args.out}")
    return 0


def cmd_prune(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    train_x, _, _, _ = load_digit_corpus(args.data_dir)
    pruned, stats = prune_model(model, train_x[: args.calib])
    if not stats:
        print("no hard-assignment layers to prune")
        return 1
    for name in sorted(stats):
        s = stats[name]
        print(f"{name}: {s['before']} -> {s['after']} prototypes ({s['zeros']} unused)")
    out = args.out or "pruned.ckpt"
    save_checkpoint(model_to_checkpoint(pruned, extra={"pruned.calib": args.calib}, include_luts=True), out)
    print(f"wrote {out}")
    return 0


def cmd_export_lut(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    manifest = spec_to_manifest(model.spec)
    blobs = {}
    for ly in model.spec.param_layers():
        if ly.method == "baseline":
            continue
        table = model.lut_for(ly)
        manifest[f"lut.{ly.name}.groups"] = str(table.D)
        for j, g in enumerate(table.groups):
            blobs[f"{ly.name}.lut.g{j}"] = g
    if not blobs:
        print("model has no pecan layers; no tables to export")
        return 1
    out = args.out or "luts.ckpt"
    save_checkpoint(Checkpoint(manifest, blobs), out)
    print(f"wrote {out} ({len(blobs)} table groups)")
    return 0


def cmd_gradcheck(args) -> int:
    """Finite-difference check of every differentiable op; prints a table."""
    seed = 0 if args.seed is None else args.seed
    rng = np.random.Generator(np.random.PCG64(seed))
    rows: list[tuple[str, float]] = []

    def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
        denom = max(float(np.abs(numeric).max()), 1e-8)
        return float(np.abs(analytic - numeric).max()) / denom

    def check(name: str, build, x0: np.ndarray):
        def f(x):
            node = ag.param(x)
            out = build(node)
            return float(out.value)

        node = ag.param(x0.copy())
        out = build(node)
        ag.backward(out)
        rows.append((name, rel_err(node.grad, ag.numerical_grad(f, x0.copy()))))

    w = rng.standard_normal((4, 18)) * 0.5
    cols = rng.standard_normal((18, 10))
    check("matmul.w", lambda n: _sum(ag.matmul(n, ag.const(cols))), w)
    img = rng.standard_normal((2, 3, 6, 6))
    from .tensor import ConvGeometry

    geom = ConvGeometry(3, 6, 6, 3)
    wc = rng.standard_normal((2, geom.rows)) * 0.5
    check("conv.input", lambda n: _sum(ag.matmul(ag.const(wc), ag.conv_cols(n, geom))), img)
    check("relu", lambda n: _sum(ag.relu(n)), rng.standard_normal((5, 7)) + 0.1)
    check("maxpool", lambda n: _sum(ag.maxpool(n)), rng.standard_normal((2, 2, 6, 6)))
    protos_a = rng.standard_normal((2, 6, 5))
    cols_a = rng.standard_normal((12, 8))
    check("pecan_a.protos", lambda n: _sum(ag.pecan_substitute(ag.const(cols_a), n, "pecan_a", 1.0)), protos_a)
    check(
        "pecan_a.cols",
        lambda n: _sum(ag.pecan_substitute(n, ag.const(protos_a), "pecan_a", 1.0)),
        cols_a,
    )
    check(
        "pecan_d_relaxed.protos",
        lambda n: _sum(ag.pecan_substitute(ag.const(cols_a), n, "pecan_d", 0.5, grad_mode="relaxed_exact")),
        protos_a,
    )
    check(
        "pecan_d_relaxed.cols",
        lambda n: _sum(ag.pecan_substitute(n, ag.const(protos_a), "pecan_d", 0.5, grad_mode="relaxed_exact")),
        cols_a,
    )
    logits = rng.standard_normal((6, 4))
    labels = rng.integers(0, 4, 6)
    check("cross_entropy", lambda n: ag.softmax_cross_entropy(n, labels), logits)

    tol = 1e-5
    worst = 0.0
    for name, err in rows:
        worst = max(worst, err)
        print(f"{name:<24}{err:.3e}  {'ok' if err <= tol else 'FAIL'}")
    for e, label in ((0, "start"), (1, "mid"), (2, "end")):
        a = surrogate_slope(e, 2)
        print(f"slope a({label})          {a:.6f}")
    print(f"max relative error {worst:.3e} (tol {tol:g})")
    return 0 if worst <= tol else 1


def _sum(node: ag.Node) -> ag.Node:
    """Reduce to a scalar for gradient checks: weighted sum, fixed weights."""
    w = np.cos(np.arange(node.value.size)).reshape(node.value.shape)

    def back(g):
        return (g * w,)

    return ag.Node((node.value * w).sum(), (node,), back, needs=node.needs)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="pecan", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=False, ckpt=False):
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--checkpoint", required=ckpt, help="checkpoint path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help="output path")
        if data:
            p.add_argument("--data-dir", required=True, help="directory with the four IDX files")

    p = sub.add_parser("train", help="train a model per --config")
    common(p, data=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="test accuracy of a checkpoint")
    common(p, data=True, ckpt=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("count", help="closed-form per-layer cost table")
    common(p)
    p.set_defaults(fn=cmd_count)

    p = sub.add_parser("audit", help="runtime op audit vs the closed form")
    common(p)
    p.set_defaults(fn=cmd_audit)

    p = sub.add_parser("usage", help="prototype usage histogram")
    common(p, data=True, ckpt=True)
    p.add_argument("--calib", type=int, default=1000, help="calibration images")
    p.set_defaults(fn=cmd_usage)

    p = sub.add_parser("prune", help="drop never-used prototypes")
    common(p, data=True, ckpt=True)
    p.add_argument("--calib", type=int, default=1000, help="calibration images")
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("export-lut", help="write lookup tables as a blob file")
    common(p, ckpt=True)
    p.set_defaults(fn=cmd_export_lut)

    p = sub.add_parser("gradcheck", help="finite-difference gradient table")
    common(p)
    p.set_defaults(fn=cmd_gradcheck)

    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
