"""Flat key=value run configuration.

An empty file is a valid configuration: the baseline digit net with the
default training protocol (150 epochs, batch 64, Adam at 0.01 decaying by
0.1 every 50 epochs). `method=pecan_a` or `method=pecan_d` switches every
conv/fc layer to that variant with its published per-layer (p, D, d).
Per-layer overrides use dotted keys, e.g. `conv2.p=32` or
`conv1.method=baseline`. Unknown keys are rejected with their line number.
"""

from __future__ import annotations

from dataclasses import replace

from .matcher import METHODS
from .network import DEFAULT_TAU, PECAN_A_PRESETS, PECAN_D_PRESETS, NetworkSpec, lenet
from .train import STRATEGIES, TrainConfig

_GLOBAL_KEYS = {
    "method": str,
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "lr_decay_every": int,
    "lr_decay_factor": float,
    "beta1": float,
    "beta2": float,
    "epsilon": float,
    "strategy": str,
    "seed": int,
    "kmeans_iters": int,
    "calib_images": int,
    "grad_mode": str,
    "tau_a": float,
    "tau_d": float,
}

_LAYER_KEYS = {"method": str, "p": int, "D": int, "d": int, "tau": float}
_LAYER_NAMES = ("conv1", "conv2", "fc1", "fc2", "fc3")


def parse_config(text: str) -> tuple[TrainConfig, NetworkSpec]:
    """Parse a configuration into training settings and a network spec.

    Raises ValueError naming the offending line for unknown keys, duplicate
    keys, malformed lines and out-of-range values.
    """
    pairs: dict[str, tuple[str, int]] = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected key=value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"line {ln}: empty key")
        if key in pairs:
            raise ValueError(f"line {ln}: duplicate key {key!r} (first set on line {pairs[key][1]})")
        pairs[key] = (val, ln)

    def take(key: str, typ, default):
        if key not in pairs:
            return default
        val, ln = pairs.pop(key)
        try:
            return typ(val)
        except ValueError:
            raise ValueError(f"line {ln}: {key} wants {typ.__name__}, got {val!r}") from None

    method = take("method", str, "baseline")
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    tau_a = take("tau_a", float, DEFAULT_TAU["pecan_a"])
    tau_d = take("tau_d", float, DEFAULT_TAU["pecan_d"])
    taus = {"pecan_a": tau_a, "pecan_d": tau_d, "baseline": 1.0}

    cfg = TrainConfig(
        epochs=take("epochs", int, 150),
        batch_size=take("batch_size", int, 64),
        lr=take("lr", float, 0.01),
        lr_decay_every=take("lr_decay_every", int, 50),
        lr_decay_factor=take("lr_decay_factor", float, 0.1),
        beta1=take("beta1", float, 0.9),
        beta2=take("beta2", float, 0.999),
        epsilon=take("epsilon", float, 1e-8),
        strategy=take("strategy", str, "freeze_weights" if method != "baseline" else "from_scratch"),
        seed=take("seed", int, 0),
        kmeans_iters=take("kmeans_iters", int, 25),
        calib_images=take("calib_images", int, 1024),
        grad_mode=take("grad_mode", str, "ste_tanh"),
    )
    if cfg.strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}, got {cfg.strategy!r}")

    spec = lenet(method, tau=taus[method] if method != "baseline" else None)
    by_name = {ly.name: i for i, ly in enumerate(spec.layers)}

    layer_overrides: dict[str, dict[str, object]] = {}
    for key in list(pairs):
        if "." not in key:
            continue
        lname, fieldname = key.split(".", 1)
        if lname not in _LAYER_NAMES:
            continue
        val, ln = pairs.pop(key)
        if fieldname not in _LAYER_KEYS:
            raise ValueError(f"line {ln}: unknown layer field {key!r}")
        typ = _LAYER_KEYS[fieldname]
        try:
            layer_overrides.setdefault(lname, {})[fieldname] = typ(val)
        except ValueError:
            raise ValueError(f"line {ln}: {key} wants {typ.__name__}, got {val!r}") from None

    if pairs:
        key, (_, ln) = sorted(pairs.items(), key=lambda kv: kv[1][1])[0]
        raise ValueError(f"line {ln}: unknown key {key!r}")

    for lname, fields in layer_overrides.items():
        i = by_name[lname]
        ly = spec.layers[i]
        new_method = fields.get("method", ly.method)
        if new_method not in METHODS:
            raise ValueError(f"{lname}.method must be one of {METHODS}, got {new_method!r}")
        if new_method != ly.method:
            # reset to that variant's published defaults before field overrides
            if new_method == "baseline":
                ly = replace(ly, method="baseline", p=0, D=0, d=0, tau=1.0)
            else:
                presets = PECAN_A_PRESETS if new_method == "pecan_a" else PECAN_D_PRESETS
                p, D, d = presets[lname]
                ly = replace(ly, method=new_method, p=p, D=D, d=d, tau=taus[new_method])
        for fieldname, value in fields.items():
            if fieldname != "method":
                ly = replace(ly, **{fieldname: value})
        spec.layers[i] = ly

    spec.shapes = []
    spec.validate()
    cfg.validate()
    return cfg, spec


def load_config(path) -> tuple[TrainConfig, NetworkSpec]:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())
