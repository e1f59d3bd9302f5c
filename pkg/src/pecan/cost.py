"""Closed-form arithmetic cost model and the cycle/power hardware model."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .network import LayerSpec, NetworkSpec


@dataclass(frozen=True)
class LayerCost:
    name: str
    adds: int
    muls: int

    @property
    def total(self) -> int:
        return self.adds + self.muls


def conv_baseline_cost(c_in: int, h_out: int, w_out: int, k: int, c_out: int) -> tuple[int, int]:
    """Dense conv: one MAC per filter tap per output element.

    adds == muls == c_in * h_out * w_out * k^2 * c_out. An fc layer is the
    k = h_out = w_out = 1 case.
    """
    macs = c_in * h_out * w_out * k * k * c_out
    return macs, macs

def pecan_a_cost(p: int, D: int, h_out: int, w_out: int, d: int, c_out: int) -> tuple[int, int]:
    """Soft-attention variant: score and blend are both multiply-accumulate.

    adds == muls == p * D * h_out * w_out * (d + c_out).
    """
    macs = p * D * h_out * w_out * (d + c_out)
    return macs, macs

def pecan_d_cost(p: int, D: int, h_out: int, w_out: int, d: int, c_out: int) -> tuple[int, int]:
    """Distance variant: additions only.

    adds == D * h_out * w_out * (2*p*d + c_out), muls == 0. The 2*p*d term
    is the L1 search (subtract + accumulate per element), c_out the table
    column accumulation.
    """
    return D * h_out * w_out * (2 * p * d + c_out), 0


def layer_cost(ly: LayerSpec, h_out: int, w_out: int) -> LayerCost:
    """Per-image cost of one conv/fc layer at the given output extents."""
    if not ly.is_param:
        return LayerCost(ly.name, 0, 0)
    if ly.method == "baseline":
        k = ly.k if ly.kind == "conv" else 1
        adds, muls = conv_baseline_cost(ly.c_in, h_out, w_out, k, ly.c_out)
    elif ly.method == "pecan_a":
        adds, muls = pecan_a_cost(ly.p, ly.D, h_out, w_out, ly.d, ly.c_out)
    else:
        adds, muls = pecan_d_cost(ly.p, ly.D, h_out, w_out, ly.d, ly.c_out)
    return LayerCost(ly.name, adds, muls)


def network_cost(spec: NetworkSpec) -> list[LayerCost]:
    """Per-image cost of every conv/fc layer, plus a trailing total row."""
    if not spec.shapes:
        spec.validate()
    rows = []
    for ly in spec.layers:
        if not ly.is_param:
            continue
        if ly.kind == "conv":
            g = spec.conv_geometry(ly)
            rows.append(layer_cost(ly, g.h_out, g.w_out))
        else:
            rows.append(layer_cost(ly, 1, 1))
    rows.append(LayerCost("total", sum(r.adds for r in rows), sum(r.muls for r in rows)))
    return rows


@dataclass(frozen=True)
class HardwareModel:
    """Relative cost of the two operations on the target fabric.

    A multiplier takes mul_cycles pipeline cycles and mul_power units of
    energy per op; an adder add_cycles and add_power. Defaults reflect a
    4-cycle multiplier against a 2-cycle adder, with the multiplier burning
    four adders' worth of power.
    """

    mul_cycles: int = 4
    add_cycles: int = 2
    mul_power: int = 4
    add_power: int = 1

    def latency_cycles(self, adds: int, muls: int) -> int:
        return self.mul_cycles * muls + self.add_cycles * adds

    def power_units(self, adds: int, muls: int) -> int:
        return self.mul_power * muls + self.add_power * adds


def pecan_a_feasible_p(lam: float, c_out: int, d: int) -> int:
    """Largest prototype count that keeps soft attention under budget.

    The attention variant spends p*d MACs scoring and p*c_out blending per
    column-group. With a fraction lam of the budget granted to the blend and
    the rest to scoring, the layer stays within a dense layer's cost iff
    p <= min(lam * c_out, (1 - lam) * d); we floor to an integer.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    if c_out < 1 or d < 1:
        raise ValueError(f"c_out and d must be positive, got c_out={c_out} d={d}")
    return math.floor(min(lam * c_out, (1.0 - lam) * d))


def format_cost_table(rows: list[LayerCost], hw: HardwareModel | None = None) -> str:
    """Human-readable per-layer table; optionally with latency/power columns."""
    hdr = f"{'layer':<8}{'adds':>14}{'muls':>14}"
    if hw is not None:
        hdr += f"{'cycles':>16}{'power':>16}"
    lines = [hdr]
    for r in rows:
        line = f"{r.name:<8}{r.adds:>14,}{r.muls:>14,}"
        if hw is not None:
            line += f"{hw.latency_cycles(r.adds, r.muls):>16,}{hw.power_units(r.adds, r.muls):>16,}"
        lines.append(line)
    return "\n".join(lines)
