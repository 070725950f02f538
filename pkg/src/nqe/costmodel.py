"""Analytic hardware cost accounting: weight memory (naive and entropy
encodings), MAC counts, and the bitwidth-aware MAC*bit / BOPs metrics.

All quantities derive from the static layer table; nothing here touches
weights or activations. Reported figures use decimal megabits (10^6 bits)
and half-up rounding to 3 decimals, matching how the reference tables print.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

from .models import BOTTLENECK_KINDS, ModelConfig, nqe_layer_table

NAIVE_WEIGHT_BITS = {5: 3, 3: 2, 2: 1}
ENTROPY_WEIGHT_BITS = {5: math.log2(5), 3: math.log2(3), 2: 1.0}

_TRUNK = ("conv1", "conv2", "conv3", "conv4", "conv5", "gc")


@dataclass(frozen=True)
class CostRow:
    name: str
    weight_levels: int
    input_precision: int
    params: int
    macs: int
    naive_bits: int
    entropy_bits: float
    mac_bit: float
    bops: float


@dataclass(frozen=True)
class CostReport:
    rows: tuple[CostRow, ...]

    def _sum(self, attr: str):
        return sum(getattr(r, attr) for r in self.rows)

    @property
    def params(self) -> int:
        return self._sum("params")

    @property
    def macs(self) -> int:
        return self._sum("macs")

    @property
    def naive_bits(self) -> int:
        return self._sum("naive_bits")

    @property
    def entropy_bits(self) -> float:
        return self._sum("entropy_bits")

    @property
    def mac_bit(self) -> float:
        return self._sum("mac_bit")

    @property
    def bops(self) -> float:
        return self._sum("bops")


def cost_report(cfg: ModelConfig, compute_bits: str = "entropy") -> CostReport:
    """Per-layer costs; ``compute_bits`` picks the weight bitwidth used in
    MAC*bit and BOPs (the memory columns always report both encodings)."""
    if compute_bits not in ("entropy", "naive"):
        raise ValueError(f"compute_bits must be entropy or naive, got {compute_bits!r}")
    rows = []
    for spec in nqe_layer_table(cfg):
        b_eff = (ENTROPY_WEIGHT_BITS if compute_bits == "entropy"
                 else NAIVE_WEIGHT_BITS)[spec.weight_levels]
        rows.append(CostRow(
            name=spec.name,
            weight_levels=spec.weight_levels,
            input_precision=spec.input_precision,
            params=spec.params,
            macs=spec.macs,
            naive_bits=spec.params * NAIVE_WEIGHT_BITS[spec.weight_levels],
            entropy_bits=spec.params * ENTROPY_WEIGHT_BITS[spec.weight_levels],
            mac_bit=spec.macs * b_eff,
            bops=spec.macs * spec.input_precision * b_eff,
        ))
    return CostReport(tuple(rows))


def round3(x) -> Decimal:
    return Decimal(x).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP)


def megabits(bits) -> Decimal:
    return round3(Decimal(bits) / Decimal(10**6))


def billions(x) -> Decimal:
    return round3(Decimal(x) / Decimal(10**9))


def table_three(F: int = 64) -> dict[str, dict[str, Decimal]]:
    """The six headline cells: memory / MAC*bit / BOPs for mixed and binary."""
    out = {}
    for mode in ("mixed", "binary"):
        rep = cost_report(ModelConfig(F=F, weight_mode=mode))
        out[mode] = {
            "memory_mb": megabits(rep.naive_bits),
            "mac_bit_g": billions(rep.mac_bit),
            "bops_g": billions(rep.bops),
        }
    return out


def appendix_a(Fs=(32, 64, 128)) -> dict:
    """Bottleneck memory cells per kind and width, plus the shared
    encoder-without-bottleneck column (naive encoding throughout)."""
    cells: dict[str, dict[int, Decimal]] = {k: {} for k in BOTTLENECK_KINDS}
    without: dict[int, Decimal] = {}
    for F in Fs:
        for kind in BOTTLENECK_KINDS:
            rep = cost_report(ModelConfig(F=F, bottleneck_kind=kind))
            keep = {r.name for r in rep.rows} - set(_TRUNK) - {"classifier"}
            cells[kind][F] = megabits(
                sum(r.naive_bits for r in rep.rows if r.name in keep)
            )
        rep = cost_report(ModelConfig(F=F))
        without[F] = megabits(
            sum(r.naive_bits for r in rep.rows if r.name not in ("dw", "fc"))
        )
    return {"bottleneck": cells, "without_bottleneck": without}
