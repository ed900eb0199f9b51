"""Fake quantization with a learnable step size.

Forward: ``vhat = round(clamp(v / s, -Qn, Qp)) * s`` with symmetric integer
levels. Backward registers three rules on the graph:

* step size ``s``: per element, ``round(v/s) - v/s`` strictly inside the
  clip range, ``-Qn`` at or below the lower edge, ``Qp`` at or above the
  upper edge; the incoming gradient weights each term and the result is
  summed into the scalar ``s`` gradient;
* activation inputs: straight-through with clipping, a 0/1 mask that is 1
  strictly inside the clip range;
* weight inputs: the gradient passes through unchanged everywhere.

Rounding is round-half-to-even, which is deterministic and preserves odd
symmetry. Points exactly at the clip edges take the saturated branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, from_op

__all__ = [
    "SCALE_FLOOR",
    "QuantSpec",
    "ScaleFactor",
    "quant_levels",
    "fake_quantize",
    "scale_grad",
    "activation_grad_mask",
    "weight_grad",
]

# Learnable step sizes are clipped to this after every optimizer update so
# they stay strictly positive.
SCALE_FLOOR = 1e-8


def quant_levels(bits: int, signed: bool) -> tuple[int, int]:
    """Magnitudes (Qn, Qp) of the negative and positive integer levels.

    Unsigned: (0, 2**bits - 1). Signed: (2**(bits-1) - 1, 2**(bits-1) - 1),
    so 2-bit signed is ternary with levels {-1, 0, 1}.
    """
    if bits < 2:
        raise ValueError(f"quantization needs at least 2 bits, got {bits}")
    if signed:
        q = 2 ** (bits - 1) - 1
        return q, q
    return 0, 2**bits - 1


@dataclass(frozen=True)
class QuantSpec:
    """Bit width plus signedness and the derived integer level range."""

    bits: int
    signed: bool = True

    def __post_init__(self):
        quant_levels(self.bits, self.signed)  # validates bits

    @property
    def qn(self) -> int:
        return quant_levels(self.bits, self.signed)[0]

    @property
    def qp(self) -> int:
        return quant_levels(self.bits, self.signed)[1]


@dataclass
class ScaleFactor:
    """Learnable positive step size attached to one quantization site."""

    site_id: str
    kind: str  # "weight" | "activation"
    param: Tensor

    def __post_init__(self):
        if self.kind not in ("weight", "activation"):
            raise ValueError(f"unknown scale-factor kind {self.kind!r}")

    @classmethod
    def create(cls, site_id: str, kind: str, init: float) -> "ScaleFactor":
        value = max(float(init), SCALE_FLOOR)
        return cls(site_id=site_id, kind=kind, param=Tensor(value, requires_grad=True))

    @property
    def value(self) -> float:
        return float(self.param.data.item())


def scale_grad(values, s: float, spec: QuantSpec):
    """Per-element step-size gradient terms (before upstream weighting)."""
    ratio = np.asarray(values, dtype=np.float64) / s
    rounded = np.round(ratio)
    in_range = (-spec.qn < ratio) & (ratio < spec.qp)
    return np.where(in_range, rounded - ratio, np.where(ratio <= -spec.qn, -float(spec.qn), float(spec.qp)))


def activation_grad_mask(values, s: float, spec: QuantSpec):
    """0/1 straight-through mask: 1 strictly inside the clip range."""
    ratio = np.asarray(values, dtype=np.float64) / s
    return (((-spec.qn < ratio) & (ratio < spec.qp))).astype(np.float64)


def weight_grad(values, s: float, spec: QuantSpec):
    """Pass-through factor for weight inputs: 1 everywhere, unconditionally."""
    return np.ones_like(np.asarray(values, dtype=np.float64))


def fake_quantize(v: Tensor, scale: ScaleFactor, spec: QuantSpec) -> Tensor:
    """Quantize-dequantize ``v`` with step ``scale`` and levels from ``spec``."""
    s_val = scale.value
    if s_val <= 0.0:
        raise ValueError(f"scale factor {scale.site_id!r} must be positive, got {s_val}")
    ratio = v.data / s_val
    q = np.round(np.clip(ratio, -spec.qn, spec.qp))
    out = q * s_val

    in_range = (-spec.qn < ratio) & (ratio < spec.qp)
    s_terms = np.where(
        in_range, np.round(ratio) - ratio, np.where(ratio <= -spec.qn, -float(spec.qn), float(spec.qp))
    )
    pass_through = scale.kind == "weight"

    def _bw(g):
        gs = np.asarray((g * s_terms).sum())
        gv = g if pass_through else g * in_range
        return (gv, gs)

    return from_op(out, (v, scale.param), _bw)
