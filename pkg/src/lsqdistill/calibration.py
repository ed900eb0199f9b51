"""Step-size initialization from empirical value distributions.

Weight sites initialize from the pretrained weight values directly;
activation sites initialize from tensors captured during one full-precision
forward pass over a calibration batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quant import SCALE_FLOOR, QuantSpec

__all__ = [
    "CalibrationRecord",
    "init_scale_factor",
    "step_from_threshold",
    "calibrate_activations",
]


@dataclass
class CalibrationRecord:
    """Snapshot of how one quantization site got its initial step size."""

    site_id: str
    kind: str
    method: str
    count: int
    s_init: float
    retention: float
    snapshot: np.ndarray | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {
            "site_id": self.site_id,
            "kind": self.kind,
            "method": self.method,
            "count": self.count,
            "s_init": self.s_init,
            "retention": self.retention,
        }


def init_scale_factor(values, gamma: float) -> float:
    """Two-sided truncation threshold keeping at least a 1 - gamma fraction.

    Sorts the values, drops ``floor(gamma * n / 2)`` elements from each
    tail, and returns the larger absolute boundary value, floored at
    ``SCALE_FLOOR``. Flooring the tail index (rather than rounding) keeps
    the retained fraction ``count(|x| <= s) / n`` at or above ``1 - gamma``
    for every input.
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    n = flat.size
    if n == 0:
        raise ValueError("cannot initialize a scale factor from an empty tensor")
    if not 0.0 <= gamma < 0.5:
        raise ValueError(f"truncation ratio must be in [0, 0.5), got {gamma}")
    ordered = np.sort(flat)
    index_min = min(int(gamma * n / 2.0), n - 1)
    index_max = min(n - index_min - 1, n - 1)
    s = max(abs(float(ordered[index_min])), abs(float(ordered[index_max])))
    return max(s, SCALE_FLOOR)


def step_from_threshold(threshold: float, spec: QuantSpec) -> float:
    """Step size that puts the quantizer clip boundary at ``threshold``.

    The initializer produces a truncation threshold: values above it saturate
    at the top level. Under quantize-dequantize the saturation boundary is
    ``qp * step``, so the attached step is ``threshold / qp``. For 2-bit
    signed (ternary) the two coincide.
    """
    return max(threshold / spec.qp, SCALE_FLOOR)


def retention_fraction(values, s: float) -> float:
    """Fraction of elements with magnitude at most ``s``."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    return float((np.abs(flat) <= s).mean())


def make_record(site_id: str, kind: str, method: str, values, s_init: float,
                keep_snapshot: bool = False) -> CalibrationRecord:
    flat = np.asarray(values, dtype=np.float64).ravel()
    return CalibrationRecord(
        site_id=site_id,
        kind=kind,
        method=method,
        count=int(flat.size),
        s_init=float(s_init),
        retention=retention_fraction(flat, s_init),
        snapshot=flat.copy() if keep_snapshot else None,
    )


def calibrate_activations(state, tokens, segments=None, gamma: float = 0.05):
    """Run one full-precision forward pass and initialize activation steps.

    Returns ``(site -> s_init, records)``. Every declared activation site
    must show up in the capture; a missing site means the forward graph is
    wired wrong and is a hard error.
    """
    from .model import activation_site_names, forward_model

    capture: dict[str, list[np.ndarray]] = {}
    forward_model(state, tokens, segments, mode="calibrate", capture=capture)

    scales: dict[str, float] = {}
    records: list[CalibrationRecord] = []
    for site in activation_site_names(state.config):
        if site not in capture:
            raise RuntimeError(f"activation site {site!r} captured no tensor during calibration")
        values = np.concatenate([chunk.ravel() for chunk in capture[site]])
        s_init = init_scale_factor(values, gamma)
        scales[site] = s_init
        records.append(make_record(site, "activation", "quantile", values, s_init))
    return scales, records
