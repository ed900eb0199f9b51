"""Teacher-student training losses composed from forward traces.

Components: ``hidden`` sums per-layer MSE over the embedding output and
every layer output; ``att`` sums per-layer MSE over the stacked pre-softmax
attention scores; ``pre`` is the soft cross entropy between student and
teacher logits; ``trm = hidden + att``; ``kd = pre + trm``; ``gt`` is the
label cross entropy. The trained total depends on the loss mode, but every
component is always recorded.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import ForwardTrace
from .tensor import Tensor, cross_entropy, mse, soft_cross_entropy

__all__ = [
    "LOSS_MODES",
    "LossBreakdown",
    "loss_hidden",
    "loss_att",
    "loss_kd",
    "loss_total",
]

LOSS_MODES = ("gt-only", "kd-only", "kd+gt")


@dataclass
class LossBreakdown:
    """Scalar values of all loss components for one training step."""

    hidden: float
    att: float
    trm: float
    pre: float
    kd: float
    gt: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "hidden": self.hidden,
            "att": self.att,
            "trm": self.trm,
            "pre": self.pre,
            "kd": self.kd,
            "gt": self.gt,
            "total": self.total,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LossBreakdown":
        return cls(**{k: float(data[k]) for k in
                      ("hidden", "att", "trm", "pre", "kd", "gt", "total")})


def _sum_mse(student_parts, teacher_parts, what: str) -> Tensor:
    if len(student_parts) != len(teacher_parts):
        raise ValueError(
            f"{what} trace length mismatch: {len(student_parts)} vs {len(teacher_parts)}"
        )
    total = None
    for s, t in zip(student_parts, teacher_parts):
        term = mse(s, t)
        total = term if total is None else total + term
    return total


def loss_hidden(trace_s: ForwardTrace, trace_t: ForwardTrace) -> Tensor:
    """Summed MSE over the embedding output and every layer output."""
    return _sum_mse(trace_s.hidden, trace_t.hidden, "hidden state")


def loss_att(trace_s: ForwardTrace, trace_t: ForwardTrace) -> Tensor:
    """Summed MSE over the per-layer stacked attention score tensors."""
    return _sum_mse(trace_s.scores, trace_t.scores, "attention score")


def loss_kd(trace_s: ForwardTrace, trace_t: ForwardTrace):
    """Distillation losses; returns (pre, trm, kd) scalar tensors."""
    pre = soft_cross_entropy(trace_s.logits, trace_t.logits)
    trm = loss_hidden(trace_s, trace_t) + loss_att(trace_s, trace_t)
    return pre, trm, pre + trm


def loss_total(trace_s: ForwardTrace, trace_t: ForwardTrace, labels, mode: str):
    """Compose the trained loss for ``mode``; returns (total tensor, breakdown)."""
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}, expected one of {LOSS_MODES}")
    hidden = loss_hidden(trace_s, trace_t)
    att = loss_att(trace_s, trace_t)
    pre = soft_cross_entropy(trace_s.logits, trace_t.logits)
    trm = hidden + att
    kd = pre + trm
    gt = cross_entropy(trace_s.logits, labels)

    if mode == "gt-only":
        total = gt
    elif mode == "kd-only":
        total = kd
    else:
        total = kd + gt

    breakdown = LossBreakdown(
        hidden=hidden.item(),
        att=att.item(),
        trm=trm.item(),
        pre=pre.item(),
        kd=kd.item(),
        gt=gt.item(),
        total=total.item(),
    )
    return total, breakdown
