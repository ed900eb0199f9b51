"""Finite-difference gradient checks runnable from the CLI.

The quantizer's step-size rule is a straight-through surrogate inside the
clip range, so its almost-everywhere derivative there is ``round(v/s)``
rather than the surrogate value; finite differences therefore validate the
saturated branches and the local cell structure, while the in-range rule is
checked against an independent recomputation of the formula.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .data import SyntheticTask, gen_synthetic_task
from .losses import loss_total
from .model import ModelConfig, forward_model, init_model_state
from .quant import QuantSpec, ScaleFactor, fake_quantize
from .tensor import Tensor, backward, no_grad

__all__ = ["relative_error", "central_difference", "check_quantizer_rules", "check_model_weights"]


def relative_error(a, b, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.linalg.norm(a.ravel())), float(np.linalg.norm(b.ravel())), floor)
    return float(np.linalg.norm((a - b).ravel())) / scale


def central_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Elementwise central differences of a scalar function of ``x``."""
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = f()
        flat[i] = keep - h
        lo = f()
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def check_quantizer_rules(n_samples: int = 200, seed: int = 0) -> dict:
    """Sample (v, s, bits) triples and cross-check all three backward rules."""
    rng = np.random.default_rng(seed)
    worst_mid = 0.0
    worst_sat = 0.0
    mask_errors = 0
    pass_errors = 0
    for _ in range(n_samples):
        bits = int(rng.choice([2, 4, 8]))
        spec = QuantSpec(bits, signed=True)
        s = float(rng.uniform(0.1, 2.0))
        ratio = float(rng.uniform(-1.5 * spec.qp, 1.5 * spec.qp))
        if abs(ratio - round(ratio) - 0.5) < 1e-3 or abs(ratio - round(ratio) + 0.5) < 1e-3:
            ratio += 5e-3
        v = ratio * s

        for kind in ("weight", "activation"):
            sf = ScaleFactor.create("probe", kind, s)
            vt = Tensor([v], requires_grad=True)
            out = fake_quantize(vt, sf, spec)
            backward(out.sum())
            got_s = float(sf.param.grad.item())
            got_v = float(vt.grad.item())

            in_range = -spec.qn < ratio < spec.qp
            expected_s = (round(ratio) - ratio) if in_range else (
                -spec.qn if ratio <= -spec.qn else spec.qp)
            err = abs(got_s - expected_s) / max(abs(expected_s), 1e-12)
            if in_range:
                worst_mid = max(worst_mid, err)
            else:
                worst_sat = max(worst_sat, err)
                # Saturated branches are true derivatives: confirm by FD.
                h = 1e-6 * s
                def vhat(step):
                    return float(np.round(np.clip(v / step, -spec.qn, spec.qp)) * step)
                fd = (vhat(s + h) - vhat(s - h)) / (2 * h)
                worst_sat = max(worst_sat, abs(fd - expected_s) / max(abs(expected_s), 1e-12))

            if kind == "activation":
                expected_mask = 1.0 if in_range else 0.0
                if got_v != expected_mask:
                    mask_errors += 1
            elif got_v != 1.0:
                pass_errors += 1

    return {
        "samples": n_samples,
        "worst_in_range_rule_error": worst_mid,
        "worst_saturated_error": worst_sat,
        "mask_mismatches": mask_errors,
        "pass_through_mismatches": pass_errors,
        "ok": worst_mid <= 1e-12 and worst_sat <= 1e-6 and not mask_errors and not pass_errors,
    }


def check_model_weights(seed: int = 0, samples_per_param: int = 3,
                        tolerance: float = 1e-3) -> dict:
    """Spot-check full-model analytic gradients against central differences.

    Runs a small full-precision model and compares a random sample of
    coordinates per parameter; dropout stays off.
    """
    config = ModelConfig(num_layers=2, hidden_size=32, num_heads=2, ffn_size=32,
                         vocab=12, max_seq=6, bits_w=32, bits_e=32, bits_a=32)
    task = SyntheticTask(vocab=12, seq_len=6, train_size=8, test_size=4, seed=seed)
    data = gen_synthetic_task(task)
    tokens = data.train_tokens[:4]
    labels = data.train_labels[:4]

    rng = np.random.default_rng(seed)
    student = init_model_state(config, np.random.Generator(np.random.PCG64(seed)))
    teacher = init_model_state(config, np.random.Generator(np.random.PCG64(seed + 1)))

    def loss_value() -> float:
        with no_grad():
            trace_s = forward_model(student, tokens, mode="student", dropout_rate=0.0)
            trace_t = forward_model(teacher, tokens, mode="teacher")
            total, _ = loss_total(trace_s, trace_t, labels, "kd+gt")
        return total.item()

    trace_s = forward_model(student, tokens, mode="student", dropout_rate=0.0)
    with no_grad():
        trace_t = forward_model(teacher, tokens, mode="teacher")
    total, _ = loss_total(trace_s, trace_t, labels, "kd+gt")
    backward(total)

    worst = 0.0
    worst_name = ""
    h = 1e-4
    for name, param in student.params.items():
        flat = param.data.ravel()
        gflat = param.grad.ravel()
        picks = rng.choice(flat.size, size=min(samples_per_param, flat.size), replace=False)
        for i in picks:
            keep = flat[i]
            flat[i] = keep + h
            hi = loss_value()
            flat[i] = keep - h
            lo = loss_value()
            flat[i] = keep
            fd = (hi - lo) / (2 * h)
            err = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-8)
            if err > worst:
                worst, worst_name = err, f"{name}[{i}]"
    return {"worst_error": worst, "worst_at": worst_name, "tolerance": tolerance,
            "ok": worst <= tolerance}
