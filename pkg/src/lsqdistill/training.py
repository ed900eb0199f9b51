"""Quantization training loop: calibrate step sizes, then distill.

The run clones the teacher into a student, initializes weight step sizes
from the pretrained weights and activation step sizes from one calibration
batch, then iterates epochs of batches computing the composed loss,
backpropagating, and applying per-group Adam updates whose learning rates
decay linearly to zero. Model weights, weight step sizes, and activation
step sizes form three disjoint parameter groups with separate initial
rates; the teacher is never updated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calibration import (
    CalibrationRecord,
    calibrate_activations,
    init_scale_factor,
    make_record,
    step_from_threshold,
)
from .losses import LOSS_MODES, LossBreakdown, loss_total
from .model import (
    ModelConfig,
    ModelState,
    VALID_BITS,
    clone_state,
    forward_model,
    weight_site_bits,
    weight_site_names,
)
from .quant import SCALE_FLOOR, QuantSpec, ScaleFactor
from .tensor import Tensor, backward, no_grad

__all__ = [
    "TrainConfig",
    "ParamGroup",
    "Adam",
    "TrainResult",
    "TrainingDivergedError",
    "GROUP_WEIGHTS",
    "GROUP_WEIGHT_SCALES",
    "GROUP_ACT_SCALES",
    "lr_schedule",
    "build_param_groups",
    "evaluate",
    "train",
]

GROUP_WEIGHTS = "model-weights"
GROUP_WEIGHT_SCALES = "weight-scales"
GROUP_ACT_SCALES = "activation-scales"

INIT_METHODS = ("quantile", "constant")


class TrainingDivergedError(RuntimeError):
    """The training loss went non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 16
    # Toy-task default; the conventional fine-tuning rate of 2e-5 assumes a
    # large pretrained model.
    lr_weights: float = 1e-3
    lr_scale_w: float = 1e-3
    lr_scale_a: float = 2e-2
    loss_mode: str = "kd+gt"
    seed: int = 0
    gamma: float = 0.05
    dropout: float = 0.1
    bits_w: int = 8
    bits_e: int = 8
    bits_a: int = 8
    init_method: str = "quantile"
    const_scale_w: float = 4.0
    const_scale_a: float = 16.0
    eval_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        for name in ("lr_weights", "lr_scale_w", "lr_scale_a"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.init_method not in INIT_METHODS:
            raise ValueError(f"init_method must be one of {INIT_METHODS}")
        for name in ("bits_w", "bits_e", "bits_a"):
            if getattr(self, name) not in VALID_BITS:
                raise ValueError(f"{name} must be one of {VALID_BITS}")

    def bits_string(self) -> str:
        return f"{self.bits_w}-{self.bits_e}-{self.bits_a}"


@dataclass
class ParamGroup:
    kind: str
    names: list[str]
    params: list[Tensor]
    lr0: float


def lr_schedule(step: int, total_steps: int, lr0: float) -> float:
    """Linear decay from lr0 at step 0 to exactly 0 at step == total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps)


class Adam:
    """Adam with per-group learning rates.

    Weight parameters take the usual additive update. Step-size parameters
    are updated in the log domain (an equal Adam step applied
    multiplicatively), because step sizes span several orders of magnitude
    across sites and a fixed additive step of ~lr would swamp the small
    ones; the learning rate then means a relative change per step. Step
    sizes are floored at ``SCALE_FLOOR`` after each update.
    """

    def __init__(self, groups: list[ParamGroup], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [[np.zeros_like(p.data) for p in g.params] for g in groups]
        self._v = [[np.zeros_like(p.data) for p in g.params] for g in groups]

    def step(self, lrs: dict[str, float]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for gi, group in enumerate(self.groups):
            lr = lrs[group.kind]
            multiplicative = group.kind in (GROUP_WEIGHT_SCALES, GROUP_ACT_SCALES)
            for pi, param in enumerate(group.params):
                if param.grad is None:
                    raise ValueError(f"missing gradient for {group.names[pi]!r}")
                # chain rule: d/d(log s) = s * d/ds
                grad = param.grad * param.data if multiplicative else param.grad
                m = self._m[gi][pi]
                v = self._v[gi][pi]
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * grad**2
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                if multiplicative:
                    param.data = np.maximum(param.data * np.exp(-lr * update), SCALE_FLOOR)
                else:
                    param.data = param.data - lr * update

    def zero_grad(self) -> None:
        for group in self.groups:
            for param in group.params:
                param.grad = None


def build_param_groups(state: ModelState, cfg: TrainConfig) -> list[ParamGroup]:
    """Partition everything trainable into the three optimizer groups."""
    weights = ParamGroup(
        kind=GROUP_WEIGHTS,
        names=list(state.params),
        params=[state.params[n] for n in state.params],
        lr0=cfg.lr_weights,
    )
    wscales = ParamGroup(
        kind=GROUP_WEIGHT_SCALES,
        names=[f"scale.{n}" for n in state.weight_scales],
        params=[sf.param for sf in state.weight_scales.values()],
        lr0=cfg.lr_scale_w,
    )
    ascales = ParamGroup(
        kind=GROUP_ACT_SCALES,
        names=[f"scale.{n}" for n in state.act_scales],
        params=[sf.param for sf in state.act_scales.values()],
        lr0=cfg.lr_scale_a,
    )
    return [weights, wscales, ascales]


@dataclass
class TrainResult:
    student: ModelState
    metrics: list[dict]
    calibration: list[CalibrationRecord] = field(default_factory=list)
    final_accuracy: float = 0.0


def evaluate(state: ModelState, tokens, labels) -> float:
    """Classification accuracy with dropout off (quantization stays active)."""
    with no_grad():
        trace = forward_model(state, tokens, mode="student", dropout_rate=0.0)
    predictions = trace.logits.data.argmax(axis=-1)
    return float((predictions == np.asarray(labels)).mean())


def _init_weight_scales(student: ModelState, cfg: TrainConfig) -> list[CalibrationRecord]:
    records = []
    for name in weight_site_names(student.config):
        bits = weight_site_bits(student.config, name)
        if bits == 32:
            continue
        values = student.params[name].data
        if cfg.init_method == "quantile":
            threshold = init_scale_factor(values, cfg.gamma)
        else:
            threshold = cfg.const_scale_w
        step = step_from_threshold(threshold, QuantSpec(bits, signed=True))
        student.weight_scales[name] = ScaleFactor.create(name, "weight", step)
        records.append(make_record(name, "weight", cfg.init_method, values, threshold))
    return records


def _init_act_scales(student: ModelState, cfg: TrainConfig, tokens) -> list[CalibrationRecord]:
    spec = QuantSpec(cfg.bits_a, signed=True)
    if cfg.init_method == "quantile":
        thresholds, records = calibrate_activations(student, tokens, gamma=cfg.gamma)
        for site, threshold in thresholds.items():
            student.act_scales[site] = ScaleFactor.create(
                site, "activation", step_from_threshold(threshold, spec))
        return records
    records = []
    capture: dict[str, list] = {}
    forward_model(student, tokens, mode="calibrate", capture=capture)
    for site, chunks in capture.items():
        values = np.concatenate([c.ravel() for c in chunks])
        step = step_from_threshold(cfg.const_scale_a, spec)
        student.act_scales[site] = ScaleFactor.create(site, "activation", step)
        records.append(make_record(site, "activation", "constant", values, cfg.const_scale_a))
    return records


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def train(teacher: ModelState, data, cfg: TrainConfig) -> TrainResult:
    """Clone the teacher, calibrate step sizes, and run the full loop."""
    student_config = ModelConfig(**{
        **teacher.config.__dict__,
        "bits_w": cfg.bits_w, "bits_e": cfg.bits_e, "bits_a": cfg.bits_a,
    })
    student = clone_state(teacher, student_config)

    shuffle_seed, dropout_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_seed))
    dropout_rng = np.random.Generator(np.random.PCG64(dropout_seed))

    train_tokens = data.train_tokens
    train_labels = data.train_labels
    n_train = len(train_tokens)
    epoch_orders = [shuffle_rng.permutation(n_train) for _ in range(cfg.epochs)]

    records = _init_weight_scales(student, cfg)
    if cfg.bits_a < 32:
        # Calibration batch: the first batch of the first seeded shuffle.
        calib_idx = epoch_orders[0][: cfg.batch_size]
        records += _init_act_scales(student, cfg, train_tokens[calib_idx])
    student.assert_site_census()

    groups = build_param_groups(student, cfg)
    optimizer = Adam(groups)
    batches_per_epoch = (n_train + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * batches_per_epoch

    metrics: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        for batch_idx in _batches(epoch_orders[epoch], cfg.batch_size):
            tokens = train_tokens[batch_idx]
            labels = train_labels[batch_idx]

            lrs = {
                GROUP_WEIGHTS: lr_schedule(step, total_steps, cfg.lr_weights),
                GROUP_WEIGHT_SCALES: lr_schedule(step, total_steps, cfg.lr_scale_w),
                GROUP_ACT_SCALES: lr_schedule(step, total_steps, cfg.lr_scale_a),
            }

            trace_s = forward_model(student, tokens, mode="student",
                                    dropout_rate=cfg.dropout, rng=dropout_rng)
            with no_grad():
                trace_t = forward_model(teacher, tokens, mode="teacher")
            total, breakdown = loss_total(trace_s, trace_t, labels, cfg.loss_mode)
            if not total.is_finite():
                raise TrainingDivergedError(
                    f"non-finite loss at step {step} (epoch {epoch}): {breakdown.as_dict()}"
                )
            backward(total)
            optimizer.step(lrs)
            optimizer.zero_grad()

            record = {
                "step": step,
                "epoch": epoch,
                "lr": {
                    "weights": lrs[GROUP_WEIGHTS],
                    "weight_scales": lrs[GROUP_WEIGHT_SCALES],
                    "activation_scales": lrs[GROUP_ACT_SCALES],
                },
                "loss": breakdown.as_dict(),
            }
            step += 1
            if cfg.eval_every and step % cfg.eval_every == 0:
                record["eval_accuracy"] = evaluate(student, data.test_tokens, data.test_labels)
            metrics.append(record)

    final_accuracy = evaluate(student, data.test_tokens, data.test_labels)
    return TrainResult(student=student, metrics=metrics, calibration=records,
                       final_accuracy=final_accuracy)
