"""Experiment orchestration: run matrices, metrics files, size accounting.

Each run trains its own teacher (full precision, label loss only) and then
one or more quantized students against it, writes per-step JSON-lines
metrics plus a summary CSV, and aggregates accuracy over seeds into a
report table.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset, SyntheticTask, gen_synthetic_task
from .model import ModelConfig, ModelState, activation_site_names, init_model_state, weight_site_names
from .training import TrainConfig, TrainResult, TrainingDivergedError, evaluate, train

__all__ = [
    "ExperimentSpec",
    "EXPERIMENT_KINDS",
    "SUMMARY_FIELDS",
    "parameter_census",
    "quantized_model_size",
    "default_model_config",
    "default_task",
    "default_teacher_config",
    "default_student_config",
    "train_teacher",
    "run_experiment",
    "emit_metrics",
    "read_metrics",
]

EXPERIMENT_KINDS = ("single", "bit-sweep", "ablation", "init-compare")
ABLATION_MODES = ("gt-only", "kd-only", "kd+gt")

SUMMARY_FIELDS = [
    "run_id",
    "bits",
    "mode",
    "init_method",
    "seed",
    "status",
    "final_accuracy",
    "teacher_accuracy",
    "loss_hidden",
    "loss_att",
    "loss_trm",
    "loss_pre",
    "loss_kd",
    "loss_gt",
    "loss_total",
    "size_bytes",
    "compression_ratio",
]

REPORT_FIELDS = ["bits", "mode", "init_method", "n_seeds", "mean_accuracy",
                 "std_accuracy", "mean_teacher_accuracy", "size_bytes", "compression_ratio"]

FULL_PRECISION_BYTES = 4  # storage accounting only; training math is float64


# ---------------------------------------------------------------------------
# size accounting
# ---------------------------------------------------------------------------

def parameter_census(config: ModelConfig) -> dict[str, int]:
    """Parameter counts by quantization class, derived from the config."""
    d, dff, L = config.hidden_size, config.ffn_size, config.num_layers
    layer_weights = L * (4 * d * d + d * dff + dff * d)
    embed_word = config.vocab * d
    exempt = (
        2 * d                      # segment table
        + config.max_seq * d       # position table
        + L * (dff + d + 4 * d)    # linear biases + layer-norm affine pairs
        + d * config.num_classes + config.num_classes
    )
    weight_scales = (6 * L if config.bits_w < 32 else 0) + (1 if config.bits_e < 32 else 0)
    act_scales = 10 * L if config.bits_a < 32 else 0
    return {
        "layer_weights": layer_weights,
        "embed_word": embed_word,
        "exempt": exempt,
        "weight_scales": weight_scales,
        "act_scales": act_scales,
    }


def quantized_model_size(config: ModelConfig) -> tuple[int, float]:
    """Stored bytes under the bit assignment, and the compression ratio.

    Quantized parameters cost bits/8 bytes, exempt parameters and scale
    factors 4 bytes each; the ratio divides the all-32-bit size by the
    quantized size.
    """
    census = parameter_census(config)
    quantized_bytes = (
        census["layer_weights"] * config.bits_w / 8.0
        + census["embed_word"] * config.bits_e / 8.0
        + census["exempt"] * FULL_PRECISION_BYTES
        + (census["weight_scales"] + census["act_scales"]) * FULL_PRECISION_BYTES
    )
    full_bytes = (
        census["layer_weights"] + census["embed_word"] + census["exempt"]
    ) * FULL_PRECISION_BYTES
    return int(round(quantized_bytes)), full_bytes / quantized_bytes


# ---------------------------------------------------------------------------
# defaults and spec
# ---------------------------------------------------------------------------

def default_model_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def default_task(**overrides) -> SyntheticTask:
    return SyntheticTask(**overrides)


def default_teacher_config(**overrides) -> TrainConfig:
    base = dict(epochs=12, batch_size=16, lr_weights=1e-3, loss_mode="gt-only",
                dropout=0.1, bits_w=32, bits_e=32, bits_a=32)
    base.update(overrides)
    return TrainConfig(**base)


def default_student_config(**overrides) -> TrainConfig:
    return TrainConfig(**overrides)


@dataclass
class ExperimentSpec:
    name: str = "toy"
    model: ModelConfig = field(default_factory=default_model_config)
    task: SyntheticTask = field(default_factory=default_task)
    teacher: TrainConfig = field(default_factory=default_teacher_config)
    student: TrainConfig = field(default_factory=default_student_config)
    kind: str = "single"
    repetitions: int = 5
    sweep_axis: str = "weights"       # "weights": W=E over sweep_bits, A fixed
    sweep_bits: tuple = (2, 4, 6, 8)  # "activations": A over sweep_bits, W-E fixed

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"kind must be one of {EXPERIMENT_KINDS}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.sweep_axis not in ("weights", "activations"):
            raise ValueError("sweep_axis must be 'weights' or 'activations'")


def _run_variants(spec: ExperimentSpec) -> list[TrainConfig]:
    base = spec.student
    if spec.kind == "single":
        return [base]
    if spec.kind == "bit-sweep":
        if spec.sweep_axis == "weights":
            return [replace(base, bits_w=b, bits_e=b) for b in spec.sweep_bits]
        return [replace(base, bits_a=b) for b in spec.sweep_bits]
    if spec.kind == "ablation":
        return [replace(base, loss_mode=mode) for mode in ABLATION_MODES]
    # init-compare: quantile initialization vs fixed constants
    return [replace(base, init_method="quantile"), replace(base, init_method="constant")]


# ---------------------------------------------------------------------------
# metrics emission
# ---------------------------------------------------------------------------

def emit_metrics(steps: list[dict], summary_rows: list[dict], out_dir) -> tuple[Path, Path]:
    """Write per-step JSON-lines and the summary CSV; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jsonl_path = out_dir / "metrics.jsonl"
    with jsonl_path.open("w") as fh:
        for record in steps:
            fh.write(json.dumps(record) + "\n")
    csv_path = out_dir / "summary.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        for row in summary_rows:
            writer.writerow(row)
    return jsonl_path, csv_path


def read_metrics(jsonl_path) -> list[dict]:
    lines = Path(jsonl_path).read_text().splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def _summary_row(run_id: str, cfg: TrainConfig, result: TrainResult | None,
                 teacher_accuracy: float, size_bytes: int, ratio: float,
                 seed: int, status: str = "ok") -> dict:
    final_loss = result.metrics[-1]["loss"] if result and result.metrics else {}
    return {
        "run_id": run_id,
        "bits": cfg.bits_string(),
        "mode": cfg.loss_mode,
        "init_method": cfg.init_method,
        "seed": seed,
        "status": status,
        "final_accuracy": result.final_accuracy if result else "",
        "teacher_accuracy": teacher_accuracy,
        "loss_hidden": final_loss.get("hidden", ""),
        "loss_att": final_loss.get("att", ""),
        "loss_trm": final_loss.get("trm", ""),
        "loss_pre": final_loss.get("pre", ""),
        "loss_kd": final_loss.get("kd", ""),
        "loss_gt": final_loss.get("gt", ""),
        "loss_total": final_loss.get("total", ""),
        "size_bytes": size_bytes,
        "compression_ratio": ratio,
    }


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------

def train_teacher(model_config: ModelConfig, data: Dataset, cfg: TrainConfig,
                  seed: int) -> tuple[ModelState, TrainResult]:
    """Full-precision run on the label loss; the result seeds distillation."""
    teacher_cfg = replace(cfg, bits_w=32, bits_e=32, bits_a=32,
                          loss_mode="gt-only", seed=seed)
    base_config = replace(model_config, bits_w=32, bits_e=32, bits_a=32)
    init_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xF00D])))
    blank = init_model_state(base_config, init_rng)
    result = train(blank, data, teacher_cfg)
    return result.student, result


def run_experiment(spec: ExperimentSpec, out_dir) -> dict:
    """Execute the run matrix; returns the aggregated report dictionary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = _run_variants(spec)

    summary_rows: list[dict] = []
    failures: list[str] = []
    by_variant: dict[tuple, list[dict]] = {}

    for rep in range(spec.repetitions):
        seed = spec.student.seed + rep
        data = gen_synthetic_task(replace(spec.task, seed=seed))
        teacher, teacher_result = train_teacher(spec.model, data, spec.teacher, seed)
        teacher_accuracy = teacher_result.final_accuracy

        teacher_dir = out_dir / "runs" / f"{spec.name}_teacher_s{seed}"
        emit_metrics(teacher_result.metrics, [_summary_row(
            teacher_dir.name, replace(spec.teacher, bits_w=32, bits_e=32, bits_a=32,
                                      loss_mode="gt-only"),
            teacher_result, teacher_accuracy,
            *quantized_model_size(replace(spec.model, bits_w=32, bits_e=32, bits_a=32)),
            seed=seed,
        )], teacher_dir)

        for variant in variants:
            cfg = replace(variant, seed=seed)
            run_id = (f"{spec.name}_{cfg.bits_string()}_{cfg.loss_mode}"
                      f"_{cfg.init_method}_s{seed}")
            run_dir = out_dir / "runs" / run_id
            size_bytes, ratio = quantized_model_size(replace(
                spec.model, bits_w=cfg.bits_w, bits_e=cfg.bits_e, bits_a=cfg.bits_a
            ))
            try:
                result = train(teacher, data, cfg)
            except TrainingDivergedError as err:
                failures.append(f"{run_id}: {err}")
                row = _summary_row(run_id, cfg, None, teacher_accuracy,
                                   size_bytes, ratio, seed, status="failed")
                summary_rows.append(row)
                emit_metrics([], [row], run_dir)
                continue
            row = _summary_row(run_id, cfg, result, teacher_accuracy,
                               size_bytes, ratio, seed)
            summary_rows.append(row)
            steps = result.metrics + [{
                "step": len(result.metrics),
                "event": "final",
                "eval_accuracy": result.final_accuracy,
                "calibration": [r.as_dict() for r in result.calibration],
            }]
            emit_metrics(steps, [row], run_dir)
            key = (cfg.bits_string(), cfg.loss_mode, cfg.init_method)
            by_variant.setdefault(key, []).append(row)

    emit_metrics([], summary_rows, out_dir)

    report_rows = []
    for (bits, mode, init_method), rows in by_variant.items():
        accs = np.array([r["final_accuracy"] for r in rows], dtype=np.float64)
        teach = np.array([r["teacher_accuracy"] for r in rows], dtype=np.float64)
        report_rows.append({
            "bits": bits,
            "mode": mode,
            "init_method": init_method,
            "n_seeds": len(rows),
            "mean_accuracy": float(accs.mean()),
            "std_accuracy": float(accs.std()),
            "mean_teacher_accuracy": float(teach.mean()),
            "size_bytes": rows[0]["size_bytes"],
            "compression_ratio": rows[0]["compression_ratio"],
        })

    report = {
        "name": spec.name,
        "kind": spec.kind,
        "repetitions": spec.repetitions,
        "rows": report_rows,
        "failures": failures,
        "ok": not failures,
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2))
    with (out_dir / "report.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        for row in report_rows:
            writer.writerow(row)
    return report
