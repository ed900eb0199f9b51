"""Command-line entry points for training and experiments.

Configuration comes from one JSON file with ``model``, ``task``,
``teacher``, ``student``, and ``experiment`` sections; any field can be
overridden on the command line with repeated ``--set section.key=value``
flags. Run commands require ``--seed`` and ``--out-dir`` and exit non-zero
unless every run finished with finite losses.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .data import SyntheticTask, gen_synthetic_task
from .experiments import (
    ExperimentSpec,
    default_model_config,
    default_student_config,
    default_task,
    default_teacher_config,
    emit_metrics,
    quantized_model_size,
    run_experiment,
    train_teacher,
)
from .gradcheck import check_model_weights, check_quantizer_rules
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate, train

BERT_BASE_DIMS = dict(num_layers=12, hidden_size=768, num_heads=12, ffn_size=3072,
                      vocab=30522, max_seq=512)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _apply_overrides(config: dict, pairs: list[str]) -> dict:
    for pair in pairs or []:
        if "=" not in pair:
            raise SystemExit(f"--set expects section.key=value, got {pair!r}")
        dotted, raw = pair.split("=", 1)
        keys = dotted.split(".")
        target = config
        for key in keys[:-1]:
            target = target.setdefault(key, {})
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        target[keys[-1]] = value
    return config


def _parse_bits(text: str) -> tuple[int, int, int]:
    parts = text.split("-")
    if len(parts) != 3:
        raise SystemExit(f"--bits expects W-E-A like 4-4-8, got {text!r}")
    return tuple(int(p) for p in parts)


def _build(config: dict, seed: int | None = None):
    model = default_model_config(**config.get("model", {}))
    task_fields = dict(config.get("task", {}))
    task_fields.setdefault("vocab", model.vocab)
    task = default_task(**task_fields)
    teacher = default_teacher_config(**config.get("teacher", {}))
    student = default_student_config(**config.get("student", {}))
    if seed is not None:
        teacher = replace(teacher, seed=seed)
        student = replace(student, seed=seed)
    return model, task, teacher, student


def _finish_run(result, summary_row, out_dir: Path) -> None:
    steps = result.metrics + [{
        "step": len(result.metrics),
        "event": "final",
        "eval_accuracy": result.final_accuracy,
        "calibration": [r.as_dict() for r in result.calibration],
    }]
    emit_metrics(steps, [summary_row], out_dir)


def cmd_train_teacher(args) -> int:
    config = _apply_overrides(_load_config(args.config), args.set)
    model, task, teacher_cfg, _ = _build(config, args.seed)
    data = gen_synthetic_task(replace(task, seed=args.seed))
    state, result = train_teacher(model, data, teacher_cfg, args.seed)
    out_dir = Path(args.out_dir)
    save_checkpoint(state, out_dir / "teacher.json")
    size_bytes, ratio = quantized_model_size(replace(model, bits_w=32, bits_e=32, bits_a=32))
    from .experiments import _summary_row
    row = _summary_row("teacher", replace(teacher_cfg, bits_w=32, bits_e=32, bits_a=32),
                       result, result.final_accuracy, size_bytes, ratio, args.seed)
    _finish_run(result, row, out_dir)
    print(f"teacher accuracy: {result.final_accuracy:.4f}")
    print(f"checkpoint: {out_dir / 'teacher.json'}")
    return 0


def cmd_train(args) -> int:
    config = _apply_overrides(_load_config(args.config), args.set)
    model, task, _, student_cfg = _build(config, args.seed)
    if args.bits:
        bw, be, ba = _parse_bits(args.bits)
        student_cfg = replace(student_cfg, bits_w=bw, bits_e=be, bits_a=ba)
    if args.mode:
        student_cfg = replace(student_cfg, loss_mode=args.mode)
    if args.init_method:
        student_cfg = replace(student_cfg, init_method=args.init_method)

    teacher = load_checkpoint(args.teacher)
    data = gen_synthetic_task(replace(task, seed=args.seed))
    teacher_accuracy = evaluate(teacher, data.test_tokens, data.test_labels)
    result = train(teacher, data, student_cfg)

    out_dir = Path(args.out_dir)
    save_checkpoint(result.student, out_dir / "student.json")
    size_bytes, ratio = quantized_model_size(replace(
        model, bits_w=student_cfg.bits_w, bits_e=student_cfg.bits_e, bits_a=student_cfg.bits_a
    ))
    from .experiments import _summary_row
    row = _summary_row("student", student_cfg, result, teacher_accuracy,
                       size_bytes, ratio, args.seed)
    _finish_run(result, row, out_dir)
    print(f"student {student_cfg.bits_string()} {student_cfg.loss_mode} "
          f"accuracy: {result.final_accuracy:.4f} (teacher {teacher_accuracy:.4f})")
    return 0


def cmd_eval(args) -> int:
    config = _apply_overrides(_load_config(args.config), args.set)
    _, task, _, _ = _build(config)
    state = load_checkpoint(args.checkpoint)
    data = gen_synthetic_task(replace(task, seed=args.seed))
    tokens = data.test_tokens if args.split == "test" else data.train_tokens
    labels = data.test_labels if args.split == "test" else data.train_labels
    accuracy = evaluate(state, tokens, labels)
    print(f"{args.split} accuracy: {accuracy:.4f}")
    return 0


def _experiment_command(args, kind: str, **spec_overrides) -> int:
    config = _apply_overrides(_load_config(args.config), args.set)
    model, task, teacher_cfg, student_cfg = _build(config, args.seed)
    if getattr(args, "bits", None):
        bw, be, ba = _parse_bits(args.bits)
        student_cfg = replace(student_cfg, bits_w=bw, bits_e=be, bits_a=ba)
    experiment = dict(config.get("experiment", {}))
    experiment.pop("kind", None)
    experiment.update(spec_overrides)
    if getattr(args, "repetitions", None):
        experiment["repetitions"] = args.repetitions
    if "sweep_bits" in experiment:
        experiment["sweep_bits"] = tuple(experiment["sweep_bits"])
    spec = ExperimentSpec(
        name=config.get("name", kind),
        model=model, task=task, teacher=teacher_cfg, student=student_cfg,
        kind=kind, **experiment,
    )
    report = run_experiment(spec, args.out_dir)
    for row in report["rows"]:
        print(f"{row['bits']:>10}  {row['mode']:>8}  {row['init_method']:>9}  "
              f"acc {row['mean_accuracy']:.4f} ± {row['std_accuracy']:.4f}  "
              f"(teacher {row['mean_teacher_accuracy']:.4f}, x{row['compression_ratio']:.1f})")
    if not report["ok"]:
        for failure in report["failures"]:
            print(f"FAILED: {failure}", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args) -> int:
    return _experiment_command(args, "bit-sweep", sweep_axis=args.axis)


def cmd_ablation(args) -> int:
    return _experiment_command(args, "ablation")


def cmd_init_compare(args) -> int:
    return _experiment_command(args, "init-compare")


def cmd_gradcheck(args) -> int:
    quant = check_quantizer_rules(n_samples=args.samples, seed=args.seed)
    print(f"quantizer rules: in-range err {quant['worst_in_range_rule_error']:.2e}, "
          f"saturated err {quant['worst_saturated_error']:.2e}, "
          f"mask mismatches {quant['mask_mismatches']}, "
          f"pass-through mismatches {quant['pass_through_mismatches']}")
    weights = check_model_weights(seed=args.seed)
    print(f"model weights: worst rel err {weights['worst_error']:.2e} "
          f"at {weights['worst_at']} (tolerance {weights['tolerance']:.0e})")
    ok = quant["ok"] and weights["ok"]
    print("gradcheck:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_size(args) -> int:
    config = _apply_overrides(_load_config(args.config), args.set)
    model_fields = dict(config.get("model", {}))
    if args.preset == "bert-base":
        model_fields.update(BERT_BASE_DIMS)
    model = ModelConfig(**model_fields)
    if args.bits:
        bw, be, ba = _parse_bits(args.bits)
        model = replace(model, bits_w=bw, bits_e=be, bits_a=ba)
    size_bytes, ratio = quantized_model_size(model)
    print(f"bits {model.bits_string()}: {size_bytes} bytes "
          f"({size_bytes / 2**20:.1f} MB), compression x{ratio:.2f}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lsqdistill",
                                     description="Quantization training experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, run_command=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config field")
        p.add_argument("--seed", type=int, required=run_command, default=0)
        if run_command:
            p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train-teacher", help="train the full-precision teacher")
    add_common(p)
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("train", help="train a quantized student from a teacher checkpoint")
    add_common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint path")
    p.add_argument("--bits", help="W-E-A bit triple, e.g. 4-4-8")
    p.add_argument("--mode", choices=["gt-only", "kd-only", "kd+gt"])
    p.add_argument("--init-method", choices=["quantile", "constant"])
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the synthetic task")
    add_common(p, run_command=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="bit-width sweep")
    add_common(p)
    p.add_argument("--axis", choices=["weights", "activations"], default="weights")
    p.add_argument("--bits", help="fixed W-E-A triple for the non-swept axes")
    p.add_argument("--repetitions", type=int)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("ablation", help="loss-mode ablation at one bit config")
    add_common(p)
    p.add_argument("--bits", help="W-E-A bit triple, e.g. 4-4-8")
    p.add_argument("--repetitions", type=int)
    p.set_defaults(fn=cmd_ablation)

    p = sub.add_parser("init-compare", help="quantile vs constant step-size initialization")
    add_common(p)
    p.add_argument("--bits", help="W-E-A bit triple, e.g. 2-2-8")
    p.add_argument("--repetitions", type=int)
    p.set_defaults(fn=cmd_init_compare)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=200)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("size", help="model size and compression accounting")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--bits", help="W-E-A bit triple")
    p.add_argument("--preset", choices=["bert-base"])
    p.set_defaults(fn=cmd_size)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
