"""Learned-step-size fake quantization with teacher-student distillation."""

from .calibration import CalibrationRecord, calibrate_activations, init_scale_factor
from .data import Dataset, SyntheticTask, gen_synthetic_task, majority_label
from .experiments import (
    ExperimentSpec,
    emit_metrics,
    parameter_census,
    quantized_model_size,
    run_experiment,
    train_teacher,
)
from .losses import LossBreakdown, loss_att, loss_hidden, loss_kd, loss_total
from .model import (
    ForwardTrace,
    ModelConfig,
    ModelState,
    forward_model,
    init_model_state,
    load_checkpoint,
    save_checkpoint,
)
from .quant import QuantSpec, ScaleFactor, fake_quantize, quant_levels
from .tensor import Tensor, backward, no_grad
from .training import Adam, TrainConfig, TrainResult, evaluate, lr_schedule, train

__version__ = "0.1.0"
