"""Transfer learning with feature-map alignment under per-filter attention.

Four fine-tuning objectives over a self-contained float64 autodiff core:
plain weight decay (l2), weight anchoring to the source (l2_sp), a frozen
extractor (l2_fe), and attention-weighted feature-map alignment (delta,
with delta_no_att as the unweighted variant).
"""

from ._kernels import BACKEND as kernel_backend
from .attention import (AblationScanner, AttentionTable, ablate_filter_loss,
                        attention_weights, build_attention_table, train_fe_head)
from .data import (AugmentSpec, Batch, Dataset, augment, load_dataset,
                   make_synthetic_transfer_pair, save_dimg, ten_crop)
from .gradcheck import grad_check, grad_check_params
from .models import (ConvNetModel, FeatureMapSet, LayerSpec, build_model,
                     desk32_layers, forward, forward_with_taps, load_checkpoint,
                     replace_head, save_checkpoint)
from .regularizers import (RegularizerConfig, behavioral_penalty, l2_penalty,
                           l2_sp_penalty, private_penalty, total_objective)
from .tensor import ConvKernel, Tensor, no_grad
from .trainer import (ScheduleSpec, SGDMomentum, TrainConfig, cross_validate_alpha,
                      evaluate_accuracy, fine_tune, pretrain, schedule_lr,
                      stratified_folds)

__all__ = [
    "AblationScanner", "AttentionTable", "AugmentSpec", "Batch", "ConvKernel",
    "ConvNetModel", "Dataset", "FeatureMapSet", "LayerSpec", "RegularizerConfig",
    "ScheduleSpec", "SGDMomentum", "Tensor", "TrainConfig", "ablate_filter_loss",
    "attention_weights", "augment", "behavioral_penalty", "build_attention_table",
    "build_model", "cross_validate_alpha", "desk32_layers", "evaluate_accuracy",
    "fine_tune", "forward", "forward_with_taps", "grad_check", "grad_check_params",
    "kernel_backend", "l2_penalty", "l2_sp_penalty", "load_checkpoint",
    "load_dataset", "make_synthetic_transfer_pair", "no_grad", "pretrain",
    "private_penalty", "replace_head", "save_checkpoint", "save_dimg",
    "schedule_lr", "stratified_folds", "ten_crop", "total_objective",
    "train_fe_head",
]

__version__ = "0.1.0"
