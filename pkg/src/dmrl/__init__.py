"""Dual mixup regularized adversarial domain adaptation on a small autodiff engine."""

from .autodiff import Tensor, backward, finite_diff_check
from .datasets import DomainDataset, SynthSpec, generate_synthetic, load_csv_digits, load_idx, make_batches
from .mixup import BetaSampler, mix_inputs, mix_labels, sample_lambda
from .models import Architecture, ModelParams, build, classify, discriminate, features
from .objectives import HyperParams, LossBreakdown, apply_variant
from .trainer import RunData, RunMetrics, lambda_d_schedule, lr_schedule, train, train_iteration

__version__ = "0.1.0"
