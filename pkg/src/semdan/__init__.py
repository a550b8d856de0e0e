"""Conditional domain-adversarial training (SDAN / SSDAN and baselines) on a small numpy autodiff."""

from .autodiff import Tensor, backward, detach, grad_reverse
from .conditioning import ConditioningStrategy, PrototypeBank, condition_input
from .datagen import DomainShiftSpec, generate, swap3
from .losses import LambdaSchedule
from .trainer import TrainConfig, run

__all__ = [
    "Tensor", "backward", "detach", "grad_reverse",
    "ConditioningStrategy", "PrototypeBank", "condition_input",
    "DomainShiftSpec", "generate", "swap3",
    "LambdaSchedule", "TrainConfig", "run",
]
