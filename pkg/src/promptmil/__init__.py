"""Prompt-tuned multiple-instance learning on a frozen ViT, with
memory-bounded gradient-retaining training."""

from .autodiff import (INFERENCE, RECORDING, Graph, MemMeter, Tensor, backward,
                       backward_with_seed, grad_check)
from .mil import MILHead, Prediction, TaskSpec, accuracy, auroc, loss
from .synth import Bag, GenSpec, generate_dataset, read_bag, write_bag
from .trainer import Model, TrainConfig, Trainer
from .vit import PromptSet, ViT, ViTConfig, count_trainable_params, forward_features

__version__ = "0.1.0"
