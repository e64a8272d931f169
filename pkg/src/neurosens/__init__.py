"""Neuron sensitivity analysis and sensitive-neuron stabilizing training on a small numpy autodiff."""

from .attacks import AttackSpec, DualPairSet, build_dual_pairs, pgd, targeted_set
from .data import Dataset, load_cifar_binary, load_idx, split, synth_dataset
from .models import Model, ModelSpec, build_model, forward, load_checkpoint, predict, save_checkpoint
from .training import TrainConfig, train_alp, train_pat, train_sns, train_vanilla

__version__ = "0.1.0"
