"""Masked-LM pre-training with instance regularization on hidden-state distributions."""

from .ennoise import EnnoiseConfig, EnnoisedInstance, corruption_rate, ennoise
from .model import HiddenStates, Model, ModelConfig, forward, init_model, load_checkpoint, mlm_logits, predict_masked, save_checkpoint
from .regularizer import (
    FilledSequence,
    LossBreakdown,
    RegularizerConfig,
    dpp,
    ecp,
    fill_back,
    hidden_to_distribution,
    mse_distance,
    regularized_loss,
)
from .tensor import Tensor, backward, no_grad
from .text import Vocab, build_vocab, decode, encode, make_batches
from .trainer import TrainConfig, lr_at, train, train_step

__version__ = "0.1.0"
