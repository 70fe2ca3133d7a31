"""Pyramid-BLSTM + self-attention MOS regressor with hand-written gradients."""
from .checkpoint import CheckpointError, load_model, save_model
from .config import ABLATION_VARIANTS, ModelConfig, TrainConfig
from .network import (DimensionMismatchError, MOSModel, NonFiniteError, attention_weights, forward, loss_and_grad,
                      mse_loss, predict)
from .optim import AdamState, adam_step, clip_by_global_norm
from .params import ModelParameters, init_parameters
from .train import TrainHistory, TrainingDiverged, train
