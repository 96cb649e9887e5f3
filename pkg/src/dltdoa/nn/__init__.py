"""Minimal neural-network core: the layers used by the NLOS classifier and the
localization predictor, Adam, losses, gradient checking and checkpoints."""

from .checkpoint import assign_parameters, load_checkpoint, save_checkpoint
from .gradcheck import check_model, numeric_gradient, relative_error
from .layers import (
    Conv1D, Dense, Dropout, Flatten, InstanceNorm, Layer, LayerSpec, MaxPool1D, ReLU, Sequential,
    Sigmoid, Tanh, build_sequential,
)
from .losses import binary_cross_entropy, mean_squared_error
from .optim import Adam, AdamState, adam_step
from .recurrent import LSTM, EncoderDecoder

__all__ = [
    "Adam", "AdamState", "Conv1D", "Dense", "Dropout", "EncoderDecoder", "Flatten", "InstanceNorm",
    "LSTM", "Layer", "LayerSpec", "MaxPool1D", "ReLU", "Sequential", "Sigmoid", "Tanh", "adam_step",
    "assign_parameters", "binary_cross_entropy", "build_sequential", "check_model", "load_checkpoint",
    "mean_squared_error", "numeric_gradient", "relative_error", "save_checkpoint",
]
