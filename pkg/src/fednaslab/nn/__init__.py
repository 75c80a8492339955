"""Numpy neural-network kernel with per-sample gradients."""

from .layers import (
    AvgPool,
    ConvBlock,
    DepthwiseConv,
    GlobalAvgPool,
    Layer,
    Linear,
    MaxPool,
    PerSampleNorm,
    PointwiseConv,
    ReLU,
    Reshape,
    Sequential,
    TransposeConv,
)
from .model import (
    Adam,
    Model,
    apply_update,
    batch_gradient,
    evaluate_accuracy,
    loss_and_per_sample_grads,
    mse,
    per_sample_gradients,
    softmax_cross_entropy,
    train_plain_sgd,
)

__all__ = [
    "AvgPool",
    "ConvBlock",
    "DepthwiseConv",
    "GlobalAvgPool",
    "Layer",
    "Linear",
    "MaxPool",
    "PerSampleNorm",
    "PointwiseConv",
    "ReLU",
    "Reshape",
    "Sequential",
    "TransposeConv",
    "Adam",
    "Model",
    "apply_update",
    "batch_gradient",
    "evaluate_accuracy",
    "loss_and_per_sample_grads",
    "mse",
    "per_sample_gradients",
    "softmax_cross_entropy",
    "train_plain_sgd",
]
