"""Desk-scale native ML: parameter vectors, models, losses, data handling."""

from .params import ParamVector, serialize_params, deserialize_params
from .models import ModelInstance, init_params, forward, gradient, expected_layout
from .losses import loss, loss_gradient, dice_score, metric_value
from .optim import sgd_step
from .data import (
    TabularDataset,
    FolderImageDataset,
    split_holdout,
    apply_preprocessing,
    iterate_batches,
)

__all__ = [
    "ParamVector", "serialize_params", "deserialize_params",
    "ModelInstance", "init_params", "forward", "gradient", "expected_layout",
    "loss", "loss_gradient", "dice_score", "metric_value",
    "sgd_step",
    "TabularDataset", "FolderImageDataset", "split_holdout",
    "apply_preprocessing", "iterate_batches",
]
