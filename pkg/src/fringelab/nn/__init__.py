"""From-scratch numpy CNN engine for fringe analysis."""

from .io import load_weights, read_loss_csv, save_weights, write_loss_csv
from .model import ModelSpec, backward, build_model, count_params, forward, loss_and_grad, param_shapes
from .optim import AdamState, adam_step
from .train import (
    CNN1_SPEC,
    CNN2_SPEC,
    TrainResult,
    cnn1_samples,
    cnn2_input,
    cnn2_samples,
    infer_cnn1,
    infer_cnn2,
    reference_inputs,
    train,
    train_from_manifest,
)

__all__ = [
    "AdamState", "CNN1_SPEC", "CNN2_SPEC", "ModelSpec", "TrainResult", "adam_step", "backward",
    "build_model", "cnn1_samples", "cnn2_input", "cnn2_samples", "count_params", "forward",
    "infer_cnn1", "infer_cnn2", "load_weights", "loss_and_grad", "param_shapes", "read_loss_csv",
    "reference_inputs", "save_weights", "train", "train_from_manifest", "write_loss_csv",
]
