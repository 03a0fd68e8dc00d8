"""From-scratch convolutional classifier: layers, loss, model, optimizer."""

from .layers import (
    LayerError,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    dropout_mask,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
    softmax,
    softmax_backward,
)
from .loss import SAFE, UNSAFE, LossConfig, LossError, loss, soft_confusion, weight_decay_grads
from .model import (
    CheckpointError,
    Conv,
    Dense,
    Dropout,
    Flatten,
    LayerSpec,
    MaxPool,
    ModelError,
    ModelParams,
    ParamTensor,
    Relu,
    Softmax,
    adam_step,
    classifier_chain,
    forward,
    init_params,
    layer_shapes,
    load_checkpoint,
    loss_and_gradients,
    parameter_counts,
    predict,
    save_checkpoint,
)

__all__ = [
    "SAFE",
    "UNSAFE",
    "CheckpointError",
    "Conv",
    "Dense",
    "Dropout",
    "Flatten",
    "LayerError",
    "LayerSpec",
    "LossConfig",
    "LossError",
    "MaxPool",
    "ModelError",
    "ModelParams",
    "ParamTensor",
    "Relu",
    "Softmax",
    "adam_step",
    "classifier_chain",
    "conv2d_backward",
    "conv2d_forward",
    "dense_backward",
    "dense_forward",
    "dropout_mask",
    "forward",
    "init_params",
    "layer_shapes",
    "load_checkpoint",
    "loss",
    "loss_and_gradients",
    "maxpool_backward",
    "maxpool_forward",
    "parameter_counts",
    "predict",
    "relu_backward",
    "relu_forward",
    "save_checkpoint",
    "soft_confusion",
    "softmax",
    "softmax_backward",
    "weight_decay_grads",
]
