from .tensor import (Tensor, add, avgpool2d, batchnorm2d, concat_channels, conv2d,
                     conv_output_size, dropout, mae_loss, maxpool2d, relu, upsample_nearest)
from .optim import AdamState, NonFiniteGradientError, adam_step, xavier_init
from .layers import (AvgPool, BatchNorm2d, Conv2d, ConvBNReLU, Dropout, MaxPool, Module,
                     Sequential, Upsample)

__all__ = [
    "Tensor", "add", "avgpool2d", "batchnorm2d", "concat_channels", "conv2d", "conv_output_size",
    "dropout", "mae_loss", "maxpool2d", "relu", "upsample_nearest",
    "AdamState", "NonFiniteGradientError", "adam_step", "xavier_init",
    "AvgPool", "BatchNorm2d", "Conv2d", "ConvBNReLU", "Dropout", "MaxPool", "Module",
    "Sequential", "Upsample",
]
