from dataclasses import dataclass

import numpy as np

from slimdet.errors import ShapeError
from slimdet.tensor import Tensor, batch_norm_eval, batch_norm_train, conv2d, relu

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1

__all__ = [
    "Conv2dParams", "BatchNormParams", "conv_forward", "batchnorm_forward_train",
    "batchnorm_forward_eval", "relu", "init_conv_arrays", "init_batchnorm_arrays",
]


@dataclass
class Conv2dParams:
    """Weights of one convolution node."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    pad: int = 0

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def validate(self) -> "Conv2dParams":
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"conv weight must be [Cout, Cin, K, K], got {self.weight.shape}")
        if self.kernel % 2 == 0:
            raise ShapeError(f"conv kernel must be odd, got {self.kernel}")
        if self.bias.shape != (self.out_channels,):
            raise ShapeError(f"conv bias must have shape ({self.out_channels},), got {self.bias.shape}")
        return self


@dataclass
class BatchNormParams:
    """Per-channel scaling factors, shifts and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM

    @classmethod
    def initial(cls, channels: int, dtype=np.float32, **kwargs) -> "BatchNormParams":
        arrays = init_batchnorm_arrays(channels, dtype)
        return cls(**{name: Tensor(value, dtype=dtype) for name, value in arrays.items()}, **kwargs)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def validate(self) -> "BatchNormParams":
        c = self.channels
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (c,):
                raise ShapeError(f"batch norm {name} must have shape ({c},), got {getattr(self, name).shape}")
        if not self.eps > 0:
            raise ShapeError("batch norm eps must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ShapeError("batch norm momentum must lie in (0, 1)")
        return self


def conv_forward(x: Tensor, params: Conv2dParams) -> Tensor:
    return conv2d(x, params.weight, params.bias, params.stride, params.pad)


def batchnorm_forward_train(x: Tensor, params: BatchNormParams) -> Tensor:
    """
    Normalise with batch statistics and fold them into the running averages.

    The biased (population) variance is used for both the output and the
    running-variance update: ``running <- (1 - momentum) * running + momentum * batch``.
    """
    params.validate()
    if x.ndim < 2 or x.shape[1] != params.channels:
        raise ShapeError(f"batch norm expects {params.channels} channels, got input shape {x.shape}")
    out, mean, var = batch_norm_train(x, params.gamma, params.beta, params.eps)
    m = params.momentum
    dtype = params.running_mean.dtype
    params.running_mean = Tensor((1.0 - m) * params.running_mean.data + m * mean, dtype=dtype)
    params.running_var = Tensor((1.0 - m) * params.running_var.data + m * var, dtype=dtype)
    return out


def batchnorm_forward_eval(x: Tensor, params: BatchNormParams) -> Tensor:
    params.validate()
    if x.ndim < 2 or x.shape[1] != params.channels:
        raise ShapeError(f"batch norm expects {params.channels} channels, got input shape {x.shape}")
    if np.any(params.running_var.data < 0):
        raise ShapeError("batch norm running_var has negative entries")
    return batch_norm_eval(x, params.gamma, params.beta, params.running_mean.data,
                           params.running_var.data, params.eps)


def init_conv_arrays(cin: int, cout: int, kernel: int, rng: np.random.Generator, dtype=np.float32):
    """Symmetric uniform weights with bound 1/sqrt(Cin*K^2), zero bias."""
    bound = 1.0 / np.sqrt(cin * kernel * kernel)
    weight = rng.uniform(-bound, bound, size=(cout, cin, kernel, kernel)).astype(dtype)
    return {"weight": weight, "bias": np.zeros(cout, dtype=dtype)}


def init_batchnorm_arrays(channels: int, dtype=np.float32):
    return {
        "gamma": np.ones(channels, dtype=dtype),
        "beta": np.zeros(channels, dtype=dtype),
        "running_mean": np.zeros(channels, dtype=dtype),
        "running_var": np.ones(channels, dtype=dtype),
    }
