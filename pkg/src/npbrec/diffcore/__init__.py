"""Minimal reverse-mode automatic differentiation over numpy arrays."""

from .fft import fft, fft2c, fft2c_array, ifft, ifft2c, ifft2c_array, is_power_of_two
from .gradcheck import numerical_gradient, max_relative_error
from .ops import (
    avg_pool2,
    box_filter,
    complex_abs2,
    complex_conj_mul,
    complex_mul,
    concat_channels,
    conv2d,
    dropout,
    leaky_relu,
    nearest_upsample2,
    root_sum_squares,
    sqrt,
)
from .tensor import ShapeError, Tensor, as_tensor, backward, concat, grad_enabled, no_grad, stack
