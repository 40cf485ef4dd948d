"""Iterative radix-2 FFT and the centered orthonormal 2-D transform.

Complex images travel as real arrays with a trailing (real, imag) axis, so the
differentiable wrappers :func:`fft2c` / :func:`ifft2c` convert at the boundary
and run the butterflies on numpy complex arrays internally.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor

__all__ = ["fft", "ifft", "fft2c_array", "ifft2c_array", "fft2c", "ifft2c", "is_power_of_two"]


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(m: int, dtype) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(m // 2) / m).astype(dtype)


def fft(x: np.ndarray) -> np.ndarray:
    """Unnormalized forward DFT along the last axis (power-of-two length only)."""
    n = x.shape[-1]
    if not is_power_of_two(n):
        raise ShapeError(f"radix-2 FFT needs a power-of-two length, got {n}")
    ctype = np.complex64 if x.dtype in (np.float32, np.complex64) else np.complex128
    y = np.asarray(x, dtype=ctype)[..., _bitrev(n)]
    lead = y.shape[:-1]
    m = 2
    while m <= n:
        half = m // 2
        blocks = y.reshape(lead + (n // m, m))
        even = blocks[..., :half]
        odd = blocks[..., half:] * _twiddles(m, ctype)
        y = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        m *= 2
    return y


def ifft(x: np.ndarray) -> np.ndarray:
    """Inverse DFT along the last axis, including the 1/n factor."""
    n = x.shape[-1]
    return np.conj(fft(np.conj(x))) / n


def _fft2_complex(c: np.ndarray, inverse: bool) -> np.ndarray:
    h, w = c.shape[-2:]
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise ShapeError(f"spatial dims must be powers of two, got {h}x{w}")
    op = ifft if inverse else fft
    c = np.fft.ifftshift(c, axes=(-2, -1))
    c = op(c)
    c = np.swapaxes(op(np.swapaxes(c, -1, -2)), -1, -2)
    c = np.fft.fftshift(c, axes=(-2, -1))
    scale = np.sqrt(h * w)
    return c * scale if inverse else c / scale


def _check_complex(x: np.ndarray) -> None:
    if x.ndim < 3 or x.shape[-1] != 2:
        raise ShapeError(f"expected [..., H, W, 2] complex layout, got {x.shape}")


def _to_complex(x: np.ndarray) -> np.ndarray:
    return x[..., 0] + 1j * x[..., 1]


def _to_real(c: np.ndarray, dtype) -> np.ndarray:
    return np.stack([c.real, c.imag], axis=-1).astype(dtype, copy=False)


def fft2c_array(x: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2-D DFT of a ``[..., H, W, 2]`` array."""
    _check_complex(x)
    return _to_real(_fft2_complex(_to_complex(x), inverse=False), x.dtype)


def ifft2c_array(x: np.ndarray) -> np.ndarray:
    _check_complex(x)
    return _to_real(_fft2_complex(_to_complex(x), inverse=True), x.dtype)


def fft2c(x) -> Tensor:
    # the transform is unitary, so its adjoint is the inverse transform
    x = as_tensor(x)
    return Tensor._from_op(fft2c_array(x.data), (x,), lambda g: (ifft2c_array(g),), "fft2c")


def ifft2c(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._from_op(ifft2c_array(x.data), (x,), lambda g: (fft2c_array(g),), "ifft2c")
