"""Multi-coil forward model with column undersampling masks.

Complex arrays use a trailing (real, imag) axis: images are ``[H, W, 2]``,
coil data and sensitivity maps ``[Nc, H, W, 2]``. Masks act on the width
(phase-encode) axis only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .diffcore import ShapeError, Tensor, as_tensor, complex_conj_mul, complex_mul, fft2c_array, ifft2c_array
from .diffcore import ops as F

__all__ = [
    "SamplingMask",
    "MaskError",
    "default_center_fraction",
    "make_equispaced_mask",
    "make_random_mask",
    "make_mask",
    "forward_model",
    "apply_mask",
    "expand",
    "reduce",
    "rss",
    "zero_filled",
    "smaps_normalization_error",
]


class MaskError(ValueError):
    """Raised for mask parameters that cannot meet the sampling budget."""


@dataclass(frozen=True)
class SamplingMask:
    columns: np.ndarray
    kind: str
    acceleration: int
    center_fraction: float
    seed: int = 0

    @property
    def width(self) -> int:
        return int(self.columns.shape[0])

    @property
    def num_sampled(self) -> int:
        return int(self.columns.sum())

    def center_slice(self) -> slice:
        """Maximal run of sampled columns containing the k-space center."""
        cols = self.columns
        mid = self.width // 2
        if not cols[mid]:
            raise MaskError("mask does not sample the k-space center")
        lo, hi = mid, mid
        while lo > 0 and cols[lo - 1]:
            lo -= 1
        while hi < self.width - 1 and cols[hi + 1]:
            hi += 1
        return slice(lo, hi + 1)

    def as_array(self, dtype=np.float64) -> np.ndarray:
        """Broadcastable ``[1, W, 1]`` view for ``[..., H, W, 2]`` data."""
        return self.columns.astype(dtype).reshape(1, -1, 1)


def default_center_fraction(acceleration: int) -> float:
    known = {4: 0.08, 8: 0.04}
    return known.get(acceleration, 0.32 / acceleration)


def _center_block(width: int, num_low: int) -> np.ndarray:
    cols = np.zeros(width, dtype=bool)
    pad = (width - num_low + 1) // 2
    cols[pad : pad + num_low] = True
    return cols


def _validate(width: int, acceleration: int, center_fraction: float) -> int:
    if width < 16:
        raise MaskError(f"mask width must be at least 16, got {width}")
    if acceleration < 1:
        raise MaskError(f"acceleration must be a positive integer, got {acceleration}")
    if not 0.0 < center_fraction < 1.0:
        raise MaskError(f"center fraction must lie in (0, 1), got {center_fraction}")
    if center_fraction * width < 2 and acceleration > 1:
        raise MaskError(f"center block of {center_fraction * width:.2f} columns is below the 2-column minimum")
    if acceleration > 1 and center_fraction * width >= width / acceleration:
        raise MaskError(
            f"center block ({center_fraction * width:.2f} columns) exceeds the budget of {width / acceleration:.2f}"
        )
    num_low = max(1, int(round(center_fraction * width)))
    if acceleration > 1 and num_low >= width / acceleration:
        raise MaskError(f"{num_low} center columns leave no budget for width {width} at R={acceleration}")
    return num_low


def make_equispaced_mask(width: int, acceleration: int, center_fraction: Optional[float] = None, offset: int = 0):
    """Center block plus every ``R_adj``-th column starting at ``offset``.

    The spacing ``R_adj`` is stretched so the lattice, merged with the
    center block, holds close to ``width / acceleration`` columns.
    """
    if center_fraction is None:
        center_fraction = default_center_fraction(acceleration)
    num_low = _validate(width, acceleration, center_fraction)
    center = _center_block(width, num_low)
    target = width / acceleration
    if acceleration == 1:
        return SamplingMask(np.ones(width, dtype=bool), "equispaced", 1, center_fraction, offset)

    def lattice(spacing: float) -> np.ndarray:
        cols = center.copy()
        pos = np.around(np.arange(offset % width, width, spacing)).astype(int)
        cols[pos[pos < width]] = True
        return cols

    spacing = acceleration * (num_low - width) / (num_low * acceleration - width)
    cols = lattice(spacing)
    if abs(cols.sum() - target) > 1:
        # overlap with the center block dropped lattice points; retune the spacing
        candidates = np.linspace(1.0, 2 * width, 4000)
        counts = np.array([lattice(s).sum() for s in candidates])
        best = candidates[np.argmin(np.abs(counts - target))]
        cols = lattice(best)
    return SamplingMask(cols, "equispaced", acceleration, center_fraction, offset)


def make_random_mask(width: int, acceleration: int, center_fraction: Optional[float] = None, seed: int = 0):
    """Center block plus a uniform draw of outer columns, ``floor(W/R)`` in total."""
    if center_fraction is None:
        center_fraction = default_center_fraction(acceleration)
    num_low = _validate(width, acceleration, center_fraction)
    cols = _center_block(width, num_low)
    budget = width // acceleration - num_low
    if budget > 0:
        rng = np.random.default_rng(seed)
        outer = np.flatnonzero(~cols)
        cols[rng.choice(outer, size=min(budget, outer.size), replace=False)] = True
    return SamplingMask(cols, "random", acceleration, center_fraction, seed)


def make_mask(kind: str, width: int, acceleration: int, center_fraction: Optional[float] = None, seed: int = 0):
    if kind == "random":
        return make_random_mask(width, acceleration, center_fraction, seed)
    if kind == "equispaced":
        return make_equispaced_mask(width, acceleration, center_fraction, offset=0)
    raise MaskError(f"unknown mask kind {kind!r}")


def _check_coil_shapes(image_shape: tuple, smaps_shape: tuple) -> None:
    if len(smaps_shape) != 4 or smaps_shape[-1] != 2:
        raise ShapeError(f"sensitivity maps must be [Nc, H, W, 2], got {smaps_shape}")
    if tuple(image_shape[-3:]) != tuple(smaps_shape[1:]):
        raise ShapeError(f"image {image_shape} does not match sensitivity maps {smaps_shape}")


def forward_model(image: np.ndarray, smaps: np.ndarray, noise_std: float = 0.0, seed: int = 0) -> np.ndarray:
    """Per-coil k-space ``fft2c(S_i x) + noise``.

    Noise is i.i.d. Gaussian with ``noise_std`` per real component.
    """
    image = np.asarray(image)
    smaps = np.asarray(smaps)
    _check_coil_shapes(image.shape, smaps.shape)
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    coil_images = complex_mul(smaps, image[None]).data
    k = fft2c_array(coil_images)
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        k = k + noise_std * rng.standard_normal(k.shape).astype(k.dtype)
    return k


def apply_mask(kspace, mask: SamplingMask):
    """Zero the unsampled columns of every coil."""
    data = kspace.data if isinstance(kspace, Tensor) else np.asarray(kspace)
    if data.shape[-2] != mask.width:
        raise ShapeError(f"mask width {mask.width} does not match k-space width {data.shape[-2]}")
    m = mask.as_array(data.dtype)
    if isinstance(kspace, Tensor):
        return kspace * m
    return data * m


def expand(image, smaps) -> Tensor:
    """Image seen by each coil: ``S_i * x`` for every coil ``i``."""
    image, smaps = as_tensor(image), as_tensor(smaps)
    _check_coil_shapes(image.shape, smaps.shape)
    if image.ndim == 3:
        image = image.reshape((1,) + image.shape)
    return complex_mul(smaps, image)


def reduce(coil_images, smaps) -> Tensor:
    """Adjoint of :func:`expand`: ``sum_i conj(S_i) * x_i``."""
    coil_images, smaps = as_tensor(coil_images), as_tensor(smaps)
    if coil_images.shape != smaps.shape:
        raise ShapeError(f"coil images {coil_images.shape} do not match sensitivity maps {smaps.shape}")
    return complex_conj_mul(smaps, coil_images).sum(axis=0)


def rss(coil_images) -> Tensor:
    """Root-sum-of-squares magnitude over the coil axis, ``[Nc,H,W,2] -> [H,W]``."""
    coil_images = as_tensor(coil_images)
    if coil_images.ndim != 4 or coil_images.shape[-1] != 2:
        raise ShapeError(f"rss expects [Nc, H, W, 2], got {coil_images.shape}")
    return F.root_sum_squares(coil_images, axis=(0, -1))


def zero_filled(masked_kspace: np.ndarray) -> np.ndarray:
    """RSS of the inverse transform of (already masked) k-space."""
    return rss(ifft2c_array(np.asarray(masked_kspace))).data


def smaps_normalization_error(smaps: np.ndarray) -> float:
    """Max deviation of ``sum_i |S_i|^2`` from 1 over pixels any coil covers."""
    energy = (np.asarray(smaps, dtype=np.float64) ** 2).sum(axis=(0, -1))
    covered = energy > 0
    if not covered.any():
        return 0.0
    return float(np.max(np.abs(energy[covered] - 1.0)))

