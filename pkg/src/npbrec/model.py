"""Cascaded k-space reconstruction network with learned sensitivity maps.

The forward pass is

1. estimate coil maps from the fully sampled center columns (SME CNN),
2. apply ``T`` cascades ``k <- k - eta * M (k - k_tilde) + G(k)`` with
   ``G = fft2c . expand . CNN . reduce . ifft2c``,
3. return the root-sum-of-squares image of the final k-space.

Weights are a plain ``dict`` mapping unique names to numpy arrays.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .diffcore import Tensor, as_tensor, fft2c, ifft2c
from .diffcore import ops as F
from .mri import MaskError, SamplingMask, expand, reduce, rss

__all__ = [
    "ModelConfig",
    "WeightsMismatchError",
    "CheckpointFormatError",
    "init_model",
    "parameter_shapes",
    "cnn_forward",
    "sme_estimate",
    "cascade_step",
    "forward_kspace",
    "model_forward",
    "save_checkpoint",
    "load_checkpoint",
]

CKPT_MAGIC = b"NPBCKPT\x00"
CKPT_VERSION = 1


class WeightsMismatchError(ValueError):
    """Weights do not have the names/shapes implied by the model config."""


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    cascades: int = 8
    channels: int = 8
    depth: int = 3
    kernel_size: int = 3
    architecture: str = "residual"
    eta_init: float = 1.0
    slope: float = 0.1
    with_dropout: bool = False
    dropout_p: float = 0.001
    dropout_in_sme: bool = True

    def __post_init__(self):
        if self.cascades < 1:
            raise ValueError("need at least one cascade")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.architecture not in ("residual", "unet"):
            raise ValueError(f"unknown CNN architecture {self.architecture!r}")
        if self.architecture == "residual" and self.depth < 2:
            raise ValueError("residual stack needs depth >= 2")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")

    def to_dict(self) -> dict:
        return asdict(self)


def _cnn_layers(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    c = cfg.channels
    if cfg.architecture == "residual":
        chans = [2] + [c] * (cfg.depth - 1) + [2]
        return [(f"conv{i}", chans[i], chans[i + 1]) for i in range(cfg.depth)]
    return [
        ("enc0", 2, c),
        ("enc1", c, c),
        ("mid0", c, 2 * c),
        ("mid1", 2 * c, 2 * c),
        ("dec0", 3 * c, c),
        ("out", c, 2),
    ]


def _cnn_prefixes(cfg: ModelConfig) -> list[str]:
    return ["sme"] + [f"cascade{m}" for m in range(cfg.cascades)]


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    k = cfg.kernel_size
    shapes = {}
    for prefix in _cnn_prefixes(cfg):
        for name, cin, cout in _cnn_layers(cfg):
            shapes[f"{prefix}.{name}.weight"] = (cout, cin, k, k)
            shapes[f"{prefix}.{name}.bias"] = (cout,)
        if prefix != "sme":
            shapes[f"{prefix}.eta"] = (1,)
    return shapes


def init_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32, zero_last: bool = True) -> dict:
    """Fan-in scaled uniform kernels, zero biases, ``eta = eta_init``.

    With ``zero_last`` the final layer of every CNN starts at zero, so the
    untrained network performs data consistency only.
    """
    rng = np.random.default_rng(seed)
    last = _cnn_layers(cfg)[-1][0]
    weights = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".eta"):
            weights[name] = np.full(shape, cfg.eta_init, dtype=dtype)
        elif name.endswith(".bias"):
            weights[name] = np.zeros(shape, dtype=dtype)
        elif zero_last and name.split(".")[1] == last:
            weights[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = 1.0 / np.sqrt(fan_in)
            weights[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return weights


def check_weights(weights: dict, cfg: ModelConfig) -> None:
    expected = parameter_shapes(cfg)
    if set(weights) != set(expected):
        missing = sorted(set(expected) - set(weights))
        extra = sorted(set(weights) - set(expected))
        raise WeightsMismatchError(f"weights do not match config (missing={missing[:3]}, unexpected={extra[:3]})")
    for name, shape in expected.items():
        if tuple(weights[name].shape) != shape:
            raise WeightsMismatchError(f"{name}: shape {tuple(weights[name].shape)} != {shape}")


class _Dropout:
    """Dropout switch shared by all CNNs in one forward pass."""

    def __init__(self, cfg: ModelConfig, active: bool, rng: Optional[np.random.Generator]):
        self.p = cfg.dropout_p
        self.active = active and cfg.with_dropout
        self.rng = rng

    def __call__(self, x: Tensor, enabled: bool = True) -> Tensor:
        if not (self.active and enabled):
            return x
        return F.dropout(x, self.p, self.rng, training=True)


def _conv(x, params: dict, prefix: str, pad: int) -> Tensor:
    return F.conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], padding=pad)


def cnn_forward(x: Tensor, params: dict, prefix: str, cfg: ModelConfig, drop=None) -> Tensor:
    """Complex ``[N, H, W, 2]`` in, complex ``[N, H, W, 2]`` out."""
    drop = drop or _Dropout(cfg, False, None)
    enabled = prefix != "sme" or cfg.dropout_in_sme
    pad = cfg.kernel_size // 2
    h = x.transpose(0, 3, 1, 2)

    def act(t):
        return drop(F.leaky_relu(t, cfg.slope), enabled)

    if cfg.architecture == "residual":
        names = [n for n, _, _ in _cnn_layers(cfg)]
        for name in names[:-1]:
            h = act(_conv(h, params, f"{prefix}.{name}", pad))
        h = _conv(h, params, f"{prefix}.{names[-1]}", pad)
    else:
        e = act(_conv(h, params, f"{prefix}.enc0", pad))
        e = act(_conv(e, params, f"{prefix}.enc1", pad))
        m = F.avg_pool2(e)
        m = act(_conv(m, params, f"{prefix}.mid0", pad))
        m = act(_conv(m, params, f"{prefix}.mid1", pad))
        d = F.concat_channels(e, F.nearest_upsample2(m))
        d = act(_conv(d, params, f"{prefix}.dec0", pad))
        h = _conv(d, params, f"{prefix}.out", pad)
    return h.transpose(0, 2, 3, 1)


def _center_kspace_mask(mask: SamplingMask, dtype) -> np.ndarray:
    try:
        sl = mask.center_slice()
    except MaskError as exc:
        raise MaskError("sensitivity estimation needs a sampled center block") from exc
    cols = np.zeros(mask.width, dtype=dtype)
    cols[sl] = 1
    return cols.reshape(1, -1, 1)


def sme_estimate(masked_kspace, mask: SamplingMask, params: dict, cfg: ModelConfig, drop=None) -> Tensor:
    """Coil maps from the center columns, refined by a residual CNN, RSS-normalized."""
    k = as_tensor(masked_kspace)
    acs = k * _center_kspace_mask(mask, k.dtype)
    coil_images = ifft2c(acs)
    refined = coil_images + cnn_forward(coil_images, params, "sme", cfg, drop)
    norm = F.root_sum_squares(refined, axis=(0, -1))
    tiny = np.asarray(1e-30, dtype=k.dtype)
    return refined / (norm.reshape((1,) + norm.shape + (1,)) + tiny)


def cascade_step(k, k_tilde, mask_arr, smaps, params: dict, prefix: str, cfg: ModelConfig, drop=None) -> Tensor:
    """One update ``k - eta * M (k - k_tilde) + G(k)``.

    ``mask_arr`` is the broadcastable ``[1, W, 1]`` column mask.
    """
    k, k_tilde, smaps = as_tensor(k), as_tensor(k_tilde), as_tensor(smaps)
    image = reduce(ifft2c(k), smaps)
    refined = cnn_forward(image.reshape((1,) + image.shape), params, prefix, cfg, drop)
    g = fft2c(expand(refined, smaps))
    # k - eta*M*(k - k_tilde), arranged so eta*M == 1 yields k_tilde bit-exactly
    dc = params[f"{prefix}.eta"] * mask_arr
    return k * (1.0 - dc) + k_tilde * dc + g


def _as_params(weights: dict, dtype) -> dict:
    return {n: w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=dtype)) for n, w in weights.items()}


def forward_kspace(
    masked_kspace,
    mask: SamplingMask,
    weights: dict,
    cfg: ModelConfig,
    mc_dropout: bool = False,
    seed: int = 0,
    training: bool = False,
) -> Tensor:
    """Final cascade k-space ``[Nc, H, W, 2]``; see ``model_forward`` for the arguments."""
    check_weights(weights, cfg)
    first = next(iter(weights.values()))
    dtype = first.dtype
    params = _as_params(weights, dtype)
    k0 = as_tensor(masked_kspace.data if isinstance(masked_kspace, Tensor) else np.asarray(masked_kspace, dtype=dtype))
    if k0.shape[-2] != mask.width:
        raise WeightsMismatchError(f"mask width {mask.width} does not match k-space {k0.shape}")
    active = training or mc_dropout
    drop = _Dropout(cfg, active, np.random.default_rng(seed) if active else None)
    mask_arr = mask.as_array(dtype)
    smaps = sme_estimate(k0, mask, params, cfg, drop)
    k = k0
    for m in range(cfg.cascades):
        k = cascade_step(k, k0, mask_arr, smaps, params, f"cascade{m}", cfg, drop)
    return k


def model_forward(
    masked_kspace,
    mask: SamplingMask,
    weights: dict,
    cfg: ModelConfig,
    mc_dropout: bool = False,
    seed: int = 0,
    training: bool = False,
) -> Tensor:
    """Reconstruct a ``[H, W]`` magnitude image from masked ``[Nc, H, W, 2]`` k-space.

    Dropout is sampled only when the config has dropout layers and either
    ``training`` or ``mc_dropout`` is set; masks are drawn from ``seed``.
    """
    return rss(ifft2c(forward_kspace(masked_kspace, mask, weights, cfg, mc_dropout, seed, training)))


# -- checkpoint files -----------------------------------------------------------


def save_checkpoint(path: Union[str, Path], weights: dict, cfg: ModelConfig, step: int) -> Path:
    """Write weights as little-endian float32 with a trailing BLAKE2b-64 checksum."""
    check_weights(weights, cfg)
    echo = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<BII", CKPT_VERSION, int(step), len(echo))
    buf += echo
    buf += struct.pack("<I", len(weights))
    for name, arr in weights.items():
        data = arr.data if isinstance(arr, Tensor) else arr
        enc = name.encode()
        buf += struct.pack("<H", len(enc)) + enc
        buf += struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
        buf += np.ascontiguousarray(data, dtype="<f4").tobytes()
    buf += hashlib.blake2b(bytes(buf), digest_size=8).digest()
    path = Path(path)
    path.write_bytes(bytes(buf))
    return path


def load_checkpoint(path: Union[str, Path]) -> tuple[dict, ModelConfig, int]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    if len(raw) < 8 + 9 + 8 or hashlib.blake2b(raw[:-8], digest_size=8).digest() != raw[-8:]:
        raise CheckpointFormatError(f"{path}: checksum mismatch")
    version, step, n_echo = struct.unpack_from("<BII", raw, 8)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    off = 8 + 9
    cfg = ModelConfig(**json.loads(raw[off : off + n_echo]))
    off += n_echo
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    weights = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + n].decode()
        off += n
        ndim = raw[off]
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape))
        weights[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    check_weights(weights, cfg)
    return weights, cfg, int(step)
