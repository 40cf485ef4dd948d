"""1 - SSIM training with Adam and optional Langevin gradient noise.

Three modes share one loop:

``npbrec``
    Gaussian noise is added to every raw gradient before the Adam moments
    see it; the weights of the last ``keep_last`` epochs after burn-in are
    kept as posterior samples.
``baseline``
    Plain Adam, final epoch only.
``mc_dropout``
    Plain Adam with dropout layers active during training, final epoch only.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data import KSpaceSample
from .diffcore import Tensor, as_tensor, backward
from .diffcore import ops as F
from .model import ModelConfig, init_model, load_checkpoint, model_forward, save_checkpoint
from .mri import make_mask

__all__ = [
    "TrainConfig",
    "AdamState",
    "CheckpointStore",
    "DivergenceError",
    "ssim",
    "ssim_loss",
    "adam_step",
    "sgld_perturb",
    "noise_std_at",
    "train",
]

logger = logging.getLogger(__name__)

MODES = ("npbrec", "baseline", "mc_dropout")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, epoch: int, sample: int, value: float, what: str = "loss"):
        super().__init__(f"non-finite {what} {value} at epoch {epoch}, sample {sample}")
        self.epoch = epoch
        self.sample = sample


def ssim(x, y, window: int = 7, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> Tensor:
    """Mean local SSIM over all valid ``window x window`` uniform windows.

    Local (co)variances use the unbiased ``N / (N - 1)`` normalization.
    Differentiable in both arguments.
    """
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError(f"ssim expects two equal [H, W] images, got {x.shape} and {y.shape}")
    if window % 2 == 0 or window > min(x.shape):
        raise ValueError(f"window {window} must be odd and at most {min(x.shape)}")
    npix = window * window
    cov_norm = npix / (npix - 1)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    ux = F.box_filter(x, window)
    uy = F.box_filter(y, window)
    uxx = F.box_filter(x * x, window)
    uyy = F.box_filter(y * y, window)
    uxy = F.box_filter(x * y, window)
    vx = (uxx - ux * ux) * cov_norm
    vy = (uyy - uy * uy) * cov_norm
    vxy = (uxy - ux * uy) * cov_norm
    num = (ux * uy * 2.0 + c1) * (vxy * 2.0 + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    return (num / den).mean()


def ssim_loss(x_hat, x_gt, window: int = 7, data_range: Optional[float] = None) -> Tensor:
    gt = as_tensor(x_gt)
    if data_range is None:
        data_range = float(np.max(gt.data))
    return 1.0 - ssim(x_hat, gt, window, data_range)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, weights: dict) -> "AdamState":
        # float64 moments: g*g of a large float32 gradient would overflow to inf
        # and freeze that parameter for good once v is inf
        zeros = lambda w: np.zeros(np.shape(w), dtype=np.float64)  # noqa: E731
        return cls({n: zeros(w) for n, w in weights.items()}, {n: zeros(w) for n, w in weights.items()})


def adam_step(weights: dict, grads: dict, state: AdamState, lr: float) -> tuple[dict, AdamState]:
    """Bias-corrected Adam; returns new weight arrays and mutates ``state`` in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = {}
    for name, w in weights.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != w.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != weight shape {w.shape}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = (w - update).astype(w.dtype)
    return out, state


def sgld_perturb(grads: dict, s_t: float, rng: np.random.Generator) -> dict:
    """Add i.i.d. ``N(0, s_t^2)`` noise to each gradient array."""
    if s_t < 0:
        raise ValueError(f"noise standard deviation must be non-negative, got {s_t}")
    if s_t == 0:
        return {n: g.copy() for n, g in grads.items()}
    return {n: g + (s_t * rng.standard_normal(g.shape)).astype(g.dtype) for n, g in grads.items()}


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "npbrec"
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 1
    noise_rule: str = "constant_lr"
    noise_value: float = 0.0
    noise_decay: float = 0.55
    keep_last: int = 9
    burn_in: Optional[int] = None
    seed: int = 0
    acceleration: int = 4
    mask_kind: str = "random"
    center_fraction: Optional[float] = None
    redraw_masks: bool = False
    shuffle: bool = True
    ssim_window: int = 7

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.noise_rule not in ("constant_lr", "constant_value", "decaying"):
            raise ValueError(f"unknown noise rule {self.noise_rule!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if self.keep_last < 1:
            raise ValueError("keep_last must be at least 1")
        if self.epochs < 1:
            raise ValueError("need at least one epoch")
        if self.mode == "npbrec" and not 0 <= self.burn_in_epoch < self.epochs:
            raise ValueError(f"burn-in {self.burn_in_epoch} must lie in [0, epochs)")

    @property
    def burn_in_epoch(self) -> int:
        """First epoch whose weights are captured; defaults to ``epochs - keep_last``."""
        if self.burn_in is None:
            return max(1, self.epochs - self.keep_last)
        return self.burn_in

    def to_dict(self) -> dict:
        return asdict(self)


def noise_std_at(cfg: TrainConfig, epoch: int) -> float:
    """Noise standard deviation for 1-based ``epoch``."""
    if cfg.mode != "npbrec":
        return 0.0
    if cfg.noise_rule == "constant_lr":
        return cfg.lr
    if cfg.noise_rule == "constant_value":
        return cfg.noise_value
    return cfg.noise_value * (1.0 + epoch) ** (-cfg.noise_decay)


@dataclass
class CheckpointStore:
    """Posterior checkpoints in epoch order plus the per-epoch loss curve."""

    model_config: ModelConfig
    entries: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    directory: Optional[Path] = None
    mode: str = "npbrec"

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def epochs(self) -> list[int]:
        return [e["epoch"] for e in self.entries]

    def add(self, epoch: int, weights: dict, keep_last: Optional[int] = None) -> None:
        if self.entries and epoch <= self.entries[-1]["epoch"]:
            raise ValueError("checkpoint epochs must be strictly increasing")
        entry = {"epoch": epoch, "weights": {n: w.copy() for n, w in weights.items()}, "path": None}
        if self.directory is not None:
            entry["path"] = save_checkpoint(self.directory / f"ckpt_epoch_{epoch}.bin", weights, self.model_config, epoch)
        self.entries.append(entry)
        while keep_last is not None and len(self.entries) > keep_last:
            old = self.entries.pop(0)
            if old["path"] is not None:
                Path(old["path"]).unlink(missing_ok=True)

    def weights(self, i: int) -> dict:
        entry = self.entries[i]
        if entry["weights"] is None:
            entry["weights"], cfg, _ = load_checkpoint(entry["path"])
            if cfg != self.model_config:
                raise ValueError(f"{entry['path']}: checkpoint config does not match the store")
        return entry["weights"]

    def last(self, k: int) -> "CheckpointStore":
        if k < 1 or k > len(self.entries):
            raise ValueError(f"requested {k} checkpoints, store has {len(self.entries)}")
        return CheckpointStore(self.model_config, self.entries[-k:], self.losses, self.directory, self.mode)

    @classmethod
    def from_directory(cls, directory: Union[str, Path], mode: Optional[str] = None) -> "CheckpointStore":
        directory = Path(directory)
        files = sorted(directory.glob("ckpt_epoch_*.bin"), key=lambda p: int(p.stem.rsplit("_", 1)[1]))
        if not files:
            raise FileNotFoundError(f"{directory}: no ckpt_epoch_*.bin files")
        entries, cfg = [], None
        for path in files:
            weights, c, step = load_checkpoint(path)
            if cfg is not None and c != cfg:
                raise ValueError(f"{path}: model config differs from the other checkpoints")
            cfg = c
            entries.append({"epoch": step, "weights": weights, "path": path})
        losses = []
        curve = directory / "loss.csv"
        if curve.exists():
            with curve.open() as fh:
                losses = [float(r["mean_loss"]) for r in csv.DictReader(fh)]
        return cls(cfg, entries, losses, directory, mode or ("mc_dropout" if cfg.with_dropout else "npbrec"))


def write_loss_csv(path: Union[str, Path], losses: Sequence[float]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, repr(float(v))])


def _training_mask(cfg: TrainConfig, sample: KSpaceSample, epoch: int):
    width = sample.kspace_full.shape[-2]
    seed = sample.seed if not cfg.redraw_masks else sample.seed * 1000 + epoch
    return make_mask(cfg.mask_kind, width, cfg.acceleration, cfg.center_fraction, seed)


def train(
    config: TrainConfig,
    dataset: Sequence[KSpaceSample],
    model_config: ModelConfig,
    out_dir: Optional[Union[str, Path]] = None,
    init_weights: Optional[dict] = None,
) -> CheckpointStore:
    """Run the training loop; see the module docstring for the three modes.

    Each epoch visits every sample once (shuffled per epoch from the seed),
    takes one Adam step per sample and records the epoch-mean loss.
    """
    if not dataset:
        raise ValueError("training set is empty")
    if config.mode == "mc_dropout" and not model_config.with_dropout:
        raise ValueError("mc_dropout mode needs a model config with dropout layers")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    weights = init_weights if init_weights is not None else init_model(model_config, config.seed)
    weights = {n: w.copy() for n, w in weights.items()}
    state = AdamState.zeros_like(weights)
    order_rng = np.random.default_rng([config.seed, 1])
    noise_rng = np.random.default_rng([config.seed, 2])
    dropout_seeds = np.random.default_rng([config.seed, 3])
    store = CheckpointStore(model_config, directory=out, mode=config.mode)
    masks = {}
    names = list(weights)
    training_dropout = config.mode == "mc_dropout"

    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(dataset)) if config.shuffle else np.arange(len(dataset))
        s_t = noise_std_at(config, epoch)
        total = 0.0
        for idx in order:
            sample = dataset[int(idx)]
            key = (int(idx), epoch if config.redraw_masks else 0)
            if key not in masks:
                masks[key] = _training_mask(config, sample, epoch)
            mask = masks[key]
            params = {n: Tensor(weights[n], requires_grad=True) for n in names}
            x_hat = model_forward(
                sample.masked_kspace(mask),
                mask,
                params,
                model_config,
                seed=int(dropout_seeds.integers(2**63)) if training_dropout else 0,
                training=training_dropout,
            )
            gt = sample.image_gt.astype(x_hat.dtype)
            loss = ssim_loss(x_hat, gt, config.ssim_window, data_range=float(gt.max()))
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(epoch, int(idx), value)
            grad_list = backward(loss, [params[n] for n in names])
            grads = dict(zip(names, grad_list))
            for n, g in grads.items():
                if not np.isfinite(g).all():
                    raise DivergenceError(epoch, int(idx), float(g[~np.isfinite(g)].flat[0]), f"gradient of {n}")
            if config.mode == "npbrec":
                grads = sgld_perturb(grads, s_t, noise_rng)
            weights, state = adam_step(weights, grads, state, config.lr)
            total += value
        mean_loss = total / len(dataset)
        store.losses.append(mean_loss)
        logger.info("epoch %d/%d mean loss %.5f", epoch, config.epochs, mean_loss)
        if config.mode == "npbrec":
            if epoch >= config.burn_in_epoch:
                store.add(epoch, weights, keep_last=config.keep_last)
        elif epoch == config.epochs:
            store.add(epoch, weights)
    if out is not None:
        write_loss_csv(out / "loss.csv", store.losses)
    return store
