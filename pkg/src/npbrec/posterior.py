"""Posterior sampling over checkpoint stores, with the evaluation metrics and tests built on it."""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .data import KSpaceSample
from .diffcore import no_grad
from .model import ModelConfig, model_forward
from .mri import SamplingMask, make_mask, zero_filled
from .training import CheckpointStore, ssim

__all__ = [
    "PosteriorSet",
    "PosteriorWarning",
    "UncertaintyReport",
    "WilcoxonResult",
    "posterior_predict",
    "posterior_mean",
    "posterior_std",
    "mc_dropout_predict",
    "metrics",
    "uncertainty_measure",
    "pearson_log",
    "wilcoxon_signed_rank",
    "sweep_burnin",
    "sweep_acceleration",
    "eval_mask",
    "thread_count",
]


class PosteriorWarning(UserWarning):
    pass


def thread_count() -> int:
    """Worker cap from ``NPBREC_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("NPBREC_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class PosteriorSet:
    samples: np.ndarray
    source: str
    input_id: Optional[str] = None

    def __post_init__(self):
        if self.samples.ndim != 3 or self.samples.shape[0] < 1:
            raise ValueError(f"posterior samples must be [K, H, W] with K >= 1, got {self.samples.shape}")

    @property
    def K(self) -> int:
        return int(self.samples.shape[0])

    @property
    def std_degenerate(self) -> bool:
        return self.K < 2


def _forward(masked_kspace, mask, weights, cfg, mc_dropout=False, seed=0) -> np.ndarray:
    with no_grad():
        return model_forward(masked_kspace, mask, weights, cfg, mc_dropout=mc_dropout, seed=seed).data


def posterior_predict(store: CheckpointStore, masked_kspace, mask: SamplingMask, input_id=None) -> PosteriorSet:
    """One reconstruction per stored checkpoint, ordered by epoch."""
    if len(store) == 0:
        raise ValueError("checkpoint store is empty")

    def run(i):
        return _forward(masked_kspace, mask, store.weights(i), store.model_config)

    n = thread_count()
    if n > 1 and len(store) > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            outs = list(pool.map(run, range(len(store))))
    else:
        outs = [run(i) for i in range(len(store))]
    return PosteriorSet(np.stack(outs), "npbrec", input_id)


def mc_dropout_predict(
    weights: dict, cfg: ModelConfig, masked_kspace, mask: SamplingMask, K: int = 9, seed: int = 0, input_id=None
) -> PosteriorSet:
    """``K`` forward passes with dropout sampled afresh; draw ``i`` uses seed ``(seed, i)``."""
    if not cfg.with_dropout:
        raise ValueError("Monte-Carlo dropout needs a model built with dropout layers")
    if K < 1:
        raise ValueError("K must be at least 1")
    draws = []
    for i in range(K):
        draw_seed = int(np.random.SeedSequence([seed, i]).generate_state(1, dtype=np.uint64)[0])
        draws.append(_forward(masked_kspace, mask, weights, cfg, mc_dropout=True, seed=draw_seed))
    return PosteriorSet(np.stack(draws), "mc_dropout", input_id)


def posterior_mean(ps: PosteriorSet) -> np.ndarray:
    return ps.samples.mean(axis=0)


def posterior_std(ps: PosteriorSet) -> np.ndarray:
    """Pixelwise population standard deviation; a zero map (with a warning) for K = 1."""
    if ps.std_degenerate:
        warnings.warn("posterior std of a single sample is identically zero", PosteriorWarning, stacklevel=2)
        return np.zeros(ps.samples.shape[1:], dtype=ps.samples.dtype)
    return ps.samples.std(axis=0)


def uncertainty_measure(std_map: np.ndarray, foreground: Optional[np.ndarray] = None) -> float:
    """Mean of the std map, optionally over a boolean foreground mask only."""
    std_map = np.asarray(std_map, dtype=np.float64)
    if std_map.size == 0:
        raise ValueError("empty std map")
    if foreground is not None:
        std_map = std_map[np.asarray(foreground, dtype=bool)]
        if std_map.size == 0:
            raise ValueError("foreground mask selects no pixels")
    return float(std_map.mean())


def _crop(img: np.ndarray, roi) -> np.ndarray:
    r0, r1, c0, c1 = roi
    h, w = img.shape
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise ValueError(f"roi {tuple(roi)} outside image of shape {img.shape}")
    return img[r0:r1, c0:c1]


def metrics(x_hat: np.ndarray, x_gt: np.ndarray, roi=None, window: int = 7) -> dict:
    """MSE, PSNR and SSIM, with ``data_range = max(x_gt)`` over the evaluated region.

    A zero MSE gives ``psnr = inf``. With ``roi = (r0, r1, c0, c1)`` all three
    are computed on the crop; the SSIM window shrinks if the crop is smaller.
    """
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x_gt = np.asarray(x_gt, dtype=np.float64)
    if x_hat.shape != x_gt.shape:
        raise ValueError(f"shape mismatch {x_hat.shape} vs {x_gt.shape}")
    if roi is not None:
        x_hat, x_gt = _crop(x_hat, roi), _crop(x_gt, roi)
    data_range = float(x_gt.max())
    if data_range <= 0:
        raise ValueError("ground truth has no positive values in the evaluated region")
    mse = float(np.mean((x_hat - x_gt) ** 2))
    psnr = math.inf if mse == 0 else 10.0 * math.log10(data_range**2 / mse)
    win = min(window, min(x_gt.shape))
    if win % 2 == 0:
        win -= 1
    with no_grad():
        s = float(ssim(x_hat, x_gt, win, data_range).data)
    return {"mse": mse, "psnr": psnr, "ssim": s}


def pearson_log(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson correlation of ``log(xs)`` and ``log(ys)``."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-D and of equal length")
    if x.size < 3:
        raise ValueError("need at least 3 pairs")
    bad = np.flatnonzero((x <= 0) | (y <= 0))
    if bad.size:
        raise ValueError(f"non-positive values at indices {bad.tolist()}")
    lx, ly = np.log(x), np.log(y)
    dx, dy = lx - lx.mean(), ly - ly.mean()
    return float((dx * dy).sum() / math.sqrt((dx * dx).sum() * (dy * dy).sum()))


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    method: str


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_null_cdf(ranks: np.ndarray, t: float) -> float:
    """P(W+ <= t) under random signs, by dynamic programming on doubled ranks."""
    doubled = np.rint(2 * ranks).astype(int)
    counts = np.zeros(doubled.sum() + 1)
    counts[0] = 1.0
    for r in doubled:
        counts[r:] = counts[r:] + counts[: len(counts) - r].copy()
    limit = int(np.floor(2 * t + 1e-9))
    return float(counts[: limit + 1].sum() / counts.sum())


def wilcoxon_signed_rank(paired_a: Sequence[float], paired_b: Sequence[float], exact_max_n: int = 12):
    """Two-sided signed-rank test on ``a - b`` after dropping zero differences.

    The statistic is ``min(W+, W-)``. For ``n <= exact_max_n`` the p-value comes
    from the exact null distribution over all ``2^n`` sign patterns (midranks
    for ties); otherwise from the tie-corrected normal approximation.
    """
    d = np.asarray(paired_a, dtype=np.float64) - np.asarray(paired_b, dtype=np.float64)
    d = d[d != 0]
    if d.size == 0:
        raise ValueError("all paired differences are zero")
    n = d.size
    if n < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {n}")
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    t = min(w_plus, w_minus)
    if n <= exact_max_n:
        p = min(1.0, 2.0 * _exact_null_cdf(ranks, t))
        return WilcoxonResult(t, p, n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((tie_counts**3) - tie_counts).sum()) / 48.0
    z = (t - mean) / math.sqrt(var)
    p = min(1.0, math.erfc(-z / math.sqrt(2.0)))
    return WilcoxonResult(t, p, n, "normal")


# -- evaluation sweeps ------------------------------------------------------------

Predictor = Callable[[np.ndarray, SamplingMask], PosteriorSet]


def as_predictor(model: Union[CheckpointStore, Predictor]) -> Predictor:
    if isinstance(model, CheckpointStore):
        return lambda k, m: posterior_predict(model, k, m)
    return model


def mc_dropout_predictor(weights: dict, cfg: ModelConfig, K: int = 9, seed: int = 0) -> Predictor:
    return lambda k, m: mc_dropout_predict(weights, cfg, k, m, K, seed)


def eval_mask(sample: KSpaceSample, R: int, kind: str, center_fraction=None) -> SamplingMask:
    """Test-time mask, fixed per image through the sample seed."""
    return make_mask(kind, sample.kspace_full.shape[-2], R, center_fraction, seed=sample.seed)


def sweep_burnin(
    store: CheckpointStore,
    eval_set: Sequence[KSpaceSample],
    K_values: Sequence[int] = tuple(range(1, 11)),
    R: int = 4,
    kind: str = "random",
) -> list[dict]:
    """Mean MSE/SSIM of the posterior mean built from the last ``K`` checkpoints."""
    if max(K_values) > len(store):
        raise ValueError(f"K={max(K_values)} exceeds the {len(store)} stored checkpoints")
    # one forward per (sample, checkpoint); each K reuses the tail of the stack
    stacks = []
    for s in eval_set:
        mask = eval_mask(s, R, kind)
        stacks.append((posterior_predict(store, s.masked_kspace(mask), mask).samples, s.image_gt))
    rows = []
    for K in K_values:
        ms = [metrics(st[-K:].mean(axis=0), gt) for st, gt in stacks]
        rows.append(
            {"K": int(K), "mse": float(np.mean([m["mse"] for m in ms])), "ssim": float(np.mean([m["ssim"] for m in ms]))}
        )
    return rows


@dataclass
class UncertaintyReport:
    """Per-image rows: image_id, R, kind, mean_std, mse, psnr, ssim and ROI metrics."""

    rows: list = field(default_factory=list)

    def select(self, R=None, kind=None) -> list[dict]:
        return [r for r in self.rows if (R is None or r["R"] == R) and (kind is None or r["kind"] == kind)]

    def column(self, name: str, R=None, kind=None) -> np.ndarray:
        return np.array([r[name] for r in self.select(R, kind)], dtype=np.float64)

    def summary(self, R=None, kind=None) -> dict:
        rows = self.select(R, kind)
        out = {"n": len(rows)}
        for key in ("mse", "psnr", "ssim", "roi_psnr", "roi_ssim", "mean_std", "zf_psnr"):
            vals = np.array([r[key] for r in rows if key in r], dtype=np.float64)
            if vals.size:
                out[key] = (float(vals.mean()), float(vals.std()))
        return out


def evaluate_image(
    predictor: Predictor, sample: KSpaceSample, R: int, kind: str, image_id: str, foreground: bool = False
) -> tuple[dict, PosteriorSet]:
    mask = eval_mask(sample, R, kind)
    k = sample.masked_kspace(mask)
    ps = predictor(k, mask)
    mean = posterior_mean(ps)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PosteriorWarning)
        std = posterior_std(ps)
    gt = sample.image_gt
    whole = metrics(mean, gt)
    roi = metrics(mean, gt, roi=sample.roi)
    fg = gt > 0 if foreground else None
    row = {
        "image_id": image_id,
        "R": int(R),
        "kind": kind,
        "K": ps.K,
        "mean_std": uncertainty_measure(std, fg),
        "mse": whole["mse"],
        "psnr": whole["psnr"],
        "ssim": whole["ssim"],
        "roi_mse": roi["mse"],
        "roi_psnr": roi["psnr"],
        "roi_ssim": roi["ssim"],
        "zf_psnr": metrics(zero_filled(k), gt)["psnr"],
    }
    return row, ps


def sweep_acceleration(
    model: Union[CheckpointStore, Predictor],
    eval_set: Sequence[KSpaceSample],
    R_values: Sequence[int] = (4, 8),
    mask_kinds: Sequence[str] = ("random", "equispaced"),
    image_ids: Optional[Sequence[str]] = None,
    foreground: bool = False,
) -> UncertaintyReport:
    """Posterior metrics and mean-std uncertainty for every (R, mask kind, image)."""
    predictor = as_predictor(model)
    ids = list(image_ids) if image_ids is not None else [f"img{i:04d}" for i in range(len(eval_set))]
    report = UncertaintyReport()
    for R in R_values:
        for kind in mask_kinds:
            for image_id, s in zip(ids, eval_set):
                row, _ = evaluate_image(predictor, s, R, kind, image_id, foreground)
                report.rows.append(row)
    return report
