"""Train a small model with gradient noise and look at its checkpoint posterior.

Run with ``python3 demos/02_posterior_sampling.py [out_dir]`` (under a
minute on one core). Every epoch after burn-in leaves a checkpoint; the
spread of their reconstructions is the uncertainty estimate.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import numpy as np

from npbrec import report
from npbrec.data import PhantomSpec, make_sample
from npbrec.model import ModelConfig
from npbrec.mri import zero_filled
from npbrec.posterior import eval_mask, metrics, posterior_mean, posterior_predict, posterior_std, uncertainty_measure
from npbrec.training import TrainConfig, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/posterior")

spec = PhantomSpec(size=64, n_coils=4)
seeds = [int(s) * 4 for s in np.random.SeedSequence(7).generate_state(20)]
train_set = [make_sample(spec, s) for s in seeds[:16]]
held_out = [make_sample(spec, s) for s in seeds[16:]]

model_cfg = ModelConfig(cascades=2, channels=8, depth=3, architecture="unet")
# noise std equals the learning rate by default; the last keep_last epochs are kept
train_cfg = TrainConfig(epochs=12, keep_last=6, acceleration=4)
store = train(train_cfg, train_set, model_cfg, out_dir=out / "checkpoints")
print(f"kept epochs {store.epochs}; loss {store.losses[0]:.4f} -> {store.losses[-1]:.4f}")

for i, s in enumerate(held_out):
    for R in (4, 8):
        mask = eval_mask(s, R, "random")
        k = s.masked_kspace(mask)
        ps = posterior_predict(store, k, mask)
        mean, std = posterior_mean(ps), posterior_std(ps)
        zf, rec = metrics(zero_filled(k), s.image_gt), metrics(mean, s.image_gt)
        print(
            f"image {i} R={R}: zero-filled {zf['psnr']:.2f} dB, posterior mean {rec['psnr']:.2f} dB, "
            f"mean std {uncertainty_measure(std):.5f}"
        )
        if i == 0:
            report.write_pgm16(out / f"mean_R{R}.pgm", mean, vmax=s.image_gt.max())
            report.write_pgm16(out / f"std_R{R}.pgm", std)
print(f"images written to {out}")
