"""Walk through the measurement model on one synthetic sample.

Run with ``python3 demos/01_measurement_model.py [out_dir]``. The script
undersamples one phantom's multi-coil k-space with both mask kinds and
writes the zero-filled reconstructions as 16-bit PGM files.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from npbrec import report
from npbrec.data import PhantomSpec, make_sample
from npbrec.diffcore import fft2c, ifft2c
from npbrec.mri import expand, make_mask, reduce, zero_filled
from npbrec.posterior import metrics

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/measurement")
out.mkdir(parents=True, exist_ok=True)

spec = PhantomSpec(size=64, n_coils=4)
sample = make_sample(spec, seed=2024)
gt = sample.image_gt
print(f"phantom {gt.shape}, {spec.n_coils} coils, ROI {sample.roi}")

# Coil maps are normalized so the coil energies sum to one, which makes
# reduce() undo expand() exactly.
x = sample.image.astype(np.float64)
roundtrip = reduce(expand(x, sample.smaps), sample.smaps).data
print(f"max |reduce(expand(x)) - x| = {np.abs(roundtrip - x).max():.2e}")

# The centered orthonormal DFT preserves energy.
coils = expand(x, sample.smaps).data
print(f"||coil images|| = {np.linalg.norm(coils):.6f}, ||k-space|| = {np.linalg.norm(fft2c(coils).data):.6f}")
print(f"inverse round trip error {np.abs(ifft2c(fft2c(coils)).data - coils).max():.2e}")

report.write_pgm16(out / "ground_truth.pgm", gt)
for kind in ("random", "equispaced"):
    for R in (4, 8):
        mask = make_mask(kind, spec.size, R, seed=sample.seed)
        zf = zero_filled(sample.masked_kspace(mask))
        m = metrics(zf, gt)
        print(f"{kind:10s} R={R}: {mask.num_sampled:2d} of {spec.size} columns, zero-filled PSNR {m['psnr']:.2f} dB")
        report.write_pgm16(out / f"zero_filled_{kind}_R{R}.pgm", zf, vmax=gt.max())
print(f"images written to {out}")
