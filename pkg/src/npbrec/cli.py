"""Command-line entry point: ``npbrec <command> [options]``.

Commands
--------
generate-data   write a synthetic dataset and its manifest
train           train one model (npbrec, baseline or mc-dropout)
reconstruct     posterior mean/std and metrics for one sample file
evaluate        summary tables plus uncertainty and significance analyses
sweep           burn-in (number of averaged checkpoints) or acceleration sweep

Exit status is 0 on success, 2 for configuration errors, 3 for data or
checkpoint errors and 4 when training diverges. Failures print a single
``npbrec: error[<kind>]: <reason>`` line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import report
from .config import ConfigError, RunConfig, load_config, write_config_echo
from .data import ManifestError, SampleFormatError, build_dataset, load_manifest, load_sample, load_split
from .model import CheckpointFormatError, WeightsMismatchError
from .mri import MaskError
from .posterior import (
    PosteriorWarning,
    as_predictor,
    evaluate_image,
    mc_dropout_predictor,
    pearson_log,
    sweep_acceleration,
    sweep_burnin,
    wilcoxon_signed_rank,
)
from .training import CheckpointStore, DivergenceError, train

logger = logging.getLogger("npbrec")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
SCATTER_COLUMNS = ["image_id", "mean_std", "mse", "R", "kind"]
REPORT_COLUMNS = ["image_id", "R", "kind", "K", "mean_std", "mse", "psnr", "ssim", "roi_mse", "roi_psnr", "roi_ssim", "zf_psnr"]


class DataError(Exception):
    """Missing or unusable input files."""


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _command_line(argv: Sequence[str]) -> str:
    return " ".join(["npbrec", *argv])


def _model_source(ckpt_dir: Path, cfg: RunConfig):
    """Checkpoint store plus the predictor used for posterior sampling."""
    try:
        store = CheckpointStore.from_directory(ckpt_dir)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    if store.model_config.with_dropout:
        weights = store.weights(len(store) - 1)
        return store, mc_dropout_predictor(weights, store.model_config, cfg.eval.mc_samples, cfg.eval.seed)
    return store, as_predictor(store)


def _load_eval_split(data_dir: Path, split: str):
    manifest = load_manifest(data_dir)
    if split not in manifest.splits:
        raise DataError(f"{data_dir}: manifest has no split {split!r}")
    samples = load_split(manifest, split)
    if not samples:
        raise DataError(f"{data_dir}: split {split!r} is empty")
    ids = [Path(e["file"]).stem for e in manifest.splits[split]]
    return samples, ids


# -- commands ------------------------------------------------------------------------


def cmd_generate_data(args, cfg: RunConfig, argv) -> int:
    out = Path(args.out)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        if not args.force:
            raise DataError(f"{out}: dataset already exists (use --force to overwrite)")
        for old in out.glob("*_[0-9][0-9][0-9][0-9].bin"):
            old.unlink()
        manifest_path.unlink()
    manifest = build_dataset(cfg.phantom, cfg.data.n_train, cfg.data.n_val, cfg.data.n_test, out)
    write_config_echo(cfg, out, _command_line(argv))
    print(manifest_path if manifest.count else out)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, argv) -> int:
    mode = args.mode.replace("-", "_")
    train_cfg = dataclasses.replace(cfg.train, mode=mode)
    if args.epochs is not None:
        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs)
    if args.noise is not None:
        train_cfg = dataclasses.replace(train_cfg, noise_rule="constant_value", noise_value=args.noise)
    model_cfg = cfg.model
    if mode == "mc_dropout" and not model_cfg.with_dropout:
        model_cfg = dataclasses.replace(model_cfg, with_dropout=True)
    cfg = dataclasses.replace(cfg, train=train_cfg, model=model_cfg)
    train_set = load_split(load_manifest(args.data), "train")
    if not train_set:
        raise DataError(f"{args.data}: training split is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for stale in out.glob("ckpt_epoch_*.bin"):
        stale.unlink()
    write_config_echo(cfg, out, _command_line(argv))
    store = train(train_cfg, train_set, model_cfg, out_dir=out)
    print(f"{out}: {len(store)} checkpoint(s), final loss {store.losses[-1]:.5f}")
    return EXIT_OK


def cmd_reconstruct(args, cfg: RunConfig, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config_echo(cfg, out, _command_line(argv))
    _, predictor = _model_source(Path(args.ckpt), cfg)
    sample_path = Path(args.sample)
    if not sample_path.exists():
        raise DataError(f"{sample_path}: sample file not found")
    sample = load_sample(sample_path)
    row, ps = evaluate_image(predictor, sample, args.R, args.mask_kind, sample_path.stem, cfg.eval.foreground)
    mean = ps.samples.mean(axis=0)
    std = ps.samples.std(axis=0)
    report.write_pgm16(out / "mean.pgm", mean)
    report.write_pgm16(out / "std.pgm", std)
    report.write_png8(out / "mean.png", mean)
    report.write_png8(out / "std.png", std)
    report.write_json(out / "metrics.json", row)
    print(out / "metrics.json")
    return EXIT_OK


def _settings(accelerations: Sequence[int]) -> list[tuple[str, int]]:
    """ROI at the lowest acceleration, then whole-image at every acceleration."""
    return [("roi", min(accelerations))] + [("whole", R) for R in accelerations]


def _summary_rows(model: str, rep, accelerations, kinds) -> list[dict]:
    rows = []
    for kind in kinds:
        for region, R in _settings(accelerations):
            sel = rep.select(R=R, kind=kind)
            prefix = "roi_" if region == "roi" else ""
            psnr = np.array([r[prefix + "psnr"] for r in sel], dtype=np.float64)
            ssim = np.array([r[prefix + "ssim"] for r in sel], dtype=np.float64)
            rows.append(
                {
                    "model": model,
                    "region": region,
                    "R": int(R),
                    "kind": kind,
                    "n": len(sel),
                    "psnr_mean": float(psnr.mean()),
                    "psnr_std": float(psnr.std()),
                    "ssim_mean": float(ssim.mean()),
                    "ssim_std": float(ssim.std()),
                }
            )
    return rows


def _wilcoxon(a, b) -> dict:
    try:
        res = wilcoxon_signed_rank(a, b)
    except ValueError as exc:
        return {"statistic": None, "p_value": None, "n": 0, "method": None, "note": str(exc)}
    return dataclasses.asdict(res)


def _unique_names(dirs: Sequence[str]) -> list[str]:
    names, seen = [], {}
    for d in dirs:
        base = Path(d).resolve().name or "model"
        seen[base] = seen.get(base, 0) + 1
        names.append(base if seen[base] == 1 else f"{base}_{seen[base]}")
    return names


def cmd_evaluate(args, cfg: RunConfig, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config_echo(cfg, out, _command_line(argv))
    samples, ids = _load_eval_split(Path(args.data), args.split)
    acc, kinds = tuple(cfg.eval.accelerations), tuple(cfg.eval.mask_kinds)
    summary = {"settings": [list(s) for s in _settings(acc)], "models": {}, "table": [], "comparisons": []}
    reports, groups = {}, {}
    for name, ckpt in zip(_unique_names(args.ckpt), args.ckpt):
        _, predictor = _model_source(Path(ckpt), cfg)
        rep = sweep_acceleration(predictor, samples, acc, kinds, ids, cfg.eval.foreground)
        reports[name] = rep
        report.write_csv(out / f"report_{name}.csv", rep.rows, REPORT_COLUMNS)
        report.write_csv(out / f"scatter_{name}.csv", rep.rows, SCATTER_COLUMNS)
        summary["table"].extend(_summary_rows(name, rep, acc, kinds))
        positive = all(r["mean_std"] > 0 and r["mse"] > 0 for r in rep.rows)
        r_all = pearson_log(rep.column("mean_std"), rep.column("mse")) if positive and len(rep.rows) >= 3 else None
        summary["models"][name] = {
            "pearson_log_std_mse": r_all,
            "pearson_note": None if r_all is not None else "needs >= 3 rows with positive uncertainty and error",
            "wilcoxon_vs_zero_filled_psnr": _wilcoxon(rep.column("psnr"), rep.column("zf_psnr")),
        }
        for R in acc:
            groups[f"{name} R={R}"] = (rep.column("mean_std", R=R), rep.column("mse", R=R))
    names = list(reports)
    for other in names[1:]:
        summary["comparisons"].append(
            {"a": names[0], "b": other, "metric": "psnr",
             "wilcoxon": _wilcoxon(reports[names[0]].column("psnr"), reports[other].column("psnr"))}
        )
    report.write_json(out / "summary.json", summary)
    report.svg_scatter(out / "scatter.svg", groups, "mean std", "MSE", "uncertainty vs error (log-log)")
    print(out / "summary.json")
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config_echo(cfg, out, _command_line(argv))
    store, predictor = _model_source(Path(args.ckpt), cfg)
    samples, ids = _load_eval_split(Path(args.data), args.split)
    if args.acceleration is not None:
        kinds = tuple(cfg.eval.mask_kinds)
        rep = sweep_acceleration(predictor, samples, args.acceleration, kinds, ids, cfg.eval.foreground)
        report.write_csv(out / "acceleration.csv", rep.rows, REPORT_COLUMNS)
        Rs = list(args.acceleration)
        series = {k: [rep.column("mean_std", R=R, kind=k).mean() for R in Rs] for k in kinds}
        report.svg_line_plot(out / "acceleration.svg", Rs, series, "acceleration R", "mean std", "uncertainty vs R")
        groups = {f"R={R}": (rep.column("mean_std", R=R), rep.column("mse", R=R)) for R in Rs}
        report.svg_scatter(out / "acceleration_scatter.svg", groups, "mean std", "MSE", "uncertainty vs error")
        print(out / "acceleration.csv")
        return EXIT_OK
    if args.burnin:
        ks = list(args.burnin)
    else:
        ks = [k for k in cfg.eval.burnin_ks if k <= len(store)]
    rows = sweep_burnin(store, samples, ks, R=min(cfg.eval.accelerations), kind=cfg.eval.mask_kinds[0])
    report.write_csv(out / "burnin.csv", rows, ["K", "mse", "ssim"])
    xs = [r["K"] for r in rows]
    report.svg_line_plot(out / "burnin_mse.svg", xs, {"MSE": [r["mse"] for r in rows]}, "K (averaged checkpoints)", "MSE")
    report.svg_line_plot(out / "burnin_ssim.svg", xs, {"SSIM": [r["ssim"] for r in rows]}, "K (averaged checkpoints)", "SSIM")
    print(out / "burnin.csv")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (INI sections)")
    common.add_argument("--seed", type=int, help="one seed routed into every random component")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="npbrec", description="Posterior-sampling MRI reconstruction toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["npbrec", "baseline", "mc-dropout"], default="npbrec")
    p.add_argument("--noise", type=float, help="constant gradient-noise std (npbrec mode)")
    p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", parents=[common], help="reconstruct one sample file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--R", type=int, default=4)
    p.add_argument("--mask-kind", choices=["random", "equispaced"], default="random")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate models over a split")
    p.add_argument("--ckpt", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common], help="burn-in or acceleration sweep")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--burnin", type=int, nargs="*", metavar="K", help="numbers of averaged checkpoints")
    g.add_argument("--acceleration", type=int, nargs="+", metavar="R", help="acceleration rates")
    p.set_defaults(func=cmd_sweep)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(f"npbrec: error[{kind}]: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = _run_config(args)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", PosteriorWarning)
            return args.func(args, cfg, argv)
    except DivergenceError as exc:
        return _fail("divergence", exc, EXIT_DIVERGED)
    except (ConfigError, MaskError) as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (DataError, SampleFormatError, ManifestError, CheckpointFormatError, WeightsMismatchError,
            FileNotFoundError) as exc:
        return _fail("data", exc, EXIT_DATA)
    except ValueError as exc:
        return _fail("config", exc, EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
