"""Command-line surface binding the pipeline end to end.

Subcommands: ``gen-data`` (synthetic dataset on disk), ``train`` (staged
schedule to a checkpoint plus epoch log and loss figure), ``impute``
(missing cells from a checkpoint, with metric rows and a comparison montage
when ground truth is on disk), ``eval`` (aggregate metric rows into the
baseline-comparison report plus figures), and ``gradcheck`` (finite-
difference validation of the loss gradients).

Exit codes: 0 success, 1 validation failure, 2 numerical failure,
3 I/O failure.  Set ``MGPVAE_THREADS`` to pin the BLAS thread count; it is
applied before numpy loads.
"""

from __future__ import annotations

import os


def _apply_thread_env():
    n = os.environ.get("MGPVAE_THREADS")
    if n:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ.setdefault(var, n)


_apply_thread_env()

import argparse
import sys
from pathlib import Path

import numpy as np

from . import imputation, io as mio, metrics, plots, synthdata, training
from .config import Config, default_config, load_config, parse_cells, parse_config
from .errors import NumericalError, ValidationError
from .metrics import MetricRow

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3


def _load_config_arg(args) -> Config:
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _load_config_arg(args)
    grid = synthdata.generate(cfg.phantom)
    mask = synthdata.mask_dataset(grid, cfg.mask_policy_obj(), seed=cfg.seed)
    manifest = mio.write_dataset(args.out, grid.with_mask(mask))
    # record the exact recipe (seed included) next to the data
    (Path(args.out) / "config.ini").write_text(cfg.render())
    n_absent = len(mask.absent_cells())
    print(
        f"wrote {grid.n_samples} volumes ({n_absent} marked absent) "
        f"for {grid.n_patients} patients x {grid.n_modalities} modalities -> {manifest}"
    )
    return EXIT_OK


def _check_dataset_against_config(grid, cfg: Config):
    if grid.side != cfg.net.input_side:
        raise ValidationError(
            f"dataset side {grid.side} does not match [net] input_side {cfg.net.input_side}"
        )
    if grid.n_patients != cfg.phantom.patients or grid.n_modalities != cfg.phantom.modalities:
        raise ValidationError(
            f"dataset grid {grid.n_patients}x{grid.n_modalities} does not match "
            f"[phantom] {cfg.phantom.patients}x{cfg.phantom.modalities}"
        )


def cmd_train(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = mio.load_dataset(args.data_dir)
    ckpt_path = out_dir / "checkpoint.mgpc"
    if args.resume:
        ckpt = mio.load_checkpoint(args.resume)
        cfg = parse_config(ckpt.config_text)
        _check_dataset_against_config(grid, cfg)
        trainer = training.Trainer.from_checkpoint(
            ckpt,
            grid,
            grid.mask,
            cfg.net,
            cfg.stages,
            gp_feature_dim=cfg.gp_feature_dim,
            jitter=cfg.gp_jitter,
        )
    else:
        cfg = _load_config_arg(args)
        _check_dataset_against_config(grid, cfg)
        trainer = training.Trainer(
            grid,
            grid.mask,
            cfg.net,
            cfg.stages,
            gp_feature_dim=cfg.gp_feature_dim,
            jitter=cfg.gp_jitter,
            gp_feature_scale=cfg.gp_feature_scale,
            seed=cfg.seed,
            config_text=cfg.render(),
        )
    stop_after = args.stop_after_epochs
    print("# stage\tepoch\ttotal\trecon\tgp\treg\tnoise\tseconds")
    try:
        while not trainer.finished:
            if stop_after is not None and trainer.epochs_done >= stop_after:
                break
            r = trainer.run_epoch()
            print(
                f"{r.stage}\t{r.epoch}\t{r.total:.4f}\t{r.recon:.4f}\t{r.gp:.4f}"
                f"\t{r.reg:.4f}\t{r.noise:.4f}\t{r.seconds:.3f}",
                flush=True,
            )
    except training.TrainingDiverged as err:
        mio.save_checkpoint(ckpt_path, trainer.to_checkpoint())
        mio.write_epoch_log(out_dir / "metrics.tsv", trainer.records)
        print(f"training diverged: {err}", file=sys.stderr)
        print(f"last good checkpoint: {ckpt_path}", file=sys.stderr)
        return EXIT_NUMERICAL
    mio.save_checkpoint(ckpt_path, trainer.to_checkpoint())
    mio.write_epoch_log(out_dir / "metrics.tsv", trainer.records)
    if trainer.records:
        plots.save_loss_curves(trainer.records, out_dir / "loss_curves.png")
    status = "finished" if trainer.finished else f"paused at {trainer.epochs_done} epochs"
    print(f"{status}; checkpoint -> {ckpt_path}")
    return EXIT_OK


def model_from_checkpoint(ckpt: mio.Checkpoint):
    """Rebuild a ModelState (and its config) from a checkpoint."""
    cfg = parse_config(ckpt.config_text)
    model = training.ModelState(
        cfg.net,
        cfg.phantom.patients,
        cfg.phantom.modalities,
        cfg.gp_feature_dim,
        cfg.gp_jitter,
        np.random.default_rng(0),
    )
    model_names = set(model.named())
    unknown = {n for n in ckpt.tensors if not n.startswith("adam.")} - model_names
    if unknown:
        raise ValidationError(f"checkpoint contains unknown tensors: {sorted(unknown)}")
    model.load_named(ckpt.tensors)
    return model, cfg


def cmd_impute(args) -> int:
    out_dir = Path(args.out)
    (out_dir / "imputed").mkdir(parents=True, exist_ok=True)
    ckpt = mio.load_checkpoint(args.checkpoint)
    model, cfg = model_from_checkpoint(ckpt)
    grid = mio.load_dataset(args.data_dir)
    _check_dataset_against_config(grid, cfg)
    absent = set(grid.mask.absent_cells())
    if args.targets is not None:
        targets = parse_cells(args.targets, "--targets")
        unknown = [t for t in targets if t not in absent]
        if unknown:
            raise ValidationError(
                "targets not absent in the manifest: "
                + ", ".join(f"{p}:{m}" for p, m in unknown)
            )
    else:
        targets = sorted(absent)
    if not targets:
        print("no absent cells to impute")
        return EXIT_OK
    request = imputation.ImputationRequest(model=model, grid=grid, mask=grid.mask, targets=targets)
    predicted = imputation.impute(request)
    interp = imputation.interp_baseline(request)
    meanb = imputation.mean_baseline(request)

    rows, montage_items = [], []
    data_dir = Path(args.data_dir)
    for target in targets:
        p, m = target
        cell = predicted[target]
        mio.write_volume(out_dir / "imputed" / f"p{p:03d}_m{m:02d}.vol", cell.volume)
        truth_path = data_dir / mio.volume_filename(p, m)
        if not truth_path.exists():
            continue
        truth = grid.volumes[p, m]
        peak = metrics.peak_of(truth)
        for method, volume in (
            ("mgpvae", cell.volume),
            ("interp", interp[target]),
            ("mean", meanb[target]),
        ):
            rows.append(
                MetricRow(
                    patient=p,
                    modality=m,
                    n_present=cell.n_present,
                    method=method,
                    mse=metrics.mse(truth, volume),
                    psnr=metrics.psnr(truth, volume, peak),
                    peak=peak,
                )
            )
        montage_items.append(
            (
                f"p{p} m{m}",
                {
                    "ground truth": truth,
                    "mgpvae": cell.volume,
                    "interp": interp[target],
                    "mean": meanb[target],
                },
            )
        )
    print(f"imputed {len(targets)} cells -> {out_dir / 'imputed'}")
    if rows:
        mio.write_metric_rows(out_dir / "metrics.tsv", rows)
        plots.save_imputation_montage(montage_items, out_dir / "montage.png")
        print(f"metric rows -> {out_dir / 'metrics.tsv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rows = []
    for path in args.rows:
        rows.extend(mio.read_metric_rows(path))
    table = metrics.report(rows)
    text = metrics.render_text(table)
    print(text, end="")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(text)
        lines = ["# modality\tn_present\tmethod\tcount\tmean_psnr\tmedian_psnr\tmean_mse\tmean_peak"]
        for g in table.groups:
            for method in table.methods:
                s = g.by_method.get(method)
                if s is None:
                    continue
                lines.append(
                    f"{g.modality}\t{g.n_present}\t{method}\t{s.count}"
                    f"\t{s.mean_psnr!r}\t{s.median_psnr!r}\t{s.mean_mse!r}\t{g.mean_peak!r}"
                )
        (out_dir / "report_rows.tsv").write_text("\n".join(lines) + "\n")
        for fig in plots.save_report_figures(table, out_dir):
            print(f"figure -> {fig}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report, groups = training.run_reference_gradcheck(
        seed=args.seed if args.seed is not None else 0,
        step=args.step,
        tol=args.tolerance,
        max_coords=args.max_coords,
    )
    for line in report.lines():
        print(line)
    print("# per-group maxima")
    failed = False
    for group, (rel, ok) in sorted(groups.items()):
        print(f"group {group:18s} rel_err={rel:.3e} {'ok' if ok else 'FAIL'}")
        failed = failed or not ok
    if failed:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERICAL
    print("gradient check passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mgpvae",
        description="Multi-view volumetric VAE with a Kronecker GP prior: "
        "synthetic data, staged training, missing-view imputation, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-view dataset")
    p.add_argument("--config", help="config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the staged training schedule")
    p.add_argument("--config", help="config file (ignored with --resume)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--data-dir", required=True, help="dataset directory (gen-data output)")
    p.add_argument("--out", required=True, help="output directory for checkpoint and logs")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument(
        "--stop-after-epochs",
        type=int,
        default=None,
        help="pause after this many total epochs (checkpoint remains resumable)",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("impute", help="predict absent cells from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--targets", help="cells 'p:m,p:m' (default: every absent cell)")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("eval", help="aggregate metric rows into the comparison report")
    p.add_argument("rows", nargs="*", help="metric-row files (impute outputs)")
    p.add_argument("--out", help="directory for report text, rows and figures")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of loss gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--step", type=float, default=1e-2)
    p.add_argument("--max-coords", type=int, default=24, help="probed coordinates per tensor")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
