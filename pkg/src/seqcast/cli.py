"""Command-line entry point: generate | train | evaluate | gradcheck.

Exit codes: 0 ok, 1 usage/config error, 2 numerical divergence,
3 verification-check failure.  Run directories are never overwritten
without --force; artifacts are written via temp-file + rename.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile

import numpy as np

from seqcast import gradcheck as gradcheck_mod
from seqcast.config import ConfigError, PRESETS, RunConfig, load_config
from seqcast.datasets import (
    MackeyGlassConfig,
    add_noise_snr,
    build_mackey_dataset,
    dataset_hash,
    generate_traveling_wave,
    integrate_mackey_glass,
    load_darwin,
    load_dataset,
    sample_eval_cases,
    subsample,
)
from seqcast.lstm import load_checkpoint, save_checkpoint
from seqcast.metrics import evaluate, save_report
from seqcast.training import (
    DivergenceError,
    Mode,
    TrainConfig,
    train,
    write_history_csv,
    write_run_manifest,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGENCE = 2
EXIT_CHECK_FAILURE = 3


def _prepare_outdir(path: str, force: bool) -> None:
    if os.path.isdir(path) and os.listdir(path):
        if not force:
            raise ConfigError(f"output directory {path} is not empty (use --force)")
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)


def _build_dataset(cfg: RunConfig, seed: int):
    ds_cfg = cfg.dataset
    kind = ds_cfg.get("kind", "mackey")
    if kind == "mackey":
        mg = MackeyGlassConfig(total_time=float(ds_cfg.get("total_time", 2e5)))
        raw = integrate_mackey_glass(mg, seed=seed)
        series = subsample(raw, mg.subsample_factor)
        snr = ds_cfg.get("snr_db")
        if snr is not None:
            series = add_noise_snr(series, float(snr), np.random.default_rng(seed + 1))
        return build_mackey_dataset(
            series,
            n_train_seq=ds_cfg.get("n_train_seq", 32),
            seq_len=ds_cfg.get("seq_len", 1120),
            provenance={"source": "mackey-glass", "seed": seed, "snr_db": snr},
        )
    if kind == "darwin":
        path = ds_cfg.get("path")
        if not path:
            raise ConfigError("dataset.path (a single-column CSV) is required for darwin")
        return load_darwin(path)
    if kind == "wave":
        grid = tuple(ds_cfg.get("grid", [8, 16]))
        return generate_traveling_wave(
            grid=grid,
            steps=ds_cfg.get("steps", 600),
            speed=float(ds_cfg.get("speed", 0.05)),
            seed=seed,
        )
    raise ConfigError(f"dataset.kind: unknown generator {kind!r}")


def cmd_generate(args) -> int:
    cfg = load_config(args.config, preset=args.preset)
    seed = args.seed if args.seed is not None else cfg.model.get("seed", 1)
    _prepare_outdir(args.out, args.force)
    ds = _build_dataset(cfg, seed)
    from seqcast.datasets import save_dataset

    digest = save_dataset(ds, args.out)
    print(f"dataset written to {args.out}")
    print(f"dataset hash: {digest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, preset=args.preset)
    seed = args.seed if args.seed is not None else cfg.model.get("seed", 1)
    data_dir = args.data or cfg.dataset.get("path")
    if not data_dir:
        raise ConfigError("no dataset: pass --data DIR or set dataset.path")
    ds = load_dataset(data_dir)
    digest = dataset_hash(data_dir)

    tr = cfg.training
    tcfg = TrainConfig(
        mode=Mode(tr.get("mode", "sa")),
        epochs=tr.get("epochs", 2000),
        seq_len=tr.get("seq_len", 40),
        lr=float(tr.get("lr", 5e-4)),
        batch_size=tr.get("batch_size", 32),
        d_h=cfg.model.get("d_h", 100),
        schedule_k=tr.get("schedule_k"),
        patience=tr.get("patience", 50),
        seed=seed,
    )
    _prepare_outdir(args.out, args.force)

    def log(st):
        print(f"epoch {st.epoch:4d}  p={st.p:.3f}  train={st.train_loss:.3e}  "
              f"val(p=1)={st.val_loss_p1:.3e}", flush=True)

    try:
        result = train(ds, tcfg, log=log if args.verbose else None)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE

    # stage artifacts in a temp dir, then move into place atomically per file
    with tempfile.TemporaryDirectory(dir=args.out) as tmp:
        save_checkpoint(os.path.join(tmp, "checkpoint.json"),
                        result.best_lstm, result.best_readout,
                        meta={"seed": seed, "d_h": tcfg.d_h, "mode": tcfg.mode.value,
                              "best_epoch": result.best_epoch})
        write_history_csv(os.path.join(tmp, "history.csv"), result.history, tcfg.mode)
        write_run_manifest(os.path.join(tmp, "manifest.json"), tcfg, digest,
                           result.best_epoch, result.best_val_loss)
        for name in ("checkpoint.json", "history.csv", "manifest.json"):
            os.replace(os.path.join(tmp, name), os.path.join(args.out, name))
    print(f"best epoch {result.best_epoch}  val(p=1)={result.best_val_loss:.6e}")
    print(f"artifacts written to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, preset=args.preset)
    seed = args.seed if args.seed is not None else cfg.model.get("seed", 1)
    data_dir = args.data or cfg.dataset.get("path")
    if not data_dir:
        raise ConfigError("no dataset: pass --data DIR or set dataset.path")
    ds = load_dataset(data_dir)
    lstm, ro, meta = load_checkpoint(args.checkpoint)
    if lstm.d_x != ds.d_x:
        raise ConfigError(
            f"checkpoint d_x={lstm.d_x} incompatible with dataset d_x={ds.d_x}"
        )
    ev = cfg.evaluation
    cases = sample_eval_cases(
        ds, n=ev.get("n_cases", 100), warmup=ev.get("warmup", 20),
        horizon=ev.get("horizon", 896), rng=np.random.default_rng(seed),
    )
    grid = ev.get("grid")
    report = evaluate(lstm, ro, cases, ds.scaler,
                      grid_shape=tuple(grid) if grid else None)
    _prepare_outdir(args.out, args.force)
    save_report(report, args.out)
    line = f"rmse={report.rmse:.6f}  spectrum_error={report.spectrum_error:.6f}"
    if report.ssim is not None:
        line += f"  ssim={report.ssim:.6f}"
    if report.diverged_cases:
        line += f"  diverged={report.diverged_cases}/{report.n_cases}"
    print(line)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.corrupt_op:
        print(f"fault injection: corrupting adjoint of op {args.corrupt_op!r}")
    results = gradcheck_mod.run_all(corrupt_op=args.corrupt_op)
    ok = True
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"[{status}] {r.name}: max rel. err {r.max_error:.3e} (tol {r.tolerance:.0e})")
        ok &= r.passed
    if not ok:
        print("gradient checks FAILED", file=sys.stderr)
        return EXIT_CHECK_FAILURE
    print("all gradient checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqcast",
        description="Sequence-forecasting training engine: teacher-forced, "
                    "autoregressive and scheduled BPTT variants.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="TOML run config")
        p.add_argument("--preset", choices=sorted(PRESETS),
                       help="named preset (overridden by --config contents)")
        p.add_argument("--seed", type=int, help="override the config seed")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--force", action="store_true",
                           help="overwrite a non-empty output directory")

    p = sub.add_parser("generate", help="generate a dataset to disk")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model; writes checkpoint/history/manifest")
    common(p)
    p.add_argument("--data", help="dataset directory (defaults to dataset.path)")
    p.add_argument("--verbose", action="store_true", help="per-epoch progress")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="autoregressive evaluation of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (defaults to dataset.path)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="run the gradient/identity verification suite")
    common(p, needs_out=False)
    p.add_argument("--corrupt-op", help=argparse.SUPPRESS)  # fault-injection hook
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
