"""Autoregressive inference and evaluation metrics.

Forecasting conditions the hidden state on a teacher-forced warm-up segment
and then feeds each prediction back as the next input.  Metrics: RMSE (with
a per-timestep curve), an L1 distance between log-periodograms for frequency
content, and windowed SSIM for grid-shaped data.  All metrics are computed
in unscaled physical units.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from seqcast.datasets import EvalCase, MinMaxScaler
from seqcast.lstm import LstmParams, ReadoutParams, RnnState, lstm_step_np, readout_np


@dataclass
class ForecastResult:
    prediction: np.ndarray  # (steps_completed, d_x)
    truth: np.ndarray       # (horizon, d_x)
    warmup_len: int
    case_index: int
    diverged: bool = False


def autoregressive_forecast(
    lstm: LstmParams, ro: ReadoutParams, case: EvalCase
) -> ForecastResult:
    """Warm up teacher-forced from zero state, then run closed-loop.

    Deterministic: no randomness is consumed.  If an output goes non-finite
    the trajectory is truncated there and the case flagged as diverged.
    """
    if case.warmup.shape[0] < 1:
        raise ValueError("warm-up segment must have at least one step")
    state = RnnState.zeros(lstm.d_h)
    x = None
    for t in range(case.warmup.shape[0]):
        x = case.warmup[t]
        if t < case.warmup.shape[0] - 1:
            state = lstm_step_np(x, state, lstm)
    horizon = case.horizon.shape[0]
    preds = np.empty((horizon, lstm.d_x))
    for t in range(horizon):
        state = lstm_step_np(x, state, lstm)
        o = readout_np(state.h, ro)
        if not np.all(np.isfinite(o)):
            return ForecastResult(
                prediction=preds[:t], truth=case.horizon,
                warmup_len=case.warmup.shape[0], case_index=case.index, diverged=True,
            )
        preds[t] = o
        x = o
    return ForecastResult(
        prediction=preds, truth=case.horizon,
        warmup_len=case.warmup.shape[0], case_index=case.index,
    )


def rmse(pred: np.ndarray, truth: np.ndarray) -> tuple[float, np.ndarray]:
    """(aggregate RMSE over all steps/components, per-step RMSE curve)."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"rmse: shape mismatch {pred.shape} vs {truth.shape}")
    sq = (pred - truth) ** 2
    per_step = np.sqrt(sq.mean(axis=tuple(range(1, sq.ndim))))
    return float(np.sqrt(sq.mean())), per_step


def power_spectrum_error(pred: np.ndarray, truth: np.ndarray, eps: float = 1e-12) -> float:
    """Mean |log10 P_pred - log10 P_truth| over periodogram bins k=1..N//2.

    Periodogram of the mean-removed signal, P_k = |X_k|^2 / N, per component.
    Invariant to a constant offset between the signals.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64).T).T
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64).T).T
    if pred.shape != truth.shape:
        raise ValueError(f"spectrum error: shape mismatch {pred.shape} vs {truth.shape}")
    n = pred.shape[0]
    if n < 16:
        raise ValueError(f"spectrum error: need >= 16 samples, got {n}")
    errs = []
    for c in range(pred.shape[1]):
        pp = periodogram(pred[:, c])
        pt = periodogram(truth[:, c])
        errs.append(np.abs(np.log10(pp + eps) - np.log10(pt + eps)).mean())
    return float(np.mean(errs))


def periodogram(x: np.ndarray) -> np.ndarray:
    """P(f_k) = |X_k|^2 / N for k = 1..floor(N/2) of the mean-removed signal."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    spec = np.fft.rfft(x - x.mean())
    return (np.abs(spec[1:n // 2 + 1]) ** 2) / n


def _gaussian_kernel(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    half = size // 2
    g = np.exp(-0.5 * (np.arange(-half, half + 1) / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def ssim(pred: np.ndarray, truth: np.ndarray, data_range: float,
         window: int = 7, sigma: float = 1.5) -> float:
    """Structural similarity between two 2-D frames.

    Gaussian-weighted local statistics in a window x window neighbourhood,
    clipped (and the weights renormalized) at the borders;
    C1 = (0.01 * data_range)^2, C2 = (0.03 * data_range)^2.  Returns the mean
    of the SSIM map over all positions.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ValueError(f"ssim: expected equal 2-d frames, got {pred.shape} vs {truth.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    kern = _gaussian_kernel(window, sigma)
    half = window // 2
    hgt, wid = pred.shape
    total = 0.0
    for i in range(hgt):
        i0, i1 = max(0, i - half), min(hgt, i + half + 1)
        for j in range(wid):
            j0, j1 = max(0, j - half), min(wid, j + half + 1)
            k = kern[i0 - i + half:i1 - i + half, j0 - j + half:j1 - j + half]
            k = k / k.sum()
            px = pred[i0:i1, j0:j1]
            tx = truth[i0:i1, j0:j1]
            mx = (k * px).sum()
            my = (k * tx).sum()
            vx = (k * px * px).sum() - mx * mx
            vy = (k * tx * tx).sum() - my * my
            cov = (k * px * tx).sum() - mx * my
            total += ((2 * mx * my + c1) * (2 * cov + c2)) / (
                (mx * mx + my * my + c1) * (vx + vy + c2)
            )
    return total / (hgt * wid)


@dataclass
class MetricReport:
    per_case_rmse: list[float]
    per_case_spectrum_error: list[float]
    per_case_ssim: list[float]        # empty for pure series data
    rmse: float
    spectrum_error: float
    ssim: float | None
    rmse_curve: np.ndarray            # mean per-timestep RMSE over cases
    ssim_curve: np.ndarray | None
    diverged_cases: int
    n_cases: int
    baseline_rmse: float | None = None
    meta: dict = field(default_factory=dict)


def evaluate(
    lstm: LstmParams,
    ro: ReadoutParams,
    cases: list[EvalCase],
    scaler: MinMaxScaler,
    grid_shape: tuple[int, int] | None = None,
) -> MetricReport:
    """Forecast every case, unscale, aggregate metrics by mean over cases.

    Diverged cases are counted and excluded from the aggregates.  With a
    grid_shape, per-frame SSIM (and its per-timestep curve) is added, using
    the unscaled ground-truth range of each case as data_range.
    """
    if not cases:
        raise ValueError("evaluate: need at least one case")
    rmses, specs, ssims = [], [], []
    rmse_curves, ssim_curves = [], []
    baselines = []
    diverged = 0
    horizon = cases[0].horizon.shape[0]
    for case in cases:
        fr = autoregressive_forecast(lstm, ro, case)
        if fr.diverged or fr.prediction.shape[0] < horizon:
            diverged += 1
            continue
        pred = scaler.inverse(fr.prediction)
        truth = scaler.inverse(case.horizon)
        agg, curve = rmse(pred, truth)
        rmses.append(agg)
        rmse_curves.append(curve)
        if truth.shape[0] >= 16:
            specs.append(power_spectrum_error(pred, truth))
        # last-value persistence reference: repeat the final warm-up point
        last = scaler.inverse(case.warmup[-1])
        baselines.append(rmse(np.tile(last, (horizon, 1)), truth)[0])
        if grid_shape is not None:
            rng_ = float(truth.max() - truth.min()) or 1.0
            frame_ssims = [
                ssim(pred[t].reshape(grid_shape), truth[t].reshape(grid_shape), rng_)
                for t in range(horizon)
            ]
            ssims.append(float(np.mean(frame_ssims)))
            ssim_curves.append(np.asarray(frame_ssims))
    if not rmses:
        raise RuntimeError("all evaluation cases diverged")
    return MetricReport(
        per_case_rmse=rmses,
        per_case_spectrum_error=specs,
        per_case_ssim=ssims,
        rmse=float(np.mean(rmses)),
        spectrum_error=float(np.mean(specs)) if specs else float("nan"),
        ssim=float(np.mean(ssims)) if ssims else None,
        rmse_curve=np.mean(rmse_curves, axis=0),
        ssim_curve=np.mean(ssim_curves, axis=0) if ssim_curves else None,
        diverged_cases=diverged,
        n_cases=len(cases),
        baseline_rmse=float(np.mean(baselines)) if baselines else None,
    )


def save_report(report: MetricReport, outdir: str) -> None:
    """JSON summary plus per-case and per-timestep CSVs for plotting."""
    os.makedirs(outdir, exist_ok=True)
    doc = {
        "rmse": report.rmse,
        "spectrum_error": None if math.isnan(report.spectrum_error) else report.spectrum_error,
        "ssim": report.ssim,
        "baseline_rmse": report.baseline_rmse,
        "diverged_cases": report.diverged_cases,
        "n_cases": report.n_cases,
        "meta": report.meta,
    }
    with open(os.path.join(outdir, "report.json"), "w") as fh:
        json.dump(doc, fh, indent=2)
    with open(os.path.join(outdir, "per_case.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "rmse", "spectrum_error", "ssim"])
        for i, r in enumerate(report.per_case_rmse):
            spec = report.per_case_spectrum_error[i] if i < len(report.per_case_spectrum_error) else ""
            ss = report.per_case_ssim[i] if i < len(report.per_case_ssim) else ""
            w.writerow([i, repr(r), spec and repr(spec), ss and repr(ss)])
    with open(os.path.join(outdir, "curves.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "rmse", "ssim"])
        for t in range(report.rmse_curve.shape[0]):
            ss = repr(float(report.ssim_curve[t])) if report.ssim_curve is not None else ""
            w.writerow([t, repr(float(report.rmse_curve[t])), ss])
