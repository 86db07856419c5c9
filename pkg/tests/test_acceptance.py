"""Acceptance gate: one test per shipped-behavior criterion.

Each test prints a single "criterion N: PASS/FAIL" verdict line (run pytest
with -s to see them alongside the assertions).  Criteria 5-8 involve real
integrations/training runs and are marked slow.
"""

import csv
import os
import time

import numpy as np
import pytest

from seqcast.autodiff import Tape, backward
from seqcast.cli import main
from seqcast.datasets import (
    MackeyGlassConfig,
    add_noise_snr,
    generate_traveling_wave,
    integrate_mackey_glass,
    integrate_mackey_glass_euler,
    save_dataset,
)
from seqcast.gradcheck import gradient_vs_fd, unroll_loss_grad
from seqcast.lstm import init_params
from seqcast.metrics import power_spectrum_error, periodogram, rmse, ssim
from seqcast.training import (
    Mode,
    UnrollPlan,
    lemma_recurrence,
    lemma_unrolled,
    plan_for,
    unroll,
)

# Criterion 6/8 run configuration.  The criterion pins d_h=24, L=20,
# 300 epochs, 3 seeds on the traveling-wave dataset; noise level, learning
# rate and schedule ramp are free and were selected empirically (the clean
# wave has no exposure-bias gap: its one-step map is exactly learnable, so
# teacher forcing rolls out perfectly and the increasing-rollout-error
# dynamics cannot appear without measurement noise).
WAVE_SNR_DB = 30.0
WAVE_SPEED = 0.23
WAVE_LR = 1e-3
WAVE_SCHEDULE_K = 12.0
WAVE_SEEDS = (1, 2, 3)


def _verdict(n, ok, detail=""):
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}{'  ' + detail if detail else ''}")


def test_criterion_1_gradient_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {}
    for mode in Mode:
        lstm, ro = init_params(seed=11, d_x=2, d_h=6)
        seq = rng.uniform(0.0, 1.0, size=(9, 2))  # L=8 inputs + final target
        plan = plan_for(mode, 0.5, seq.shape[0] - 2, rng)
        worst[mode.value] = gradient_vs_fd(lstm, ro, seq, plan)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-6 and elapsed < 10.0
    _verdict(1, ok, f"max rel err {max(worst.values()):.2e} in {elapsed:.1f}s")
    assert max(worst.values()) < 1e-6, worst
    assert elapsed < 10.0


def test_criterion_2_mode_limit_identities():
    t0 = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(1)
    for trial in range(20):
        lstm, ro = init_params(seed=100 + trial, d_x=2, d_h=5)
        seq = rng.uniform(0.0, 1.0, size=(8, 2))
        n = seq.shape[0] - 2
        zeros, ones = np.zeros(n, int), np.ones(n, int)
        _, g_tf = unroll_loss_grad(lstm, ro, seq, UnrollPlan(zeros, attached=False))
        _, g_sa0 = unroll_loss_grad(lstm, ro, seq, UnrollPlan(zeros, attached=True))
        _, g_ar = unroll_loss_grad(lstm, ro, seq, UnrollPlan(ones, attached=True))
        _, g_sa1 = unroll_loss_grad(lstm, ro, seq, UnrollPlan(ones, attached=True))
        worst = max(worst,
                    float(np.max(np.abs(g_tf - g_sa0))),
                    float(np.max(np.abs(g_ar - g_sa1))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and elapsed < 5.0
    _verdict(2, ok, f"max |delta| {worst:.2e} in {elapsed:.1f}s")
    assert worst < 1e-12
    assert elapsed < 5.0


def test_criterion_3_ss_sa_separation():
    hits = 0
    forward_ok = True
    for trial in range(20):
        lstm, ro = init_params(seed=200 + trial, d_x=2, d_h=5)
        seq = np.random.default_rng(300 + trial).uniform(0.0, 1.0, size=(8, 2))
        mask = np.ones(seq.shape[0] - 2, dtype=int)
        tapes = {}
        grads = {}
        for name, attached in (("ss", False), ("sa", True)):
            tape = Tape()
            res = unroll((lstm, ro), seq, UnrollPlan(mask, attached), tape)
            backward(tape, res.loss)
            tapes[name] = [o.value for o in res.outputs]
            grads[name] = res.model.grads()["readout_w"]
        for a, b in zip(tapes["ss"], tapes["sa"]):
            if np.max(np.abs(a - b)) >= 1e-12:
                forward_ok = False
        rel = np.linalg.norm(grads["ss"] - grads["sa"]) / np.linalg.norm(grads["sa"])
        if rel > 1e-3:
            hits += 1
    ok = forward_ok and hits >= 19
    _verdict(3, ok, f"forward equal: {forward_ok}, separated draws: {hits}/20")
    assert forward_ok
    assert hits >= 19


def test_criterion_4_lemma_closed_form():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        T = int(rng.integers(1, 21))
        b = rng.standard_normal(T)
        c = rng.standard_normal(T)
        worst = max(worst, abs(lemma_unrolled(b, c) - lemma_recurrence(b, c)))
    ok = worst < 1e-12
    _verdict(4, ok, f"max |delta| {worst:.2e} over 100 sequences")
    assert worst < 1e-12


@pytest.mark.slow
def test_criterion_5_mackey_glass_integrator():
    t0 = time.perf_counter()
    eq = integrate_mackey_glass(
        MackeyGlassConfig(total_time=1e3, history=1.0, history_jitter=0.0))
    eq_err = float(np.max(np.abs(eq - 1.0)))

    # independent fine-step Euler reference establishes the bound first
    euler = integrate_mackey_glass_euler(
        MackeyGlassConfig(dt=0.02, total_time=2e4, history_jitter=0.0))
    euler_ok = 0.0 < euler.min() and euler.max() < 1.6

    full = integrate_mackey_glass(MackeyGlassConfig(total_time=2e5, history_jitter=0.0))
    bound_ok = 0.0 < full.min() and full.max() < 1.6
    elapsed = time.perf_counter() - t0
    ok = eq_err < 1e-8 and euler_ok and bound_ok and elapsed < 60.0
    _verdict(5, ok, f"eq err {eq_err:.1e}, range ({full.min():.3f}, {full.max():.3f}), "
                    f"{elapsed:.0f}s")
    assert eq_err < 1e-8
    assert euler_ok, (euler.min(), euler.max())
    assert bound_ok, (full.min(), full.max())
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# criteria 6 + 8: desk-scale wave training dynamics, run through the CLI so
# criterion 8 can compare the emitted history CSVs bit-for-bit.

def _wave_data_dir(tmp_factory):
    ds = generate_traveling_wave(steps=600, speed=WAVE_SPEED, seed=0)
    rng = np.random.default_rng(1000)
    for split in (ds.train, ds.val, ds.test):
        for i in range(len(split)):
            split[i] = add_noise_snr(split[i], WAVE_SNR_DB, rng)
    out = str(tmp_factory.mktemp("wave-data"))
    save_dataset(ds, out)
    return out


def _wave_config_file(tmp_factory, mode):
    path = tmp_factory.mktemp("cfg") / f"{mode}.toml"
    path.write_text(
        "[dataset]\nkind = \"wave\"\n"
        "[model]\nd_h = 24\n"
        f"[training]\nmode = \"{mode}\"\nepochs = 300\nseq_len = 20\n"
        f"lr = {WAVE_LR}\nschedule_k = {WAVE_SCHEDULE_K}\npatience = 300\n"
    )
    return str(path)


def _read_history(run_dir):
    with open(os.path.join(run_dir, "history.csv")) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="session")
def wave_runs(tmp_path_factory):
    """Train TF and SA for each seed, twice each (criterion 8 needs repeats).

    Returns {(mode, seed, repeat): history rows}.
    """
    data = _wave_data_dir(tmp_path_factory)
    cfgs = {m: _wave_config_file(tmp_path_factory, m) for m in ("tf", "sa")}
    runs = {}
    for mode in ("tf", "sa"):
        for seed in WAVE_SEEDS:
            for repeat in (0, 1):
                out = str(tmp_path_factory.mktemp(f"run-{mode}-{seed}-{repeat}"))
                code = main(["train", "--config", cfgs[mode], "--data", data,
                             "--out", out, "--seed", str(seed), "--force"])
                assert code == 0, f"training exited {code} for {mode} seed {seed}"
                runs[(mode, seed, repeat)] = _read_history(out)
    return runs


def _val_losses(rows):
    idx = rows[0].index("val_loss_p1")
    return [float(r[idx]) for r in rows[1:]]


@pytest.mark.slow
def test_criterion_6_training_dynamics(wave_runs):
    details = []
    ok = True
    for seed in WAVE_SEEDS:
        tf_best = min(_val_losses(wave_runs[("tf", seed, 0)]))
        sa_vals = _val_losses(wave_runs[("sa", seed, 0)])
        sa_best = min(sa_vals)
        q = len(sa_vals) // 4
        q1, q4 = np.median(sa_vals[:q]), np.median(sa_vals[-q:])
        seed_ok = sa_best < tf_best and q4 < q1
        ok &= seed_ok
        details.append(f"seed {seed}: sa {sa_best:.3e} vs tf {tf_best:.3e}, "
                       f"q1 {q1:.2e} -> q4 {q4:.2e}")
    _verdict(6, ok, "; ".join(details))
    assert ok, details


@pytest.mark.slow
def test_criterion_8_determinism(wave_runs):
    ok = True
    for (mode, seed) in [(m, s) for m in ("tf", "sa") for s in WAVE_SEEDS]:
        a = wave_runs[(mode, seed, 0)]
        b = wave_runs[(mode, seed, 1)]
        # wall_time_s is wall-clock measurement and necessarily differs;
        # every other column must be bit-identical
        drop = a[0].index("wall_time_s")
        strip = lambda rows: [[c for i, c in enumerate(r) if i != drop] for r in rows]
        if strip(a) != strip(b):
            ok = False
    _verdict(8, ok, "history CSVs identical across repeats (excluding wall_time_s)")
    assert ok


# ---------------------------------------------------------------------------
# criterion 7: desk-scale Mackey-Glass parity across TF / SS / SA.

@pytest.mark.slow
def test_criterion_7_mackey_parity(tmp_path_factory):
    from seqcast.datasets import build_mackey_dataset, sample_eval_cases, subsample
    from seqcast.metrics import evaluate
    from seqcast.training import TrainConfig, train

    t0 = time.perf_counter()
    medians = {}
    baselines = []
    for mode in (Mode.TEACHER_FORCING, Mode.SCHEDULED_SAMPLING,
                 Mode.SCHEDULED_AUTOREGRESSIVE):
        rmses = []
        for seed in (1, 2, 3):
            mg = MackeyGlassConfig(total_time=4000.0)
            series = subsample(integrate_mackey_glass(mg, seed=seed),
                               mg.subsample_factor)
            series = add_noise_snr(series, 60.0, np.random.default_rng(seed + 50))
            ds = build_mackey_dataset(series, n_train_seq=3, seq_len=240)
            cfg = TrainConfig(mode=mode, epochs=300, seq_len=40, lr=5e-4,
                              d_h=32, seed=seed, patience=300)
            res = train(ds, cfg)
            cases = sample_eval_cases(ds, n=20, warmup=20, horizon=200,
                                      rng=np.random.default_rng(seed))
            rep = evaluate(res.best_lstm, res.best_readout, cases, ds.scaler)
            rmses.append(rep.rmse)
            baselines.append(rep.baseline_rmse)
        medians[mode.value] = float(np.median(rmses))
    elapsed = time.perf_counter() - t0
    lo, hi = min(medians.values()), max(medians.values())
    baseline = float(np.median(baselines))
    ok = hi / lo < 3.0 and hi < baseline and elapsed < 1200.0
    _verdict(7, ok, f"medians {medians}, baseline {baseline:.3f}, "
                    f"spread x{hi / lo:.2f}, {elapsed:.0f}s")
    assert hi / lo < 3.0, medians
    assert hi < baseline, (medians, baseline)
    assert elapsed < 1200.0


def test_criterion_9_metric_examples():
    checks = []
    # rmse table
    x = np.random.default_rng(0).normal(size=(10, 2))
    checks.append(rmse(x, x)[0] == 0.0)
    checks.append(abs(rmse(x + 2.0, x)[0] - 2.0) < 1e-12)
    checks.append(abs(rmse(np.zeros((2, 1)), np.array([[3.0], [4.0]]))[0]
                      - np.sqrt(12.5)) < 1e-12)
    # spectrum table
    s = np.sin(np.linspace(0, 20, 64))
    checks.append(power_spectrum_error(s, s) == 0.0)
    checks.append(power_spectrum_error(s + 5.0, s) < 1e-9)
    n = 256
    t = np.arange(n)
    s5 = np.sin(2 * np.pi * 5 * t / n)
    s10 = np.sin(2 * np.pi * 10 * t / n)
    checks.append(int(np.argmax(periodogram(s5))) == 4)      # bin k=5
    checks.append(int(np.argmax(periodogram(s10))) == 9)     # bin k=10
    checks.append(power_spectrum_error(s10, s5) > 0.0)
    # ssim table
    frame = np.random.default_rng(1).uniform(size=(8, 16))
    checks.append(abs(ssim(frame, frame, data_range=1.0) - 1.0) < 1e-12)
    checks.append(ssim(-frame + 1.0, frame, data_range=1.0) < 0.0)
    # independent global-statistics cross-check (window spans the frame)
    ds = generate_traveling_wave(grid=(6, 6), steps=400, speed=0.07, seed=3)
    truth = ds.train[0][17].reshape(6, 6)
    noisy = truth + np.random.default_rng(6).normal(0.0, 0.1, size=truth.shape)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mx, my = noisy.mean(), truth.mean()
    vx, vy = noisy.var(), truth.var()
    cov = ((noisy - mx) * (truth - my)).mean()
    oracle = ((2 * mx * my + c1) * (2 * cov + c2)) / (
        (mx**2 + my**2 + c1) * (vx + vy + c2))
    checks.append(abs(ssim(noisy, truth, data_range=1.0) - oracle) < 0.05)
    ok = all(checks)
    _verdict(9, ok, f"{sum(checks)}/{len(checks)} examples")
    assert ok, checks
