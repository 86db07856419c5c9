"""Time-series generation, loading, scaling and splitting.

Three sources: the Mackey-Glass delay differential equation integrated with
RK4, the Darwin sea-level-pressure CSV (user supplied, single column), and a
synthetic 2-D traveling-wave grid used as a desk-scale spatiotemporal case.

Datasets are split train -> val -> test in temporal order, min-max scaled to
[0,1] with the scaler fitted on the training split only, and stored on disk
as a JSON manifest plus one raw little-endian float64 blob per split.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np


@dataclass
class MackeyGlassConfig:
    alpha: float = 0.2
    beta: float = 0.1
    exponent: int = 10
    delay: float = 17.0
    dt: float = 0.1
    subsample_dt: float = 1.0
    total_time: float = 2e5
    history: float = 1.2
    history_jitter: float = 0.01

    def __post_init__(self):
        if abs(self.delay / self.dt - round(self.delay / self.dt)) > 1e-9:
            raise ValueError("integration step must divide the delay exactly")
        if abs(self.subsample_dt / self.dt - round(self.subsample_dt / self.dt)) > 1e-9:
            raise ValueError("subsample interval must be an integer multiple of dt")

    @property
    def delay_steps(self) -> int:
        return round(self.delay / self.dt)

    @property
    def subsample_factor(self) -> int:
        return round(self.subsample_dt / self.dt)


def integrate_mackey_glass(config: MackeyGlassConfig, seed: int = 0) -> np.ndarray:
    """RK4 integration of dx/dt = a*x(t-tau)/(1+x(t-tau)^n) - b*x(t).

    The delayed value is held at its grid value across a step's internal
    stages (dt << tau).  History x(t<=0) is constant at the configured value
    plus a small seeded perturbation so different seeds give distinct
    trajectories.  Returns total_time/dt samples at the raw resolution.
    """
    rng = np.random.default_rng(seed)
    hist = config.history
    if config.history_jitter > 0:
        hist += rng.uniform(-config.history_jitter, config.history_jitter)

    n = round(config.total_time / config.dt)
    d = config.delay_steps
    a, b, nexp, dt = config.alpha, config.beta, config.exponent, config.dt
    out = np.empty(n)
    x = hist
    for i in range(n):
        xd = out[i - d - 1] if i > d else hist
        # the delayed drive is constant within the step, so each RK4 stage
        # only re-evaluates the linear -b*x term
        drive = a * xd / (1.0 + xd ** nexp)
        k1 = drive - b * x
        k2 = drive - b * (x + 0.5 * dt * k1)
        k3 = drive - b * (x + 0.5 * dt * k2)
        k4 = drive - b * (x + dt * k3)
        x += dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        if not math.isfinite(x):
            raise FloatingPointError(f"Mackey-Glass state non-finite at step {i}")
        out[i] = x
    return out


def integrate_mackey_glass_euler(config: MackeyGlassConfig, seed: int = 0) -> np.ndarray:
    """Straightforward forward-Euler reference integrator (oracle for RK4)."""
    rng = np.random.default_rng(seed)
    hist = config.history
    if config.history_jitter > 0:
        hist += rng.uniform(-config.history_jitter, config.history_jitter)
    n = round(config.total_time / config.dt)
    d = config.delay_steps
    a, b, nexp, dt = config.alpha, config.beta, config.exponent, config.dt
    out = np.empty(n)
    x = hist
    for i in range(n):
        xd = out[i - d - 1] if i > d else hist
        x += dt * (a * xd / (1.0 + xd ** nexp) - b * x)
        if not math.isfinite(x):
            raise FloatingPointError(f"Euler reference non-finite at step {i}")
        out[i] = x
    return out


def subsample(series: np.ndarray, factor: int) -> np.ndarray:
    """Keep every factor-th sample, starting at index 0."""
    if factor < 1:
        raise ValueError("subsample factor must be >= 1")
    if factor > len(series):
        raise ValueError(f"subsample factor {factor} exceeds series length {len(series)}")
    return series[::factor]


def add_noise_snr(series: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise at the given signal-to-noise ratio in dB.

    Noise variance = var(series) / 10^(snr_db/10).
    """
    power = float(np.var(series))
    if power == 0.0:
        raise ValueError("cannot set an SNR on a zero-variance series")
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    return series + rng.normal(0.0, sigma, size=series.shape)


@dataclass
class MinMaxScaler:
    """Per-component affine map fitted on the training split only."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, train_seqs: list[np.ndarray]) -> "MinMaxScaler":
        stacked = np.concatenate([s.reshape(-1, s.shape[-1]) for s in train_seqs])
        lo = stacked.min(axis=0)
        hi = stacked.max(axis=0)
        if np.any(hi <= lo):
            bad = int(np.argmax(hi <= lo))
            raise ValueError(f"degenerate component {bad}: train max <= min")
        return cls(lo=lo, hi=hi)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.lo) / (self.hi - self.lo)

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return x * (self.hi - self.lo) + self.lo


@dataclass
class SeriesDataset:
    """Scaled, split sequences plus the metadata needed to undo the scaling."""

    train: list[np.ndarray]
    val: list[np.ndarray]
    test: list[np.ndarray]
    scaler: MinMaxScaler
    dt: float
    d_x: int
    provenance: dict = field(default_factory=dict)


def _split_scale(train, val, test, dt, provenance) -> SeriesDataset:
    scaler = MinMaxScaler.fit(train)
    return SeriesDataset(
        train=[scaler.transform(s) for s in train],
        val=[scaler.transform(s) for s in val],
        test=[scaler.transform(s) for s in test],
        scaler=scaler,
        dt=dt,
        d_x=train[0].shape[-1],
        provenance=provenance,
    )


def build_mackey_dataset(
    series: np.ndarray,
    n_train_seq: int = 32,
    seq_len: int = 1120,
    dt: float = 1.0,
    provenance: dict | None = None,
) -> SeriesDataset:
    """Chop one subsampled trajectory into contiguous train/val/test blocks.

    Train and validation each take n_train_seq sequences of seq_len steps,
    in temporal order; everything after them is one long test block.
    """
    series = np.asarray(series, dtype=np.float64).reshape(-1, 1)
    need = 2 * n_train_seq * seq_len
    if series.shape[0] <= need:
        raise ValueError(
            f"series of {series.shape[0]} steps too short for "
            f"2 x {n_train_seq} x {seq_len} train/val blocks"
        )
    train = [series[i * seq_len:(i + 1) * seq_len] for i in range(n_train_seq)]
    val = [series[(n_train_seq + i) * seq_len:(n_train_seq + i + 1) * seq_len]
           for i in range(n_train_seq)]
    test = [series[need:]]
    return _split_scale(train, val, test, dt, provenance or {"source": "mackey-glass"})


def load_darwin(path: str) -> SeriesDataset:
    """Single-column CSV of monthly pressure readings: 600 train / 400 val / rest test."""
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            token = text.split(",")[0].strip()
            try:
                values.append(float(token))
            except ValueError:
                if lineno == 1:  # optional header
                    continue
                raise ValueError(f"{path}: non-numeric value at row {lineno}: {token!r}")
    if len(values) < 1400:
        raise ValueError(f"{path}: expected >= 1400 rows, found {len(values)}")
    series = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    train = [series[:600]]
    val = [series[600:1000]]
    test = [series[1000:1400]]
    return _split_scale(train, val, test, dt=1.0, provenance={"source": "darwin", "path": path})


def generate_traveling_wave(
    grid: tuple[int, int] = (8, 16),
    steps: int = 600,
    speed: float = 0.05,
    seed: int = 0,
) -> SeriesDataset:
    """Synthetic periodic 2-D field flattened row-major to d_x = H*W.

    u(x,y,t) = 0.5 + 0.25 sin(2pi(x/W - speed t + phi1))
                   + 0.15 sin(2pi(y/H + 0.5 speed t + phi2)).
    Seeds vary only the phases, so the structure is identical but shifted.
    Split 200 train / 200 val / remainder test.
    """
    if steps < 400:
        raise ValueError("traveling wave needs >= 400 steps for the 200/200/rest split")
    h, w = grid
    rng = np.random.default_rng(seed)
    phi1, phi2 = rng.uniform(0.0, 1.0, size=2)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    frames = np.empty((steps, h * w))
    for t in range(steps):
        u = (0.5
             + 0.25 * np.sin(2 * np.pi * (xs / w - speed * t + phi1))
             + 0.15 * np.sin(2 * np.pi * (ys / h + 0.5 * speed * t + phi2)))
        frames[t] = u.reshape(-1)
    prov = {"source": "traveling-wave", "grid": [h, w], "speed": speed, "seed": seed}
    # amplitudes keep u inside [0.1, 0.9] already, so the scaler is identity;
    # this also keeps speed=0 (constant frames) valid
    scaler = MinMaxScaler(lo=np.zeros(h * w), hi=np.ones(h * w))
    return SeriesDataset(
        train=[frames[:200]], val=[frames[200:400]], test=[frames[400:]],
        scaler=scaler, dt=1.0, d_x=h * w, provenance=prov,
    )


@dataclass
class EvalCase:
    """Contiguous warm-up + horizon segment drawn from the test split (scaled)."""

    warmup: np.ndarray
    horizon: np.ndarray
    index: int


def sample_eval_cases(
    dataset: SeriesDataset, n: int, warmup: int, horizon: int, rng: np.random.Generator
) -> list[EvalCase]:
    """n distinct start positions sampled uniformly from the test split."""
    need = warmup + horizon
    positions = []
    for si, seq in enumerate(dataset.test):
        for start in range(seq.shape[0] - need + 1):
            positions.append((si, start))
    if n > len(positions):
        raise ValueError(f"requested {n} cases but only {len(positions)} valid positions")
    chosen = rng.choice(len(positions), size=n, replace=False)
    cases = []
    for idx, k in enumerate(sorted(int(c) for c in chosen)):
        si, start = positions[k]
        seq = dataset.test[si]
        cases.append(EvalCase(
            warmup=seq[start:start + warmup],
            horizon=seq[start + warmup:start + need],
            index=idx,
        ))
    return cases


# -- on-disk format -----------------------------------------------------------
#
# A dataset directory holds manifest.json plus train.bin / val.bin / test.bin.
# Each .bin is the split's sequences concatenated in order, row-major
# little-endian float64; per-sequence lengths live in the manifest.

_SPLITS = ("train", "val", "test")


def save_dataset(ds: SeriesDataset, outdir: str) -> str:
    """Write manifest + split blobs; returns the dataset content hash."""
    os.makedirs(outdir, exist_ok=True)
    manifest = {
        "format": "seqcast-dataset-v1",
        "d_x": ds.d_x,
        "dt": ds.dt,
        "provenance": ds.provenance,
        "scaler": {"lo": ds.scaler.lo.tolist(), "hi": ds.scaler.hi.tolist()},
        "splits": {},
    }
    for name in _SPLITS:
        seqs = getattr(ds, name)
        manifest["splits"][name] = {"lengths": [int(s.shape[0]) for s in seqs]}
        blob = np.concatenate([np.ascontiguousarray(s, dtype="<f8") for s in seqs])
        with open(os.path.join(outdir, f"{name}.bin"), "wb") as fh:
            fh.write(blob.tobytes())
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return dataset_hash(outdir)


def load_dataset(path: str) -> SeriesDataset:
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "seqcast-dataset-v1":
        raise ValueError(f"{path}: not a seqcast dataset directory")
    d_x = manifest["d_x"]
    splits = {}
    for name in _SPLITS:
        lengths = manifest["splits"][name]["lengths"]
        raw = np.fromfile(os.path.join(path, f"{name}.bin"), dtype="<f8")
        raw = raw.astype(np.float64).reshape(-1, d_x)
        seqs, off = [], 0
        for ln in lengths:
            seqs.append(raw[off:off + ln])
            off += ln
        splits[name] = seqs
    scaler = MinMaxScaler(
        lo=np.asarray(manifest["scaler"]["lo"], dtype=np.float64),
        hi=np.asarray(manifest["scaler"]["hi"], dtype=np.float64),
    )
    return SeriesDataset(
        train=splits["train"], val=splits["val"], test=splits["test"],
        scaler=scaler, dt=manifest["dt"], d_x=d_x,
        provenance=manifest.get("provenance", {}),
    )


def dataset_hash(path: str) -> str:
    """SHA-256 over the manifest and split blobs."""
    h = hashlib.sha256()
    for name in ["manifest.json"] + [f"{s}.bin" for s in _SPLITS]:
        with open(os.path.join(path, name), "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()
