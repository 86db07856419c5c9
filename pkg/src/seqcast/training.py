"""Training regimes: unroll graph construction, schedules, Adam, train loop.

Four unroll modes share one graph builder.  The per-timestep feedback
decision is a Bernoulli mask k: ground truth when k_t = 0, own prediction
when k_t = 1.  Scheduled sampling detaches the fed-back prediction so no
gradient flows through it; scheduled-autoregressive (and plain
autoregressive) keep it attached, which adds hidden-to-output terms to the
weight gradient.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from seqcast.autodiff import Tape, backward, detach
from seqcast.lstm import (
    LstmParams,
    ReadoutParams,
    RnnState,
    TapedModel,
    init_params,
    lstm_step_np,
    readout_np,
)


class Mode(str, Enum):
    TEACHER_FORCING = "tf"
    AUTOREGRESSIVE = "ar"
    SCHEDULED_SAMPLING = "ss"
    SCHEDULED_AUTOREGRESSIVE = "sa"


#: modes whose fed-back predictions carry gradient
ATTACHED_MODES = (Mode.AUTOREGRESSIVE, Mode.SCHEDULED_AUTOREGRESSIVE)


class DivergenceError(RuntimeError):
    """Loss or gradient went non-finite during training."""

    def __init__(self, epoch: int, mode: Mode, what: str):
        super().__init__(f"divergence in mode {mode.value} at epoch {epoch}: {what}")
        self.epoch = epoch
        self.mode = mode


@dataclass
class UnrollPlan:
    """Per-timestep feedback decision for one window.

    ``mask`` has one entry per fed-back step (window length minus 2; the
    first input is always ground truth).  ``attached`` selects whether
    gradients flow through fed-back predictions.
    """

    mask: np.ndarray
    attached: bool

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.int64)


def sample_mask(p: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. Bernoulli(p) draws in {0,1}."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0,1], got {p}")
    if n < 0:
        raise ValueError("n must be >= 0")
    return (rng.random(n) < p).astype(np.int64)


def plan_for(mode: Mode, p: float, n_feedback: int, rng: np.random.Generator) -> UnrollPlan:
    """Unroll plan for one window: mode fixes mask extremes and attachment."""
    if mode is Mode.TEACHER_FORCING:
        mask = np.zeros(n_feedback, dtype=np.int64)
    elif mode is Mode.AUTOREGRESSIVE:
        mask = np.ones(n_feedback, dtype=np.int64)
    else:
        mask = sample_mask(p, n_feedback, rng)
    return UnrollPlan(mask=mask, attached=mode in ATTACHED_MODES)


def schedule_p(epoch: int, total_epochs: int, k: float | None = None) -> float:
    """Inverse-sigmoid anneal of the feedback probability, 0 -> 1.

    p(e) = 1 - k / (k + exp(e/k)); the default shape parameter
    k = total_epochs/18 starts near 0 and saturates near 1 by the end.
    """
    if total_epochs < 1:
        raise ValueError("total_epochs must be >= 1")
    if k is None:
        k = total_epochs / 18.0
    if k <= 0:
        raise ValueError("schedule shape parameter must be positive")
    return 1.0 - k / (k + math.exp(min(epoch / k, 700.0)))


def mse_loss(output_refs, target_refs, tape: Tape):
    """Mean over steps and components of squared deviation, as a tape node."""
    if len(output_refs) != len(target_refs) or not output_refs:
        raise ValueError("mse_loss: outputs and targets must be equal-length and non-empty")
    total = None
    n = 0
    for o, t in zip(output_refs, target_refs):
        if o.shape != t.shape:
            raise ValueError(f"mse_loss: shape mismatch {o.shape} vs {t.shape}")
        diff = tape.add(o, tape.scale(t, -1.0))
        sq = tape.sum(tape.square(diff))
        total = sq if total is None else tape.add(total, sq)
        n += int(np.prod(o.shape)) if o.shape else 1
    return tape.scale(total, 1.0 / n)


@dataclass
class UnrollResult:
    outputs: list
    loss: object
    model: TapedModel
    final_state: RnnState


def unroll(
    params: tuple[LstmParams, ReadoutParams],
    sequence: np.ndarray,
    plan: UnrollPlan,
    tape: Tape,
    init_state: RnnState | None = None,
    frozen_feedback: list[np.ndarray] | None = None,
) -> UnrollResult:
    """Build the full graph for one window; returns outputs, loss, model.

    ``sequence`` is (S, d_x) with S >= 2: inputs are steps 0..S-2, targets
    steps 1..S-1.  The first input is always ground truth; for step t >= 1
    the input is ground truth x_t when mask[t-1] = 0, else the previous
    prediction o_{t-1} (detached when plan.attached is False).  The initial
    state enters as a leaf, so gradients are truncated to this window.

    ``frozen_feedback`` replaces detached fed-back predictions with fixed
    values (one per output step).  It exists for the finite-difference
    oracle: differentiating a detached graph numerically requires holding
    the stop-gradient values constant while parameters are perturbed.
    """
    lstm, ro = params
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] < 2:
        raise ValueError(f"unroll: sequence must be (S>=2, d_x), got {seq.shape}")
    n_feedback = seq.shape[0] - 2
    if len(plan.mask) != n_feedback:
        raise ValueError(
            f"unroll: mask length {len(plan.mask)} != feedback steps {n_feedback}"
        )

    model = TapedModel(tape, lstm, ro)
    state = init_state if init_state is not None else RnnState.zeros(lstm.d_h)
    h = tape.leaf(state.h)
    c = tape.leaf(state.c)

    outputs = []
    target_refs = []
    x = tape.leaf(seq[0])
    for t in range(seq.shape[0] - 1):
        if t > 0:
            if plan.mask[t - 1] == 1:
                prev = outputs[-1]
                if plan.attached:
                    x = prev
                elif frozen_feedback is not None:
                    x = tape.leaf(frozen_feedback[t - 1])
                else:
                    x = detach(prev)
            else:
                x = tape.leaf(seq[t])
        h, c = model.lstm_step(x, h, c)
        outputs.append(model.readout_op(h))
        target_refs.append(tape.leaf(seq[t + 1]))

    loss = mse_loss(outputs, target_refs, tape)
    final = RnnState(h.value.copy(), c.value.copy())
    return UnrollResult(outputs=outputs, loss=loss, model=model, final_state=final)


# -- Adam ---------------------------------------------------------------------


def adam_step(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (param', m', v')."""
    if t < 1:
        raise ValueError("Adam timestep must be >= 1")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient in adam_step")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam over a named parameter dict."""

    def __init__(self, names, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: 0.0 for n in names}
        self.v = {n: 0.0 for n in names}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        out = {}
        for n, p in params.items():
            g = grads[n]
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {n}")
            self.m[n] = self.beta1 * self.m[n] + (1 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1 - self.beta2) * (g * g)
            m_hat = self.m[n] / (1 - self.beta1 ** self.t)
            v_hat = self.v[n] / (1 - self.beta2 ** self.t)
            out[n] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


# -- Lemma: closed form of the first-order recurrence a_t = b_t + c_t a_{t-1} --


def lemma_recurrence(b, c) -> float:
    """Iterate a_t = b_t + c_t a_{t-1} from a_0 = 0; returns a_T."""
    if len(b) != len(c) or not len(b):
        raise ValueError("b and c must be non-empty and equal-length")
    a = 0.0
    for bt, ct in zip(b, c):
        a = bt + ct * a
    return a


def lemma_unrolled(b, c) -> float:
    """Closed form a_T = b_T + sum_{i=1}^{T-1} (prod_{j=i+1}^{T} c_j) b_i."""
    if len(b) != len(c) or not len(b):
        raise ValueError("b and c must be non-empty and equal-length")
    T = len(b)
    a = b[T - 1]
    for i in range(T - 1):
        prod = 1.0
        for j in range(i + 1, T):
            prod *= c[j]
        a += prod * b[i]
    return a


# -- training loop -------------------------------------------------------------


@dataclass
class TrainConfig:
    mode: Mode
    epochs: int
    seq_len: int  # L: number of inputs per window (window holds L+1 points)
    lr: float = 1e-3
    batch_size: int = 32
    d_h: int = 16
    schedule_k: float | None = None
    patience: int = 50
    seed: int = 1

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class EpochStats:
    epoch: int
    p: float
    train_loss: float
    val_loss_p1: float
    wall_time_s: float


@dataclass
class TrainResult:
    lstm: LstmParams
    readout: ReadoutParams
    best_lstm: LstmParams
    best_readout: ReadoutParams
    best_epoch: int
    best_val_loss: float
    history: list[EpochStats] = field(default_factory=list)


def _mode_p(mode: Mode, epoch: int, cfg: TrainConfig) -> float:
    if mode is Mode.TEACHER_FORCING:
        return 0.0
    if mode is Mode.AUTOREGRESSIVE:
        return 1.0
    return schedule_p(epoch, cfg.epochs, cfg.schedule_k)


def _window_starts(steps: int, L: int) -> list[int]:
    # non-overlapping windows of L+1 points with stride L, so consecutive
    # windows share exactly the boundary point and the carried state lines up
    return list(range(0, steps - L, L))


def autoregressive_validation_loss(lstm: LstmParams, ro: ReadoutParams, sequences) -> float:
    """Validation loss at p=1: one continuous rollout per sequence.

    Only the very first input is ground truth; every later input is the
    model's own prediction, so rollout errors compound over the full
    sequence instead of being reset at window boundaries.
    """
    total = 0.0
    count = 0
    for seq in sequences:
        state = RnnState.zeros(lstm.d_h)
        x = seq[0]
        for t in range(seq.shape[0] - 1):
            state = lstm_step_np(x, state, lstm)
            o = readout_np(state.h, ro)
            d = o - seq[t + 1]
            total += float(d @ d)
            count += d.size
            x = o
    return total / count


def _params_dict(lstm: LstmParams, ro: ReadoutParams) -> dict[str, np.ndarray]:
    d = lstm.arrays()
    d["readout_w"] = ro.w
    return d


def _params_from_dict(d: dict[str, np.ndarray]) -> tuple[LstmParams, ReadoutParams]:
    from seqcast.lstm import GATE_NAMES

    return LstmParams(**{n: d[n] for n in GATE_NAMES}), ReadoutParams(w=d["readout_w"])


def train(dataset, config: TrainConfig, log=None) -> TrainResult:
    """Run the full training loop; returns final and best-on-validation params.

    Per epoch: the feedback probability p comes from the mode (0 for TF,
    1 for AR, inverse-sigmoid schedule for SS/SA); a fresh mask is sampled
    per window per sequence; gradients are averaged over the batch and
    applied with Adam once per (batch, window); validation runs fully
    autoregressively (p=1).  Early stopping by patience on validation loss.
    """
    lstm, ro = init_params(config.seed, dataset.d_x, config.d_h)
    params = _params_dict(lstm, ro)
    opt = Adam(params.keys(), lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA11CE]))

    train_seqs = dataset.train
    L = config.seq_len
    starts_per_seq = [_window_starts(s.shape[0], L) for s in train_seqs]
    if not train_seqs or not any(starts_per_seq):
        raise ValueError("training split too short for the configured sequence length")
    if not dataset.val:
        raise ValueError("dataset has no validation split")

    history: list[EpochStats] = []
    best_val = math.inf
    best_params = {n: a.copy() for n, a in params.items()}
    best_epoch = 0
    epochs_since_best = 0

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        p = _mode_p(config.mode, epoch, config)
        lstm, ro = _params_from_dict(params)

        loss_sum = 0.0
        loss_n = 0
        seq_ids = list(range(len(train_seqs)))
        states = {i: RnnState.zeros(config.d_h) for i in seq_ids}

        for b0 in range(0, len(seq_ids), config.batch_size):
            batch = seq_ids[b0:b0 + config.batch_size]
            n_windows = max(len(starts_per_seq[i]) for i in batch)
            for w in range(n_windows):
                grad_acc = {n: np.zeros_like(a) for n, a in params.items()}
                n_in_batch = 0
                for i in batch:
                    if w >= len(starts_per_seq[i]):
                        continue
                    s = starts_per_seq[i][w]
                    win = train_seqs[i][s:s + L + 1]
                    plan = plan_for(config.mode, p, win.shape[0] - 2, rng)
                    tape = Tape()
                    res = unroll((lstm, ro), win, plan, tape, init_state=states[i])
                    loss_val = float(res.loss.value)
                    if not math.isfinite(loss_val):
                        raise DivergenceError(epoch, config.mode, "training loss is NaN/Inf")
                    backward(tape, res.loss)
                    for n, g in res.model.grads().items():
                        grad_acc[n] += g
                    states[i] = res.final_state
                    loss_sum += loss_val
                    loss_n += 1
                    n_in_batch += 1
                for n in grad_acc:
                    grad_acc[n] /= n_in_batch
                try:
                    params = opt.step(params, grad_acc)
                except FloatingPointError as exc:
                    raise DivergenceError(epoch, config.mode, str(exc)) from exc
                lstm, ro = _params_from_dict(params)

        val = autoregressive_validation_loss(lstm, ro, dataset.val)
        if not math.isfinite(val):
            raise DivergenceError(epoch, config.mode, "validation loss is NaN/Inf")
        stats = EpochStats(
            epoch=epoch,
            p=p,
            train_loss=loss_sum / max(loss_n, 1),
            val_loss_p1=val,
            wall_time_s=time.perf_counter() - t0,
        )
        history.append(stats)
        if log is not None:
            log(stats)

        if val < best_val:
            best_val = val
            best_params = {n: a.copy() for n, a in params.items()}
            best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= config.patience:
                break

    lstm, ro = _params_from_dict(params)
    best_lstm, best_ro = _params_from_dict(best_params)
    return TrainResult(
        lstm=lstm,
        readout=ro,
        best_lstm=best_lstm,
        best_readout=best_ro,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        history=history,
    )


# -- run artifacts -------------------------------------------------------------


def write_history_csv(path: str, history: list[EpochStats], mode: Mode) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mode", "p", "train_loss", "val_loss_p1", "wall_time_s"])
        for st in history:
            w.writerow([
                st.epoch, mode.value, repr(st.p),
                repr(st.train_loss), repr(st.val_loss_p1), f"{st.wall_time_s:.3f}",
            ])


def write_run_manifest(path: str, config: TrainConfig, dataset_hash: str,
                       best_epoch: int, best_val_loss: float) -> None:
    doc = {
        "config": {
            "mode": config.mode.value,
            "epochs": config.epochs,
            "seq_len": config.seq_len,
            "lr": config.lr,
            "batch_size": config.batch_size,
            "d_h": config.d_h,
            "schedule_k": config.schedule_k,
            "patience": config.patience,
            "seed": config.seed,
        },
        "dataset_hash": dataset_hash,
        "best_epoch": best_epoch,
        "best_val_loss": best_val_loss,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
