"""Self-contained gradient verification suite at small dimensions.

Checks, for each training mode, that tape gradients match central finite
differences; that the scheduled gradient collapses to the teacher-forced /
autoregressive gradients at the mask extremes; and that the closed-form
recurrence identity holds.  Used by the ``gradcheck`` CLI subcommand and by
the acceptance tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from seqcast import autodiff
from seqcast.autodiff import Tape, backward, finite_difference_grad
from seqcast.lstm import LstmParams, ReadoutParams, init_params
from seqcast.training import (
    Mode,
    UnrollPlan,
    lemma_recurrence,
    lemma_unrolled,
    plan_for,
    unroll,
)

PARAM_NAMES = ("wi", "wf", "wg", "wo", "bi", "bf", "bg", "bo", "readout_w")


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def flatten_params(lstm: LstmParams, ro: ReadoutParams) -> np.ndarray:
    arrs = lstm.arrays()
    arrs["readout_w"] = ro.w
    return np.concatenate([arrs[n].reshape(-1) for n in PARAM_NAMES])


def unflatten_params(flat: np.ndarray, d_x: int, d_h: int) -> tuple[LstmParams, ReadoutParams]:
    shapes = {n: (d_h, d_x + d_h) for n in ("wi", "wf", "wg", "wo")}
    shapes.update({n: (d_h,) for n in ("bi", "bf", "bg", "bo")})
    shapes["readout_w"] = (d_x, d_h)
    out = {}
    off = 0
    for n in PARAM_NAMES:
        size = int(np.prod(shapes[n]))
        out[n] = flat[off:off + size].reshape(shapes[n])
        off += size
    lstm = LstmParams(**{n: out[n] for n in PARAM_NAMES[:-1]})
    return lstm, ReadoutParams(w=out["readout_w"])


def unroll_loss_grad(lstm, ro, sequence, plan) -> tuple[float, np.ndarray]:
    """Loss value and flat analytic gradient of one window unroll."""
    tape = Tape()
    res = unroll((lstm, ro), sequence, plan, tape)
    backward(tape, res.loss)
    grads = res.model.grads()
    flat = np.concatenate([grads[n].reshape(-1) for n in PARAM_NAMES])
    return float(res.loss.value), flat


def gradient_vs_fd(lstm, ro, sequence, plan, eps=1e-5) -> float:
    """Relative error between analytic and finite-difference gradients.

    Error measured as the max over coordinates of |a - f| relative to the
    combined gradient norm, which is robust to near-zero components.
    """
    d_x, d_h = lstm.d_x, lstm.d_h
    _, analytic = unroll_loss_grad(lstm, ro, sequence, plan)

    # a detached graph differentiates with its fed-back values held constant,
    # so the FD oracle must freeze them at their base-parameter predictions
    frozen = None
    if not plan.attached and plan.mask.any():
        tape = Tape()
        base = unroll((lstm, ro), sequence, plan, tape)
        frozen = [o.value.copy() for o in base.outputs]

    def f(flat):
        l2, r2 = unflatten_params(flat, d_x, d_h)
        tape = Tape()
        res = unroll((l2, r2), sequence, plan, tape, frozen_feedback=frozen)
        return float(res.loss.value)

    fd = finite_difference_grad(f, flatten_params(lstm, ro), eps)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(fd), 1e-12)
    return float(np.max(np.abs(analytic - fd)) / scale)


def run_all(corrupt_op: str | None = None, seed: int = 0) -> list[CheckResult]:
    """Run the verification suite; optional fault injection on one op kind."""
    autodiff._ADJOINT_FAULT = corrupt_op
    try:
        return _run_all(seed)
    finally:
        autodiff._ADJOINT_FAULT = None


def _run_all(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    d_x, d_h, L = 2, 4, 6

    # per-mode finite-difference agreement
    for mode in Mode:
        lstm, ro = init_params(int(rng.integers(1, 1 << 30)), d_x, d_h)
        seq = rng.uniform(0.0, 1.0, size=(L + 1, d_x))
        plan = plan_for(mode, 0.5, L - 1, rng)
        err = gradient_vs_fd(lstm, ro, seq, plan)
        results.append(CheckResult(f"fd-{mode.value}", err, 1e-6))

    # mask-extreme identities: scheduled with all-zero mask == teacher forcing,
    # all-one mask == fully autoregressive
    worst_tf, worst_ar = 0.0, 0.0
    for _ in range(5):
        lstm, ro = init_params(int(rng.integers(1, 1 << 30)), d_x, d_h)
        seq = rng.uniform(0.0, 1.0, size=(L + 1, d_x))
        zeros = UnrollPlan(np.zeros(L - 1, dtype=int), attached=True)
        ones = UnrollPlan(np.ones(L - 1, dtype=int), attached=True)
        _, g_tf = unroll_loss_grad(lstm, ro, seq, UnrollPlan(np.zeros(L - 1, dtype=int), attached=False))
        _, g_sa0 = unroll_loss_grad(lstm, ro, seq, zeros)
        _, g_ar = unroll_loss_grad(lstm, ro, seq, ones)
        _, g_sa1 = unroll_loss_grad(lstm, ro, seq, ones)
        worst_tf = max(worst_tf, float(np.max(np.abs(g_sa0 - g_tf))))
        worst_ar = max(worst_ar, float(np.max(np.abs(g_sa1 - g_ar))))
    results.append(CheckResult("identity-p0-vs-tf", worst_tf, 1e-12))
    results.append(CheckResult("identity-p1-vs-ar", worst_ar, 1e-12))

    # closed-form vs recurrence
    worst = 0.0
    for _ in range(20):
        T = int(rng.integers(1, 15))
        b = rng.standard_normal(T)
        c = rng.standard_normal(T)
        worst = max(worst, abs(lemma_unrolled(b, c) - lemma_recurrence(b, c)))
    results.append(CheckResult("recurrence-closed-form", worst, 1e-12))
    return results
