"""Single-layer LSTM forecaster with a bias-free linear readout.

The recurrent map takes the concatenated ``[x; h]`` vector through four
gates; the readout is a plain matrix-vector product ``o = W h`` mapping the
hidden state back to observation space.  Both exist in two forms: composed
from autodiff primitives (training, gradients flow) and as plain numpy
(inference/validation, no tape overhead).

Gate ordering is fixed as (input, forget, cell-candidate, output) and the
concatenation order is input-then-hidden, so a given seed reproduces the
same model everywhere.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass

import numpy as np

from seqcast.autodiff import NodeRef, ShapeError, Tape

GATE_NAMES = ("wi", "wf", "wg", "wo", "bi", "bf", "bg", "bo")


@dataclass
class LstmParams:
    """Gate weight matrices, each (d_h, d_x + d_h), and bias vectors (d_h,)."""

    wi: np.ndarray
    wf: np.ndarray
    wg: np.ndarray
    wo: np.ndarray
    bi: np.ndarray
    bf: np.ndarray
    bg: np.ndarray
    bo: np.ndarray

    @property
    def d_h(self) -> int:
        return self.wi.shape[0]

    @property
    def d_x(self) -> int:
        return self.wi.shape[1] - self.wi.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in GATE_NAMES}


@dataclass
class ReadoutParams:
    """Hidden-to-output matrix, shape (d_x, d_h). No bias."""

    w: np.ndarray


@dataclass
class RnnState:
    """Hidden and cell vectors carried between steps/windows (plain numpy)."""

    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, d_h: int) -> "RnnState":
        return cls(np.zeros(d_h), np.zeros(d_h))


def init_params(seed: int, d_x: int, d_h: int) -> tuple[LstmParams, ReadoutParams]:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases."""
    if d_x < 1 or d_h < 1:
        raise ValueError("d_x and d_h must be >= 1")
    rng = np.random.default_rng(seed)
    fan = d_x + d_h
    bound = 1.0 / np.sqrt(fan)

    def w():
        return rng.uniform(-bound, bound, size=(d_h, fan))

    lstm = LstmParams(
        wi=w(), wf=w(), wg=w(), wo=w(),
        bi=np.zeros(d_h), bf=np.zeros(d_h), bg=np.zeros(d_h), bo=np.zeros(d_h),
    )
    ro_bound = 1.0 / np.sqrt(d_h)
    readout = ReadoutParams(w=rng.uniform(-ro_bound, ro_bound, size=(d_x, d_h)))
    return lstm, readout


class TapedModel:
    """Parameters bound as leaf nodes on one tape, plus the graph builders.

    Create one per tape; after backward() the per-parameter gradients are
    read through :meth:`grads`.
    """

    def __init__(self, tape: Tape, lstm: LstmParams, readout: ReadoutParams):
        self.tape = tape
        self.lstm = lstm
        self.readout = readout
        self.refs: dict[str, NodeRef] = {n: tape.leaf(a) for n, a in lstm.arrays().items()}
        self.refs["readout_w"] = tape.leaf(readout.w)

    def lstm_step(self, x: NodeRef, h: NodeRef, c: NodeRef) -> tuple[NodeRef, NodeRef]:
        """One LSTM cell update; returns (h', c') refs on the tape."""
        t, r = self.tape, self.refs
        if x.shape != (self.lstm.d_x,):
            raise ShapeError(f"lstm_step: expected input shape ({self.lstm.d_x},), got {x.shape}")
        z = t.concat(x, h)
        i_g = t.sigmoid(t.add(t.matmul(r["wi"], z), r["bi"]))
        f_g = t.sigmoid(t.add(t.matmul(r["wf"], z), r["bf"]))
        g_c = t.tanh(t.add(t.matmul(r["wg"], z), r["bg"]))
        o_g = t.sigmoid(t.add(t.matmul(r["wo"], z), r["bo"]))
        c2 = t.add(t.hadamard(f_g, c), t.hadamard(i_g, g_c))
        h2 = t.hadamard(o_g, t.tanh(c2))
        return h2, c2

    def readout_op(self, h: NodeRef) -> NodeRef:
        if h.shape != (self.lstm.d_h,):
            raise ShapeError(f"readout: expected hidden shape ({self.lstm.d_h},), got {h.shape}")
        return self.tape.matmul(self.refs["readout_w"], h)

    def grads(self) -> dict[str, np.ndarray]:
        """Per-parameter adjoints after backward(); zeros where unreached."""
        return {name: self.tape.grad(ref) for name, ref in self.refs.items()}


def lstm_step(x, state, params: LstmParams, tape: Tape, model: TapedModel | None = None):
    """Convenience one-shot taped step from numpy inputs; returns (state', h_ref).

    For multi-step unrolls build one :class:`TapedModel` and reuse it, so the
    parameters appear once on the tape.
    """
    if model is None:
        model = TapedModel(tape, params, ReadoutParams(np.zeros((params.d_x, params.d_h))))
    x_ref = tape.leaf(x)
    h_ref = tape.leaf(state.h)
    c_ref = tape.leaf(state.c)
    h2, c2 = model.lstm_step(x_ref, h_ref, c_ref)
    return RnnState(h2.value.copy(), c2.value.copy()), h2


def readout(h: NodeRef, params: ReadoutParams, tape: Tape) -> NodeRef:
    """o = W h, attached to the tape (gradient flows into both W and h)."""
    w_ref = tape.leaf(params.w)
    if h.shape != (params.w.shape[1],):
        raise ShapeError(f"readout: expected hidden shape ({params.w.shape[1]},), got {h.shape}")
    return tape.matmul(w_ref, h)


# -- plain-numpy forward (inference path, no gradients) ----------------------


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def lstm_step_np(x: np.ndarray, state: RnnState, p: LstmParams) -> RnnState:
    z = np.concatenate([x, state.h])
    i_g = _sigmoid_np(p.wi @ z + p.bi)
    f_g = _sigmoid_np(p.wf @ z + p.bf)
    g_c = np.tanh(p.wg @ z + p.bg)
    o_g = _sigmoid_np(p.wo @ z + p.bo)
    c2 = f_g * state.c + i_g * g_c
    return RnnState(o_g * np.tanh(c2), c2)


def readout_np(h: np.ndarray, ro: ReadoutParams) -> np.ndarray:
    return ro.w @ h


# -- checkpoint serialization -------------------------------------------------
#
# Format: a single JSON document.  Every array is stored as
# {"shape": [...], "dtype": "<f8", "data": base64(raw little-endian bytes)},
# which round-trips doubles bit-exactly.


def _encode(arr: np.ndarray) -> dict:
    le = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "shape": list(arr.shape),
        "dtype": "<f8",
        "data": base64.b64encode(le.tobytes()).decode("ascii"),
    }


def _decode(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(doc["shape"]).astype(np.float64)


def save_checkpoint(path: str, lstm: LstmParams, readout_p: ReadoutParams,
                    meta: dict | None = None) -> None:
    doc = {
        "format": "seqcast-checkpoint-v1",
        "meta": meta or {},
        "arrays": {n: _encode(a) for n, a in lstm.arrays().items()},
    }
    doc["arrays"]["readout_w"] = _encode(readout_p.w)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[LstmParams, ReadoutParams, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "seqcast-checkpoint-v1":
        raise ValueError(f"{path}: not a seqcast checkpoint")
    arrs = {n: _decode(d) for n, d in doc["arrays"].items()}
    lstm = LstmParams(**{n: arrs[n] for n in GATE_NAMES})
    return lstm, ReadoutParams(w=arrs["readout_w"]), doc.get("meta", {})
