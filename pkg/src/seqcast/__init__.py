"""Sequence-forecasting training engine.

Contrasts four ways of unrolling an LSTM forecaster during training:
teacher forcing, fully autoregressive, scheduled sampling with detached
feedback, and scheduled autoregressive with gradients flowing through
fed-back predictions.
"""

from seqcast.autodiff import Tape, NodeRef, backward, detach, finite_difference_grad
from seqcast.lstm import LstmParams, ReadoutParams, RnnState, init_params
from seqcast.training import Mode, TrainConfig, UnrollPlan, train, unroll

__all__ = [
    "Tape",
    "NodeRef",
    "backward",
    "detach",
    "finite_difference_grad",
    "LstmParams",
    "ReadoutParams",
    "RnnState",
    "init_params",
    "Mode",
    "TrainConfig",
    "UnrollPlan",
    "train",
    "unroll",
]
