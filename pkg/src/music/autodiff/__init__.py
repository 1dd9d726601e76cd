"""Reverse-mode tape and second-order network jets."""

from .composite import ChannelTape, network_jets, params_token, residual_param_grad
from .jets import ACTIVATIONS, Jet2, JetGrads, NetJets, activation_derivs, jet_eval
from .tape import (
    PRIMITIVES,
    ContractError,
    StaleTapeError,
    Tape,
    UnsupportedPrimitiveError,
    Var,
    backward,
    record,
)

__all__ = [
    "ACTIVATIONS",
    "PRIMITIVES",
    "ChannelTape",
    "ContractError",
    "Jet2",
    "JetGrads",
    "NetJets",
    "StaleTapeError",
    "Tape",
    "UnsupportedPrimitiveError",
    "Var",
    "activation_derivs",
    "backward",
    "jet_eval",
    "network_jets",
    "params_token",
    "record",
    "residual_param_grad",
]
