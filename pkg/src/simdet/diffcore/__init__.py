"""Reverse-mode autodiff and the segment-structured micro-detector."""

from simdet.diffcore.net import SEGMENT_NAMES, DetectorNet, NetConfig, backward, forward, set_frozen, sgd_step
from simdet.diffcore.tensor import Tensor
from simdet.diffcore.weights import load_weights, save_weights, transfer_weights

__all__ = [
    "SEGMENT_NAMES",
    "DetectorNet",
    "NetConfig",
    "Tensor",
    "backward",
    "forward",
    "load_weights",
    "save_weights",
    "set_frozen",
    "sgd_step",
    "transfer_weights",
]
