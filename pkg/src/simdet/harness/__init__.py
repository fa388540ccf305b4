"""Experiment harness: training schemes, matrix runs and the command line."""

from simdet.harness.config import SCHEME_NAMES, SchemeConfig, parse_config_text, scheme_config
from simdet.harness.experiment import RunReport, pretrain_generic, run_matrix, run_scheme, segment_digest
from simdet.harness.training import detect, evaluate_detector, train_stage

__all__ = [
    "SCHEME_NAMES",
    "RunReport",
    "SchemeConfig",
    "detect",
    "evaluate_detector",
    "parse_config_text",
    "pretrain_generic",
    "run_matrix",
    "run_scheme",
    "scheme_config",
    "segment_digest",
    "train_stage",
]
