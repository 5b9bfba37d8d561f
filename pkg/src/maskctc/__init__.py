"""Mask-CTC style non-autoregressive recognition on a small torch core."""
from .ctc import ctc_log_prob, ctc_loss, greedy_decode
from .decoding import DecodeConfig, DecodeTrace, recognize
from .estimator import MaskCTCRecognizer
from .metrics import edit_distance, error_rate
from .model import MaskCTCModel, ModelConfig, Vocabulary, load_checkpoint, save_checkpoint
from .synthdata import SynthConfig, generate_corpus
from .training import TrainConfig, Trainer

__all__ = [
    "DecodeConfig",
    "DecodeTrace",
    "MaskCTCModel",
    "MaskCTCRecognizer",
    "ModelConfig",
    "SynthConfig",
    "TrainConfig",
    "Trainer",
    "Vocabulary",
    "ctc_log_prob",
    "ctc_loss",
    "edit_distance",
    "error_rate",
    "generate_corpus",
    "greedy_decode",
    "load_checkpoint",
    "recognize",
    "save_checkpoint",
]
