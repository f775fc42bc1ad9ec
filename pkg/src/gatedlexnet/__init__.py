"""Paragraph-level handwriting recognizer with gated convolutions, vertical
attention line segmentation, CTC training and lexicon-constrained decoding,
written in numpy with hand-derived gradients."""

from .model import GatedLexiconNet, LossTerms, ModelConfig
from .numerics import NumericalInstabilityError, no_grad, precision, set_precision

__version__ = "0.1.0"

__all__ = [
    "GatedLexiconNet",
    "LossTerms",
    "ModelConfig",
    "NumericalInstabilityError",
    "no_grad",
    "precision",
    "set_precision",
]
