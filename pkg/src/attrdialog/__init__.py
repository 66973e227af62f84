"""Attribute-conditional hierarchical dialog generation at desk scale."""

__version__ = "0.1.0"

from .corpus import (
    AttributeFamily,
    AttributeSchema,
    Dialog,
    DullSet,
    Utterance,
    Vocabulary,
    build_vocab,
    load_corpus,
    load_dull_set,
    save_corpus,
    synthesize_corpus,
)
from .model import Batch, ConditioningVector, ContextState, DialogModel, ModelConfig
from .training import (
    Checkpoint,
    TrainHyper,
    load_checkpoint,
    make_batches,
    model_from_checkpoint,
    save_checkpoint,
    train_mle,
)

__all__ = [
    "AttributeFamily",
    "AttributeSchema",
    "Batch",
    "Checkpoint",
    "ConditioningVector",
    "ContextState",
    "Dialog",
    "DialogModel",
    "DullSet",
    "ModelConfig",
    "TrainHyper",
    "Utterance",
    "Vocabulary",
    "build_vocab",
    "load_checkpoint",
    "load_corpus",
    "load_dull_set",
    "make_batches",
    "model_from_checkpoint",
    "save_checkpoint",
    "save_corpus",
    "synthesize_corpus",
    "train_mle",
]
