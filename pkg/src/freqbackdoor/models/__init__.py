from .adam import Adam
from .classifier import ARCHITECTURES, Classifier, ClassifierSpec, fresh_model, softmax
from .training import (
    ASRResult,
    TrainConfig,
    TrainHistory,
    TrainingDiverged,
    accuracy,
    evaluate_asr,
    evaluate_asr_fn,
    evaluate_ca,
    fit,
    injection_poison_fn,
    train,
)
from .checkpoint import load_model, save_model

__all__ = [
    "ARCHITECTURES", "ASRResult", "Adam", "Classifier", "ClassifierSpec", "TrainConfig", "TrainHistory",
    "TrainingDiverged", "accuracy", "evaluate_asr", "evaluate_asr_fn", "evaluate_ca", "fit", "fresh_model",
    "injection_poison_fn", "load_model", "save_model", "softmax", "train",
]
