"""wearformer: CNN-transformer classification of minute-level wearable
sensor streams, with a built-in synthetic cohort generator, handcrafted
feature baselines, temporal evaluation, and a pretrain/finetune pipeline."""

__version__ = "0.1.0"

from . import autodiff, baselines, data, evaluation, features, model, synth, training

__all__ = [
    "autodiff", "baselines", "data", "evaluation", "features", "model",
    "synth", "training", "__version__",
]
