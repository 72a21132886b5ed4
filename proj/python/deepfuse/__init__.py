"""Python bindings for the deepfuse hybrid deepfake frame classifier."""

import json

from ._deepfuse import (
    DECISION_THRESHOLD,
    CheckpointError,
    ConfigError,
    DataError,
    DimensionError,
    Model,
    TrainingError,
    UsageError,
    _augment,
    aggregate_video,
    decide,
    decode_image,
    early_stop_check,
    presets,
    write_png,
)

__all__ = [
    "DECISION_THRESHOLD",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "DimensionError",
    "Model",
    "TrainingError",
    "UsageError",
    "aggregate_video",
    "augment",
    "config",
    "decide",
    "decode_image",
    "early_stop_check",
    "predict_video",
    "presets",
    "write_png",
]


def config(model):
    """Architecture config of `model` as a dict."""
    return json.loads(model._config_json())


def augment(image, mode="random_cutout", seed=0, landmarks=None, size=None):
    """Runs the training augmentation on an HxWx3 uint8 frame.

    Returns (augmented image, plan dict). face_cutout needs 81 (x, y) landmarks.
    """
    out, plan = _augment(image, mode, seed, landmarks, size)
    return out, json.loads(plan)


def predict_video(model, frames):
    """Video score (mean frame probability) and its label."""
    probs = model.score_frames(frames)
    score = aggregate_video(probs)
    return score, decide(score)
