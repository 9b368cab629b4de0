"""Infant posture and movement classification from limb-worn inertial sensors."""

from .core import (
    CHANNELS,
    MOVEMENT,
    POSTURE,
    AnnotationSet,
    FrameIndex,
    Recording,
    Subject,
    load_dataset,
    parse_annotations,
    parse_recording,
    window_frames,
)
from .loso import RunConfig, ablate, loso_run

__version__ = "0.1.0"

__all__ = [
    "CHANNELS",
    "MOVEMENT",
    "POSTURE",
    "AnnotationSet",
    "FrameIndex",
    "Recording",
    "RunConfig",
    "Subject",
    "ablate",
    "load_dataset",
    "loso_run",
    "parse_annotations",
    "parse_recording",
    "window_frames",
]
