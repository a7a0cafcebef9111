"""Two-stage grounded video question answering on synthetic scenes.

Stage 1 answers the question, the answer is appended to the question as
"{question} Track the {answer}", and stage 2 localizes the object with one box
per frame. Results are scored with HOTA.
"""

from .ema import EMAState, ema_extract, ema_init, ema_update
from .hota import HOTAReport, TrackSet, compute_hota, match_frame
from .prompt import Prompt, compose
from .tubelet import BoundingBox, QASample, SamplingConfig, Tubelet, VideoMeta, expand_predictions, iou, sample_frame_indices

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "EMAState",
    "HOTAReport",
    "Prompt",
    "QASample",
    "SamplingConfig",
    "TrackSet",
    "Tubelet",
    "VideoMeta",
    "compose",
    "compute_hota",
    "ema_extract",
    "ema_init",
    "ema_update",
    "expand_predictions",
    "iou",
    "match_frame",
    "sample_frame_indices",
]
