"""Streaming keyword-spotting engine.

Alignment-free training of causal temporal-convolution models on weakly
labeled audio, frame-synchronous streaming detection with bounded state,
int8 weight quantization, and false-alarm-rate evaluation, all behind one
CLI (``kwspot``) and a portable single-file model container.

The deployment surface is deliberately small: load a container, make a
stream, push samples, read detections.  Everything else lives in the
submodules.
"""

__version__ = "0.1.0"

from .container import load_model, save_model
from .detector import load_quantized, make_stream, push_audio, push_audio_int8, reset
from .evalkit import det_curve, frr_at_fah, score_manifest
from .features import FeatureConfig
from .models import BackboneConfig, build_model

__all__ = [
    "__version__",
    "BackboneConfig",
    "FeatureConfig",
    "build_model",
    "det_curve",
    "frr_at_fah",
    "load_model",
    "load_quantized",
    "make_stream",
    "push_audio",
    "push_audio_int8",
    "reset",
    "save_model",
    "score_manifest",
]
