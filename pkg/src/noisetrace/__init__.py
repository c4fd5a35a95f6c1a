"""Synthetic speech detection on a track's full signal, its speech component
and its background-noise component."""

__version__ = "0.1.0"

from .audio import AudioClip, CropMode, Segment, load_audio, make_rng, peak_normalize, save_audio, segment_clip
from .detector import ComponentKind, DetectorConfig, SincLayerConfig, init_model, load_model, save_model
from .separation import ExternalSeparatorAdapter, SeparationResult, SeparatorConfig, external_separate, separate

__all__ = [
    "AudioClip", "CropMode", "Segment", "load_audio", "make_rng", "peak_normalize", "save_audio", "segment_clip",
    "ComponentKind", "DetectorConfig", "SincLayerConfig", "init_model", "load_model", "save_model",
    "ExternalSeparatorAdapter", "SeparationResult", "SeparatorConfig", "external_separate", "separate",
]
