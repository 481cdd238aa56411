"""Bridge from real audio and lyrics to the coverid interchange format."""

from .export import AudioTrack, ExportError, ExportJob, ExportResult, export_features
from .providers import (
    DEFAULT_SPEECH_MODEL, DEFAULT_TEXT_MODEL, FeatureProvider, ProviderError,
    SentenceEmbedding, SpeechEncoderFeatures, StubFeatureProvider,
    StubTextProvider, TextProvider, load_feature_provider, load_text_provider,
)

__all__ = [
    "AudioTrack", "ExportError", "ExportJob", "ExportResult", "export_features",
    "DEFAULT_SPEECH_MODEL", "DEFAULT_TEXT_MODEL", "FeatureProvider",
    "ProviderError", "SentenceEmbedding", "SpeechEncoderFeatures",
    "StubFeatureProvider", "StubTextProvider", "TextProvider",
    "load_feature_provider", "load_text_provider",
]
