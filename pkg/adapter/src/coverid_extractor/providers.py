"""Feature and text providers behind small protocols.

The stub providers are deterministic functions of their inputs and emit the
same shapes as the real models (1500x1280 frame features, 768-dim text
vectors), so the export machinery can be exercised without model weights.
The real providers import their heavyweight dependencies lazily and are
constructed only when a model identifier other than "stub" is given.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

DEFAULT_SPEECH_MODEL = "openai/whisper-large-v3-turbo"
DEFAULT_TEXT_MODEL = "Alibaba-NLP/gte-multilingual-base"

SPEECH_SAMPLE_RATE = 16_000
SEGMENT_FRAMES = 1500
SEGMENT_FEATURE_DIM = 1280
TEXT_DIM = 768


class ProviderError(Exception):
    """A provider could not be constructed or could not process an input."""


@runtime_checkable
class FeatureProvider(Protocol):
    n_frames: int
    dim: int

    def segment_features(self, audio_path: Path, start_s: float, end_s: float) -> np.ndarray:
        """Return a float32 (n_frames, dim) matrix for one audio span."""
        ...


@runtime_checkable
class TextProvider(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray:
        """Return a float32 (dim,) vector for one text."""
        ...


def _seed_from(*parts: object) -> int:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


class StubFeatureProvider:
    """Deterministic pseudo-features keyed on (file name, span)."""

    def __init__(self, n_frames: int = SEGMENT_FRAMES, dim: int = SEGMENT_FEATURE_DIM):
        if n_frames <= 0 or dim <= 0:
            raise ValueError("stub feature shape must be positive")
        self.n_frames = n_frames
        self.dim = dim

    def segment_features(self, audio_path: Path, start_s: float, end_s: float) -> np.ndarray:
        rng = np.random.default_rng(_seed_from(Path(audio_path).name, start_s, end_s))
        return rng.standard_normal((self.n_frames, self.dim), dtype=np.float32)


class StubTextProvider:
    """Deterministic unit vector keyed on the text content."""

    def __init__(self, dim: int = TEXT_DIM):
        if dim <= 0:
            raise ValueError("stub text dim must be positive")
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        rng = np.random.default_rng(_seed_from("text", text))
        v = rng.standard_normal(self.dim, dtype=np.float32)
        return v / np.linalg.norm(v)


class SpeechEncoderFeatures:
    """Final-layer encoder states of a speech recognition model.

    Audio is decoded, resampled to 16 kHz mono, and padded or truncated to
    the model's fixed 30 s receptive window, which yields a constant
    (1500, 1280) output for the default model.
    """

    n_frames = SEGMENT_FRAMES
    dim = SEGMENT_FEATURE_DIM

    def __init__(self, model_id: str = DEFAULT_SPEECH_MODEL, device: str = "cpu"):
        try:
            import torch
            from transformers import WhisperModel, WhisperProcessor
        except ImportError as exc:
            raise ProviderError(f"speech model dependencies unavailable: {exc}") from exc
        try:
            self._processor = WhisperProcessor.from_pretrained(model_id)
            self._encoder = WhisperModel.from_pretrained(model_id).encoder.to(device).eval()
        except Exception as exc:
            raise ProviderError(f"could not load speech model {model_id!r}: {exc}") from exc
        self._torch = torch
        self._device = device

    def _load_audio(self, audio_path: Path, start_s: float, end_s: float) -> np.ndarray:
        try:
            import soundfile as sf
        except ImportError as exc:
            raise ProviderError(f"audio decoding dependencies unavailable: {exc}") from exc
        try:
            wave, rate = sf.read(str(audio_path), dtype="float32", always_2d=True)
        except Exception as exc:
            raise ProviderError(f"could not decode {audio_path}: {exc}") from exc
        mono = wave.mean(axis=1)
        lo = max(0, int(round(start_s * rate)))
        hi = min(len(mono), int(round(end_s * rate)))
        clip = mono[lo:hi]
        if rate != SPEECH_SAMPLE_RATE:
            from scipy.signal import resample_poly
            from math import gcd
            g = gcd(int(rate), SPEECH_SAMPLE_RATE)
            clip = resample_poly(clip, SPEECH_SAMPLE_RATE // g, int(rate) // g)
        return np.asarray(clip, dtype=np.float32)

    def segment_features(self, audio_path: Path, start_s: float, end_s: float) -> np.ndarray:
        clip = self._load_audio(audio_path, start_s, end_s)
        inputs = self._processor(clip, sampling_rate=SPEECH_SAMPLE_RATE,
                                 return_tensors="pt")
        with self._torch.no_grad():
            states = self._encoder(inputs.input_features.to(self._device)).last_hidden_state
        return states.squeeze(0).cpu().numpy().astype(np.float32)


class SentenceEmbedding:
    """CLS-pooled, L2-normalized sentence vector from a text-embedding model."""

    dim = TEXT_DIM

    def __init__(self, model_id: str = DEFAULT_TEXT_MODEL, device: str = "cpu"):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise ProviderError(f"text model dependencies unavailable: {exc}") from exc
        try:
            self._tokenizer = AutoTokenizer.from_pretrained(model_id)
            self._model = AutoModel.from_pretrained(
                model_id, trust_remote_code=True).to(device).eval()
        except Exception as exc:
            raise ProviderError(f"could not load text model {model_id!r}: {exc}") from exc
        self._torch = torch
        self._device = device

    def embed(self, text: str) -> np.ndarray:
        if not text.strip():
            raise ProviderError("cannot embed empty text")
        tokens = self._tokenizer(text, truncation=True, max_length=512,
                                 return_tensors="pt").to(self._device)
        with self._torch.no_grad():
            hidden = self._model(**tokens).last_hidden_state
        v = hidden[0, 0].cpu().numpy().astype(np.float32)
        return v / np.linalg.norm(v)


def load_feature_provider(spec: str) -> FeatureProvider:
    """"stub" gives the deterministic stub; anything else is a model id."""
    if spec == "stub":
        return StubFeatureProvider()
    return SpeechEncoderFeatures(spec)


def load_text_provider(spec: str) -> TextProvider:
    if spec == "stub":
        return StubTextProvider()
    return SentenceEmbedding(spec)
