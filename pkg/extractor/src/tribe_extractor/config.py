"""Extraction configuration.

One frozen dataclass per modality model plus the shared output frequency.
Model ids starting with "toy" resolve to the deterministic reference
backends in `backends`; anything else is treated as a Hugging Face model id
and resolved lazily through `hf` (optional heavy dependencies).

Backends always emit every hidden layer (embedding output included); which
layers survive into training features is decided downstream by layer
grouping, not here.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path


class ExtractorError(ValueError):
    pass


@dataclass(frozen=True)
class TextModelConfig:
    model: str = "toy"
    context_words: int = 1024  # k preceding words kept when embedding a word

    def __post_init__(self):
        if self.context_words < 1:
            raise ExtractorError(f"context_words must be >= 1, got {self.context_words}")


@dataclass(frozen=True)
class AudioModelConfig:
    model: str = "toy"
    chunk_s: float = 60.0  # waveform is cut into chunks this long
    native_hz: float = 50.0  # model frame rate before resampling

    def __post_init__(self):
        if self.chunk_s <= 0:
            raise ExtractorError(f"chunk_s must be > 0, got {self.chunk_s}")
        if self.native_hz <= 0:
            raise ExtractorError(f"native_hz must be > 0, got {self.native_hz}")


@dataclass(frozen=True)
class VideoModelConfig:
    model: str = "toy"
    frames_per_bin: int = 64  # frames fed to the model per output step
    span_s: float = 4.0  # lookback window the frames are sampled from

    def __post_init__(self):
        if self.frames_per_bin < 1:
            raise ExtractorError(
                f"frames_per_bin must be >= 1, got {self.frames_per_bin}"
            )
        if self.span_s <= 0:
            raise ExtractorError(f"span_s must be > 0, got {self.span_s}")

    def check_frame_rate(self, fps: float) -> None:
        """A source must carry enough frames to fill one bin without reuse."""
        if self.span_s * fps < self.frames_per_bin:
            raise ExtractorError(
                f"source at {fps} fps yields {self.span_s * fps:.1f} frames per "
                f"{self.span_s} s span, fewer than frames_per_bin={self.frames_per_bin}"
            )


@dataclass(frozen=True)
class ExtractionConfig:
    text: TextModelConfig = field(default_factory=TextModelConfig)
    audio: AudioModelConfig = field(default_factory=AudioModelConfig)
    video: VideoModelConfig = field(default_factory=VideoModelConfig)
    frequency_hz: float = 2.0  # shared output grid for all modalities

    def __post_init__(self):
        if self.frequency_hz <= 0:
            raise ExtractorError(f"frequency_hz must be > 0, got {self.frequency_hz}")
        if self.audio.native_hz < self.frequency_hz:
            raise ExtractorError(
                f"cannot resample {self.audio.native_hz} Hz audio frames up to "
                f"{self.frequency_hz} Hz"
            )


def config_to_json(config: ExtractionConfig) -> dict:
    return asdict(config)


def config_from_json(doc: dict) -> ExtractionConfig:
    def sub(cls, key):
        return cls(**doc[key]) if key in doc else cls()

    known = {"text", "audio", "video", "frequency_hz"}
    extra = set(doc) - known
    if extra:
        raise ExtractorError(f"unknown config keys: {sorted(extra)}")
    return ExtractionConfig(
        text=sub(TextModelConfig, "text"),
        audio=sub(AudioModelConfig, "audio"),
        video=sub(VideoModelConfig, "video"),
        frequency_hz=float(doc.get("frequency_hz", 2.0)),
    )


def load_config(path: Path | str) -> ExtractionConfig:
    return config_from_json(json.loads(Path(path).read_text()))
