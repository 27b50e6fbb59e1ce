"""Stimulus feature extraction into the tribe datastore format.

Turns raw stimuli (transcripts, waveforms, frame sequences) into per-layer
embedding time series on the shared 2 Hz grid, written as flat tensors plus
a validated manifest that the training side loads directly. Deterministic
toy backends cover every code path without model weights; Hugging Face
checkpoints plug in through the optional [hf] extra.
"""

from .audio import extract_audio
from .backends import (
    TokenSpan,
    ToyAudioBackend,
    ToyTextBackend,
    ToyVideoBackend,
    audio_backend,
    text_backend,
    video_backend,
)
from .config import (
    AudioModelConfig,
    ExtractionConfig,
    ExtractorError,
    TextModelConfig,
    VideoModelConfig,
    config_from_json,
    config_to_json,
    load_config,
)
from .pipeline import (
    StimulusFeatures,
    StimulusJob,
    extract_stimulus,
    resolve_backends,
    run_jobs,
    write_features,
)
from .stimuli import (
    ArrayFrames,
    FrameDir,
    FrameSource,
    WordEvent,
    load_frames,
    read_transcript,
    read_wav,
    transcript_end_s,
)
from .text import TextExtraction, context_window, embed_word, extract_text
from .video import bin_frame_indices, extract_video

__version__ = "0.1.0"

__all__ = [
    "ArrayFrames",
    "AudioModelConfig",
    "ExtractionConfig",
    "ExtractorError",
    "FrameDir",
    "FrameSource",
    "StimulusFeatures",
    "StimulusJob",
    "TextExtraction",
    "TextModelConfig",
    "TokenSpan",
    "ToyAudioBackend",
    "ToyTextBackend",
    "ToyVideoBackend",
    "VideoModelConfig",
    "WordEvent",
    "audio_backend",
    "bin_frame_indices",
    "config_from_json",
    "config_to_json",
    "context_window",
    "embed_word",
    "extract_audio",
    "extract_stimulus",
    "extract_text",
    "extract_video",
    "load_config",
    "load_frames",
    "read_transcript",
    "read_wav",
    "resolve_backends",
    "run_jobs",
    "text_backend",
    "transcript_end_s",
    "video_backend",
    "write_features",
]
