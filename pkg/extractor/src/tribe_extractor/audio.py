"""Waveform embedding: fixed-length chunks, then block-mean resampling.

The waveform is cut into chunk_s-second pieces (the last one shorter), each
chunk gets its own forward pass, the native-rate frame features are
concatenated back together and block-mean resampled down to the output
grid with the same semantics the training-side alignment uses. Full chunks
contribute exactly chunk_s * native_hz frames, so the concatenation is
seamless and the final series has floor(total_s * frequency_hz) steps.

A chunk shorter than the model's minimum input is zero-padded up to that
minimum for the forward pass; only the frames covering real samples are
kept, and the padding is reported through `diagnostics`.
"""

from __future__ import annotations

import math

import numpy as np
from tribe import alignment
from tribe.datastore import EmbeddingSeries, ModalityMeta

from . import backends as backend_registry
from .config import ExtractionConfig, ExtractorError


def _true_frames(num_samples: int, native_hz: float, sample_rate: int) -> int:
    if float(native_hz).is_integer():
        return num_samples * int(native_hz) // sample_rate
    return math.floor(num_samples * native_hz / sample_rate)


def extract_audio(
    waveform: np.ndarray,
    sample_rate: int,
    config: ExtractionConfig,
    backend=None,
    series_id: str = "",
    diagnostics: list | None = None,
) -> EmbeddingSeries:
    """Embed a mono waveform onto the output grid; returns [T, L, D]."""
    waveform = np.asarray(waveform)
    if waveform.ndim != 1:
        raise ExtractorError(f"expected mono waveform, got shape {waveform.shape}")
    if sample_rate <= 0:
        raise ExtractorError(f"bad sample rate {sample_rate}")
    if backend is None:
        backend = backend_registry.audio_backend(config.audio)
    native = backend.native_hz
    if native != config.audio.native_hz:
        raise ExtractorError(
            f"backend emits {native} Hz frames but config declares "
            f"{config.audio.native_hz} Hz"
        )

    chunk_samples = round(config.audio.chunk_s * sample_rate)
    min_samples = math.ceil(backend.min_input_s * sample_rate)
    pieces: list[np.ndarray] = []
    for index, lo in enumerate(range(0, len(waveform), chunk_samples)):
        chunk = waveform[lo : lo + chunk_samples]
        keep = _true_frames(len(chunk), native, sample_rate)
        if len(chunk) < min_samples:
            if diagnostics is not None:
                diagnostics.append(
                    {
                        "event": "padded_chunk",
                        "chunk": index,
                        "seconds": len(chunk) / sample_rate,
                        "padded_to_s": backend.min_input_s,
                    }
                )
            chunk = np.concatenate(
                [chunk, np.zeros(min_samples - len(chunk), dtype=waveform.dtype)]
            )
        frames = backend.frame_features(chunk, sample_rate)
        pieces.append(frames[:keep])
    if not pieces or sum(p.shape[0] for p in pieces) < 1:
        raise ExtractorError("waveform too short to fill a single frame")

    stacked = np.concatenate(pieces, axis=0)  # [T_native, L, D]
    resampled = alignment.resample_audio(stacked, native, config.frequency_hz)
    data = np.ascontiguousarray(resampled, dtype=np.float32)
    data.setflags(write=False)
    meta = ModalityMeta(
        name="audio",
        dim=backend.dim,
        num_layers=backend.num_layers,
        frequency_hz=config.frequency_hz,
    )
    return EmbeddingSeries(data=data, meta=meta, session_id=series_id)
