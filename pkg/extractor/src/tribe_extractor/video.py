"""Frame-sequence embedding on the output grid.

Output step b stands for the half-open interval [b/f, (b+1)/f). For each
step the model sees frames_per_bin frames sampled uniformly from the span_s
seconds ending at the step's right edge: sample times are the midpoints of
a uniform subdivision of [t_end - span_s, t_end), mapped to frame indices by
flooring against the source frame rate. Sample times before the start of
the video clamp to frame 0, so early bins repeat the first frame.

A sampled frame that is absent from the source (sparse frame directories)
is replaced by the nearest present frame, earlier preferred on ties, and the
substitution is reported through `diagnostics`.
"""

from __future__ import annotations

import math

import numpy as np
from tribe.datastore import EmbeddingSeries, ModalityMeta

from . import backends as backend_registry
from .config import ExtractionConfig, ExtractorError
from .stimuli import FrameSource


def _nearest_present(source: FrameSource, index: int) -> int:
    for dist in range(1, source.num_frames + 1):
        if source.has(index - dist):
            return index - dist
        if source.has(index + dist):
            return index + dist
    raise ExtractorError("frame source has no frames present")


def bin_frame_indices(
    step: int, config: ExtractionConfig, fps: float, num_frames: int
) -> np.ndarray:
    """Frame indices feeding output step `step`, clamped to [0, num_frames)."""
    npb = config.video.frames_per_bin
    t_end = (step + 1) / config.frequency_hz
    offsets = (np.arange(npb) + 0.5) * (config.video.span_s / npb)
    times = t_end - config.video.span_s + offsets
    indices = np.floor(times * fps).astype(int)
    return np.clip(indices, 0, num_frames - 1)


def extract_video(
    source: FrameSource,
    config: ExtractionConfig,
    num_steps: int | None = None,
    backend=None,
    series_id: str = "",
    diagnostics: list | None = None,
) -> EmbeddingSeries:
    """Embed a frame sequence onto the output grid; returns [T, L, D]."""
    if backend is None:
        backend = backend_registry.video_backend(config.video)
    config.video.check_frame_rate(source.fps)
    if num_steps is None:
        num_steps = math.floor(source.duration_s * config.frequency_hz)
    if num_steps < 1:
        raise ExtractorError(
            f"{source.duration_s:.2f} s of video fills no output step"
        )

    substituted: dict[int, int] = {}
    out = np.empty((num_steps, backend.num_layers, backend.dim), dtype=np.float32)
    for step in range(num_steps):
        indices = bin_frame_indices(step, config, source.fps, source.num_frames)
        clip = []
        for idx in indices:
            idx = int(idx)
            if not source.has(idx):
                used = substituted.get(idx)
                if used is None:
                    used = _nearest_present(source, idx)
                    substituted[idx] = used
                    if diagnostics is not None:
                        diagnostics.append(
                            {"event": "missing_frame", "index": idx, "used": used}
                        )
                idx = used
            clip.append(source.frame(idx))
        out[step] = backend.embed_clip(np.stack(clip))

    out.setflags(write=False)
    meta = ModalityMeta(
        name="video",
        dim=backend.dim,
        num_layers=backend.num_layers,
        frequency_hz=config.frequency_hz,
    )
    return EmbeddingSeries(data=out, meta=meta, session_id=series_id)
