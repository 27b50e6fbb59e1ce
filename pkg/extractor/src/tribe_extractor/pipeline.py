"""Batch extraction: stimuli in, a validated feature datastore out.

One `StimulusJob` names the stimulus files behind one recording session.
`run_jobs` extracts every job (optionally in a thread pool; jobs share the
read-only backends and write disjoint files, so there is no cross-job
state), writes each modality as a flat tensor under ``features/``, and
assembles a manifest that is saved and then re-loaded through the datastore
loader, which re-validates every declared shape eagerly. Sessions are
written without BOLD targets; recorded responses are merged in by whatever
owns them.

All modalities of one session are cut to a common step count,
floor(min(stream durations) * frequency_hz), so a few hundred milliseconds
of trailing mismatch between recordings never leaks into the tensors.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from tribe import datastore, tensorio
from tribe.datastore import (
    BoldMeta,
    DatasetManifest,
    EmbeddingSeries,
    MODALITIES,
    SessionRecord,
)

from . import backends as backend_registry
from .audio import extract_audio
from .config import ExtractionConfig, ExtractorError
from .stimuli import load_frames, read_transcript, read_wav, transcript_end_s
from .text import extract_text
from .video import extract_video


@dataclass(frozen=True)
class StimulusJob:
    """Paths for one session's stimulus; absent modalities stay None."""

    session_id: str
    subject_id: str
    video_id: str
    split: str = "train"
    transcript: Path | None = None
    audio: Path | None = None
    video: Path | None = None
    num_trs: int | None = None  # default: floor(duration / tr_seconds)

    def modalities(self) -> tuple[str, ...]:
        present = {
            "text": self.transcript,
            "audio": self.audio,
            "video": self.video,
        }
        out = tuple(m for m in MODALITIES if present[m] is not None)
        if not out:
            raise ExtractorError(f"job {self.session_id}: no stimulus files given")
        return out


@dataclass
class StimulusFeatures:
    """One extracted session, still in memory."""

    features: dict[str, EmbeddingSeries]
    words: list  # TimedWordEmbedding per transcript word; empty without text
    num_steps: int
    duration_s: float
    diagnostics: list[dict] = field(default_factory=list)


def resolve_backends(config: ExtractionConfig, modalities: tuple[str, ...]) -> dict:
    factory = {
        "text": lambda: backend_registry.text_backend(config.text),
        "audio": lambda: backend_registry.audio_backend(config.audio),
        "video": lambda: backend_registry.video_backend(config.video),
    }
    return {m: factory[m]() for m in modalities}


def extract_stimulus(
    job: StimulusJob, config: ExtractionConfig, backends: dict | None = None
) -> StimulusFeatures:
    """Run every present modality for one job and cut to a shared length."""
    modalities = job.modalities()
    if backends is None:
        backends = resolve_backends(config, modalities)
    diagnostics: list[dict] = []

    words = read_transcript(job.transcript) if job.transcript else []
    waveform, sample_rate = (None, 0)
    if job.audio:
        waveform, sample_rate = read_wav(job.audio)
    frames = load_frames(job.video) if job.video else None

    stream_s = []
    if waveform is not None:
        stream_s.append(len(waveform) / sample_rate)
    if frames is not None:
        stream_s.append(frames.duration_s)
    if stream_s:
        duration_s = min(stream_s)
        num_steps = math.floor(duration_s * config.frequency_hz)
    else:
        # text-only: let the last word define the horizon
        duration_s = transcript_end_s(words)
        num_steps = max(1, math.ceil(duration_s * config.frequency_hz))
    if num_steps < 1:
        raise ExtractorError(f"job {job.session_id}: stimulus fills no output step")

    features: dict[str, EmbeddingSeries] = {}
    if "text" in modalities:
        result = extract_text(
            words,
            config,
            num_steps,
            backend=backends["text"],
            series_id=job.session_id,
            diagnostics=diagnostics,
        )
        features["text"] = result.series
        timed_words = result.words
    else:
        timed_words = []
    if "audio" in modalities:
        series = extract_audio(
            waveform,
            sample_rate,
            config,
            backend=backends["audio"],
            series_id=job.session_id,
            diagnostics=diagnostics,
        )
        if series.data.shape[0] < num_steps:
            raise ExtractorError(
                f"job {job.session_id}: audio yields {series.data.shape[0]} steps, "
                f"needs {num_steps}"
            )
        series.data = series.data[:num_steps]
        features["audio"] = series
    if "video" in modalities:
        features["video"] = extract_video(
            frames,
            config,
            num_steps=num_steps,
            backend=backends["video"],
            series_id=job.session_id,
            diagnostics=diagnostics,
        )

    return StimulusFeatures(
        features=features,
        words=timed_words,
        num_steps=num_steps,
        duration_s=duration_s,
        diagnostics=diagnostics,
    )


def write_features(
    out_root: Path, session_id: str, features: dict[str, EmbeddingSeries]
) -> dict[str, str]:
    """Write each modality under features/; returns manifest-relative paths."""
    rel_paths = {}
    for name, series in features.items():
        rel = f"features/{session_id}_{name}.f32"
        tensorio.write_tensor(out_root / rel, series.data)
        rel_paths[name] = rel
    return rel_paths


def run_jobs(
    jobs: list[StimulusJob],
    config: ExtractionConfig,
    out_root: Path | str,
    tr_seconds: float = 1.49,
    num_parcels: int = 1000,
    max_workers: int = 1,
) -> Path:
    """Extract every job, write tensors, save and re-validate the manifest.

    Returns the manifest path. BoldMeta records the TR grid and parcel count
    the features are destined for; the sessions themselves carry no BOLD.
    """
    if not jobs:
        raise ExtractorError("no jobs given")
    modalities = jobs[0].modalities()
    for job in jobs[1:]:
        if job.modalities() != modalities:
            raise ExtractorError(
                f"job {job.session_id}: modalities {job.modalities()} differ from "
                f"{modalities}; one datastore needs one modality set"
            )
    ids = [j.session_id for j in jobs]
    if len(set(ids)) != len(ids):
        raise ExtractorError("duplicate session ids across jobs")
    out_root = Path(out_root)
    backends = resolve_backends(config, modalities)

    def one(job: StimulusJob) -> tuple[SessionRecord, dict]:
        extracted = extract_stimulus(job, config, backends)
        rel_paths = write_features(out_root, job.session_id, extracted.features)
        num_trs = job.num_trs
        if num_trs is None:
            num_trs = math.floor(extracted.duration_s / tr_seconds)
        if num_trs < 1:
            raise ExtractorError(f"job {job.session_id}: stimulus spans no full TR")
        record = SessionRecord(
            session_id=job.session_id,
            subject_id=job.subject_id,
            video_id=job.video_id,
            split=job.split,
            feature_paths=rel_paths,
            bold_path=None,
            num_trs=num_trs,
            num_feature_steps=extracted.num_steps,
        )
        metas = {name: s.meta for name, s in extracted.features.items()}
        return record, metas

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(job) for job in jobs]

    records = [r for r, _ in results]
    metas = results[0][1]
    for record, other in results[1:]:
        if other != metas:
            raise ExtractorError(
                f"session {record.session_id}: modality metadata diverged"
            )
    manifest = DatasetManifest(
        modalities=[metas[m] for m in modalities],
        bold=BoldMeta(num_parcels=num_parcels, tr_seconds=tr_seconds),
        subjects=sorted({j.subject_id for j in jobs}),
        sessions=records,
    )
    path = datastore.save_manifest(manifest, out_root / "manifest.json")
    datastore.load_manifest(path)  # eager re-validation of every written file
    return path
