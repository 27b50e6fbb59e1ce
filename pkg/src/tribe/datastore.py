"""On-disk dataset: manifests, cached embedding/BOLD tensors, splits.

A dataset directory holds one ``manifest.json`` plus one ``.f32``/``.meta.json``
pair per (session, modality) feature series and per session BOLD matrix.
The manifest is the single source of truth for shapes; ``load_manifest``
validates every declared file eagerly (existence and byte counts, not
contents) so downstream code can trust the index.

Conventions baked in here:

- feature series are float32 tensors ``[num_feature_steps, num_layers, dim]``
  on a fixed-frequency grid shared by all modalities;
- BOLD series are ``[num_trs, num_parcels]`` and are z-scored per parcel per
  session at load time (population std; constant columns become zeros with a
  warning rather than NaN);
- splits are assigned per *video*, never per session, so a held-out video is
  held out for every subject. Validation sessions are z-scored with their own
  statistics, not statistics carried over from training sessions.

Loaded arrays are marked read-only and safe to share across threads.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensorio

MODALITIES = ("text", "audio", "video")
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    """Raised when a manifest violates an invariant; names the offender."""


@dataclass(frozen=True)
class ModalityMeta:
    """Shape metadata for one modality's cached embedding series."""

    name: str
    dim: int
    num_layers: int
    frequency_hz: float

    def __post_init__(self):
        if self.name not in MODALITIES:
            raise ManifestError(f"unknown modality {self.name!r}")
        if self.dim <= 0 or self.num_layers <= 0:
            raise ManifestError(f"modality {self.name}: dim and num_layers must be > 0")
        if self.frequency_hz <= 0:
            raise ManifestError(f"modality {self.name}: frequency_hz must be > 0")


@dataclass(frozen=True)
class BoldMeta:
    num_parcels: int = 1000
    tr_seconds: float = 1.49

    def __post_init__(self):
        if self.num_parcels <= 0 or self.tr_seconds <= 0:
            raise ManifestError("num_parcels and tr_seconds must be > 0")


@dataclass
class SessionRecord:
    """One recording session: a subject watching one video once."""

    session_id: str
    subject_id: str
    video_id: str
    split: str
    feature_paths: dict[str, str]
    bold_path: str | None
    num_trs: int
    num_feature_steps: int

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"session {self.session_id}: bad split {self.split!r}")


@dataclass
class DatasetManifest:
    modalities: list[ModalityMeta]
    bold: BoldMeta
    subjects: list[str]
    sessions: list[SessionRecord]
    root: Path | None = field(default=None, repr=False, compare=False)

    @property
    def frequency_hz(self) -> float:
        return self.modalities[0].frequency_hz

    def modality_meta(self, name: str) -> ModalityMeta:
        for m in self.modalities:
            if m.name == name:
                return m
        raise ManifestError(f"manifest has no modality {name!r}")

    def subject_index(self, subject_id: str) -> int:
        return self.subjects.index(subject_id)

    def split_sessions(self, split: str) -> list[SessionRecord]:
        return [s for s in self.sessions if s.split == split]

    def videos(self) -> list[str]:
        return sorted({s.video_id for s in self.sessions})

    def resolve(self, rel: str) -> Path:
        if self.root is None:
            raise ManifestError("manifest has no root directory; load or save it first")
        return self.root / rel


@dataclass
class EmbeddingSeries:
    """Per-modality, per-session layer-stacked embeddings on the 2 Hz grid."""

    data: np.ndarray  # [T_feat, L_m, D_m] float32, read-only
    meta: ModalityMeta
    session_id: str


@dataclass
class BoldSeries:
    data: np.ndarray  # [T_tr, P] float32, read-only
    meta: BoldMeta
    session_id: str
    subject_id: str


# ---------------------------------------------------------------------------
# manifest (de)serialization and validation
# ---------------------------------------------------------------------------

def _session_to_json(s: SessionRecord) -> dict:
    return {
        "session_id": s.session_id,
        "subject_id": s.subject_id,
        "video_id": s.video_id,
        "split": s.split,
        "features": dict(s.feature_paths),
        "bold": s.bold_path,
        "num_trs": s.num_trs,
        "num_feature_steps": s.num_feature_steps,
    }


def manifest_to_json(manifest: DatasetManifest) -> dict:
    return {
        "modalities": [
            {
                "name": m.name,
                "dim": m.dim,
                "num_layers": m.num_layers,
                "frequency_hz": m.frequency_hz,
            }
            for m in manifest.modalities
        ],
        "bold": {
            "num_parcels": manifest.bold.num_parcels,
            "tr_seconds": manifest.bold.tr_seconds,
        },
        "subjects": list(manifest.subjects),
        "sessions": [_session_to_json(s) for s in manifest.sessions],
    }


def manifest_from_json(doc: dict, root: Path | None = None) -> DatasetManifest:
    modalities = [
        ModalityMeta(
            name=m["name"],
            dim=int(m["dim"]),
            num_layers=int(m["num_layers"]),
            frequency_hz=float(m["frequency_hz"]),
        )
        for m in doc["modalities"]
    ]
    bold = BoldMeta(
        num_parcels=int(doc["bold"]["num_parcels"]),
        tr_seconds=float(doc["bold"]["tr_seconds"]),
    )
    sessions = [
        SessionRecord(
            session_id=s["session_id"],
            subject_id=s["subject_id"],
            video_id=s["video_id"],
            split=s["split"],
            feature_paths=dict(s["features"]),
            bold_path=s.get("bold"),
            num_trs=int(s["num_trs"]),
            num_feature_steps=int(s["num_feature_steps"]),
        )
        for s in doc["sessions"]
    ]
    return DatasetManifest(
        modalities=modalities,
        bold=bold,
        subjects=list(doc["subjects"]),
        sessions=sessions,
        root=root,
    )


def save_manifest(manifest: DatasetManifest, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest_to_json(manifest), indent=1, sort_keys=True))
    manifest.root = path.parent
    return path


def validate_manifest(manifest: DatasetManifest, check_files: bool = True) -> None:
    """Check every DatasetManifest invariant; raise ManifestError on the first hit."""
    if not manifest.modalities:
        raise ManifestError("manifest declares no modalities")
    freqs = {m.frequency_hz for m in manifest.modalities}
    if len(freqs) != 1:
        raise ManifestError(f"modalities disagree on frequency_hz: {sorted(freqs)}")
    if len(set(manifest.subjects)) != len(manifest.subjects):
        raise ManifestError("duplicate subject ids")

    seen = set()
    video_split: dict[str, str] = {}
    f = manifest.frequency_hz
    tr = manifest.bold.tr_seconds
    for s in manifest.sessions:
        if s.session_id in seen:
            raise ManifestError(f"duplicate session id {s.session_id!r}")
        seen.add(s.session_id)
        if s.subject_id not in manifest.subjects:
            raise ManifestError(
                f"session {s.session_id}: unknown subject {s.subject_id!r}"
            )
        prev = video_split.setdefault(s.video_id, s.split)
        if prev != s.split:
            raise ManifestError(
                f"split leakage: video {s.video_id!r} appears in both "
                f"{prev!r} and {s.split!r} (session {s.session_id})"
            )
        min_steps = math.ceil(s.num_trs * tr * f) - 1
        if s.num_feature_steps < min_steps:
            raise ManifestError(
                f"session {s.session_id}: num_feature_steps {s.num_feature_steps} "
                f"< required {min_steps}"
            )
        if not check_files:
            continue
        for m in manifest.modalities:
            rel = s.feature_paths.get(m.name)
            if rel is None:
                raise ManifestError(f"session {s.session_id}: no {m.name} features")
            try:
                shape = tensorio.check_tensor_file(manifest.resolve(rel))
            except tensorio.TensorIOError as e:
                raise ManifestError(f"session {s.session_id}: {e}") from e
            want = (s.num_feature_steps, m.num_layers, m.dim)
            if shape != want:
                raise ManifestError(
                    f"session {s.session_id}: {m.name} shape {shape} != declared {want}"
                )
        if s.bold_path is not None:
            try:
                shape = tensorio.check_tensor_file(manifest.resolve(s.bold_path))
            except tensorio.TensorIOError as e:
                raise ManifestError(f"session {s.session_id}: {e}") from e
            want = (s.num_trs, manifest.bold.num_parcels)
            if shape != want:
                raise ManifestError(
                    f"session {s.session_id}: bold shape {shape} != declared {want}"
                )


def load_manifest(path: Path | str) -> DatasetManifest:
    """Parse and fully validate `manifest.json`; file shapes are cross-checked."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"missing manifest {path}")
    manifest = manifest_from_json(json.loads(path.read_text()), root=path.parent)
    validate_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# series loading
# ---------------------------------------------------------------------------

def load_embedding_series(
    manifest: DatasetManifest, record: SessionRecord, modality: str
) -> EmbeddingSeries:
    meta = manifest.modality_meta(modality)
    data = tensorio.read_tensor(manifest.resolve(record.feature_paths[modality]))
    if not np.isfinite(data).all():
        raise ManifestError(
            f"session {record.session_id}: {modality} features contain NaN/Inf"
        )
    return EmbeddingSeries(data=data, meta=meta, session_id=record.session_id)


def load_bold_series(
    manifest: DatasetManifest, record: SessionRecord, zscore: bool = True
) -> BoldSeries:
    if record.bold_path is None:
        raise ManifestError(f"session {record.session_id} has no BOLD targets")
    data = tensorio.read_tensor(manifest.resolve(record.bold_path))
    if not np.isfinite(data).all():
        raise ManifestError(f"session {record.session_id}: BOLD contains NaN/Inf")
    series = BoldSeries(
        data=data,
        meta=manifest.bold,
        session_id=record.session_id,
        subject_id=record.subject_id,
    )
    return zscore_session(series) if zscore else series


def zscore_session(bold: BoldSeries) -> BoldSeries:
    """Z-score each parcel over the session (population std, mean 0 / std 1).

    Constant parcel columns are mapped to zeros instead of NaN, with one
    warning naming the session and the number of degenerate columns.
    """
    data = np.asarray(bold.data, dtype=np.float64)
    if data.shape[0] < 2:
        raise ValueError(
            f"session {bold.session_id}: need >= 2 TRs to z-score, got {data.shape[0]}"
        )
    mean = data.mean(axis=0)
    std = data.std(axis=0)  # population std
    constant = std == 0.0
    safe_std = np.where(constant, 1.0, std)
    z = (data - mean) / safe_std
    if constant.any():
        z[:, constant] = 0.0
        warnings.warn(
            f"session {bold.session_id}: {int(constant.sum())} constant parcel "
            "column(s) z-scored to zeros",
            stacklevel=2,
        )
    out = z.astype(np.float32)
    out.flags.writeable = False
    return BoldSeries(
        data=out, meta=bold.meta, session_id=bold.session_id, subject_id=bold.subject_id
    )


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def make_split(
    manifest: DatasetManifest, holdout_fraction: float, seed: int
) -> DatasetManifest:
    """Reassign train/val by sampling whole videos into the holdout.

    Videos are drawn (deterministically from `seed`) until at least
    `holdout_fraction` of all sessions are held out; every session of a
    chosen video moves to val for every subject, the rest to train.
    """
    if not 0 < holdout_fraction < 1:
        raise ValueError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
    videos = manifest.videos()
    if len(videos) < 2:
        raise ManifestError(f"need >= 2 distinct videos to split, got {len(videos)}")
    sessions_per_video = {v: 0 for v in videos}
    for s in manifest.sessions:
        sessions_per_video[s.video_id] += 1
    total = len(manifest.sessions)
    want = holdout_fraction * total

    rng = np.random.default_rng(seed)
    order = [videos[i] for i in rng.permutation(len(videos))]
    held: set[str] = set()
    held_sessions = 0
    for v in order[:-1]:  # at least one video must stay in train
        if held_sessions >= want:
            break
        held.add(v)
        held_sessions += sessions_per_video[v]
    if held_sessions < want:
        raise ManifestError(
            f"holdout_fraction {holdout_fraction} unreachable without emptying train "
            f"(held {held_sessions}/{total} sessions)"
        )

    sessions = [
        replace(s, split="val" if s.video_id in held else "train")
        for s in manifest.sessions
    ]
    return DatasetManifest(
        modalities=list(manifest.modalities),
        bold=manifest.bold,
        subjects=list(manifest.subjects),
        sessions=sessions,
        root=manifest.root,
    )
