"""Synthetic multimodal datasets with a known stimulus->BOLD teacher.

The generator builds, per video, a small set of smooth latent time series per
modality on the feature grid. Observed "embeddings" are fixed random linear
mixtures of those latents, so a model that can invert a linear map can in
principle recover the latents exactly. Each parcel's neural signal is wired
to the latents in one of two ways:

- solo parcels: a per-subject linear readout of one modality's latents;
- pair parcels: the product of two per-subject scalar projections, one per
  modality — a cross-modal interaction no unimodal (and no purely linear)
  model can express.

Neural signals are convolved with a double-gamma HRF (peak ~5 s, undershoot
~15 s), block-mean resampled to the TR grid, standardized per parcel, and
only then corrupted with white noise. Standardizing before adding noise
pins the signal variance s^2 at exactly 1, so the expected inter-trial
correlation of two viewings is the analytic s^2/(s^2 + sigma^2) and
noise-ceiling estimates can be checked against it.

Latents depend only on (seed, video); readouts and mixtures only on seed;
per-session noise only on (seed, session). Two sessions of the same video by
the same subject therefore share their signal and differ in noise alone,
which is what noise-ceiling estimation needs. The wiring is recorded in a
teacher JSON next to the manifest; training code never reads it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.signal import fftconvolve
from scipy.stats import gamma as gamma_dist

from . import datastore, tensorio
from .datastore import (
    BoldMeta,
    DatasetManifest,
    ModalityMeta,
    SessionRecord,
)

SOLO_DRIVERS = ("text", "audio", "video")
PAIR_DRIVERS = ("text+audio", "text+video", "audio+video")
DRIVERS = SOLO_DRIVERS + PAIR_DRIVERS


class SynthError(ValueError):
    pass


def _default_feature_shapes() -> dict:
    # modality -> (num_layers, dim); small but layered enough for grouping
    return {"text": (4, 12), "audio": (4, 10), "video": (4, 8)}


def _default_driver_counts() -> dict:
    return {
        "text": 4,
        "audio": 4,
        "video": 4,
        "text+audio": 2,
        "text+video": 2,
        "audio+video": 2,
    }


@dataclass(frozen=True)
class TeacherSpec:
    latent_dim: int = 4
    smoothness_s: float = 3.0
    context_memory_s: float = 0.0  # causal box filter over text latents
    noise_std: float = 1.0
    interaction_strength: float = 1.0
    feature_shapes: dict = field(default_factory=_default_feature_shapes)
    driver_counts: dict = field(default_factory=_default_driver_counts)
    hrf_peak_s: float = 5.0
    hrf_undershoot_s: float = 15.0
    hrf_undershoot_ratio: float = 6.0
    hrf_duration_s: float = 30.0
    tr_seconds: float = 1.49
    frequency_hz: float = 2.0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise SynthError("latent_dim must be >= 1")
        if self.smoothness_s <= 0:
            raise SynthError("smoothness_s must be > 0")
        if self.noise_std < 0:
            raise SynthError("noise_std must be >= 0")
        unknown = set(self.driver_counts) - set(DRIVERS)
        if unknown:
            raise SynthError(f"unknown drivers {sorted(unknown)}")
        if any(v < 0 for v in self.driver_counts.values()):
            raise SynthError("driver counts must be >= 0")
        if self.num_parcels < 1:
            raise SynthError("driver_counts must cover at least one parcel")
        for drv, count in self.driver_counts.items():
            if count == 0:
                continue
            for m in drv.split("+"):
                if m not in self.feature_shapes:
                    raise SynthError(f"driver {drv!r} needs modality {m!r} features")

    @property
    def num_parcels(self) -> int:
        return sum(self.driver_counts.get(d, 0) for d in DRIVERS)

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m in datastore.MODALITIES if m in self.feature_shapes)

    def parcel_drivers(self) -> list[str]:
        """Driver of each parcel index, in the fixed DRIVERS order."""
        out = []
        for d in DRIVERS:
            out += [d] * self.driver_counts.get(d, 0)
        return out

    def to_json(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "smoothness_s": self.smoothness_s,
            "context_memory_s": self.context_memory_s,
            "noise_std": self.noise_std,
            "interaction_strength": self.interaction_strength,
            "feature_shapes": {m: list(v) for m, v in self.feature_shapes.items()},
            "driver_counts": dict(self.driver_counts),
            "hrf_peak_s": self.hrf_peak_s,
            "hrf_undershoot_s": self.hrf_undershoot_s,
            "hrf_undershoot_ratio": self.hrf_undershoot_ratio,
            "hrf_duration_s": self.hrf_duration_s,
            "tr_seconds": self.tr_seconds,
            "frequency_hz": self.frequency_hz,
        }

    @staticmethod
    def from_json(doc: dict) -> "TeacherSpec":
        doc = dict(doc)
        if "feature_shapes" in doc:
            doc["feature_shapes"] = {
                m: tuple(v) for m, v in doc["feature_shapes"].items()
            }
        return TeacherSpec(**doc)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def double_gamma_hrf(
    frequency_hz: float,
    peak_s: float = 5.0,
    undershoot_s: float = 15.0,
    undershoot_ratio: float = 6.0,
    duration_s: float = 30.0,
) -> np.ndarray:
    """Canonical-style HRF sampled at the feature rate, peak normalized to 1.

    Both lobes are gamma densities with unit scale, so the positive lobe
    peaks at `peak_s` and the negative one at `undershoot_s`.
    """
    t = np.arange(0.0, duration_s, 1.0 / frequency_hz)
    rise = gamma_dist.pdf(t, peak_s + 1.0)
    dip = gamma_dist.pdf(t, undershoot_s + 1.0)
    h = rise - dip / undershoot_ratio
    return h / h.max()


def standardize(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Population z-score along an axis; constant slices become zeros."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=axis, keepdims=True)
    sd = x.std(axis=axis, keepdims=True)
    return np.where(sd > 0, (x - mu) / np.where(sd > 0, sd, 1.0), 0.0)


def smooth_latents(
    rng: np.random.Generator,
    num_steps: int,
    latent_dim: int,
    smoothness_s: float,
    frequency_hz: float,
) -> np.ndarray:
    """Standardized smooth noise [num_steps, latent_dim]."""
    z = rng.standard_normal((num_steps, latent_dim))
    z = gaussian_filter1d(z, sigma=smoothness_s * frequency_hz, axis=0, mode="reflect")
    return standardize(z)


def causal_box_filter(x: np.ndarray, width: int) -> np.ndarray:
    """Mean of the trailing `width` rows (fewer near the start)."""
    if width <= 1:
        return np.array(x, copy=True)
    cs = np.cumsum(x, axis=0)
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    for t in range(x.shape[0]):
        lo = max(0, t - width + 1)
        total = cs[t] - (cs[lo - 1] if lo > 0 else 0)
        out[t] = total / (t - lo + 1)
    return out


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


_TEACHER_TAG, _VIDEO_TAG, _NOISE_TAG = 0, 1, 2


# ---------------------------------------------------------------------------
# the teacher
# ---------------------------------------------------------------------------

@dataclass
class Teacher:
    """Frozen wiring shared by every session of one dataset."""

    spec: TeacherSpec
    mixers: dict  # modality -> [L*D, latent_dim] observation mixtures
    solo_w: dict  # (subject_idx, parcel_idx) -> [latent_dim]
    pair_w: dict  # (subject_idx, parcel_idx) -> ([latent_dim], [latent_dim])
    drivers: list  # parcel_idx -> driver string

    @staticmethod
    def build(spec: TeacherSpec, num_subjects: int, seed: int) -> "Teacher":
        rng = _rng(seed, _TEACHER_TAG)
        mixers = {}
        for m in spec.modalities:
            layers, dim = spec.feature_shapes[m]
            mixers[m] = rng.standard_normal((layers * dim, spec.latent_dim)) / math.sqrt(
                spec.latent_dim
            )
        drivers = spec.parcel_drivers()
        solo_w = {}
        pair_w = {}
        for s in range(num_subjects):
            for j, drv in enumerate(drivers):
                if "+" in drv:
                    pair_w[(s, j)] = (
                        rng.standard_normal(spec.latent_dim),
                        rng.standard_normal(spec.latent_dim),
                    )
                else:
                    solo_w[(s, j)] = rng.standard_normal(spec.latent_dim)
        return Teacher(
            spec=spec, mixers=mixers, solo_w=solo_w, pair_w=pair_w, drivers=drivers
        )

    def latents(self, seed: int, video_index: int, num_steps: int) -> dict:
        """Per-modality latent series for one video, identical across subjects."""
        spec = self.spec
        out = {}
        for m in spec.modalities:
            rng = _rng(seed, _VIDEO_TAG, video_index, spec.modalities.index(m))
            z = smooth_latents(
                rng, num_steps, spec.latent_dim, spec.smoothness_s, spec.frequency_hz
            )
            if m == "text" and spec.context_memory_s > 0:
                width = max(1, round(spec.context_memory_s * spec.frequency_hz))
                z = standardize(causal_box_filter(z, width))
            out[m] = z
        return out

    def features(self, latents: dict) -> dict:
        """Observed embeddings [T, L_m, D_m] per modality, float32."""
        out = {}
        for m, z in latents.items():
            layers, dim = self.spec.feature_shapes[m]
            flat = z @ self.mixers[m].T
            out[m] = np.ascontiguousarray(
                flat.reshape(z.shape[0], layers, dim), dtype=np.float32
            )
        return out

    def neural_signal(self, latents: dict, subject_idx: int) -> np.ndarray:
        """Noise-free parcel drive [T, P] on the feature grid."""
        t = next(iter(latents.values())).shape[0]
        signal = np.empty((t, len(self.drivers)))
        for j, drv in enumerate(self.drivers):
            if "+" in drv:
                ma, mb = drv.split("+")
                wa, wb = self.pair_w[(subject_idx, j)]
                signal[:, j] = (
                    self.spec.interaction_strength
                    * (latents[ma] @ wa)
                    * (latents[mb] @ wb)
                )
            else:
                signal[:, j] = latents[drv] @ self.solo_w[(subject_idx, j)]
        return signal

    def bold_signal(self, latents: dict, subject_idx: int, num_trs: int) -> np.ndarray:
        """Standardized noise-free BOLD [num_trs, P]: HRF convolution,
        block-mean to the TR grid, per-parcel z-scoring."""
        from .alignment import resample_audio

        spec = self.spec
        neural = self.neural_signal(latents, subject_idx)
        hrf = double_gamma_hrf(
            spec.frequency_hz,
            spec.hrf_peak_s,
            spec.hrf_undershoot_s,
            spec.hrf_undershoot_ratio,
            spec.hrf_duration_s,
        )
        convolved = fftconvolve(neural, hrf[:, None], mode="full", axes=0)[
            : neural.shape[0]
        ]
        on_tr_grid = resample_audio(
            convolved, src_hz=spec.frequency_hz, dst_hz=1.0 / spec.tr_seconds
        )
        if on_tr_grid.shape[0] < num_trs:
            raise SynthError(
                f"feature series too short: {on_tr_grid.shape[0]} TRs "
                f"resampled, {num_trs} requested"
            )
        return standardize(on_tr_grid[:num_trs])


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def generate(
    spec: TeacherSpec,
    num_subjects: int,
    num_sessions: int,
    session_trs: int,
    seed: int,
    out_dir: Path | str,
    holdout_fraction: float = 0.2,
    num_repeat_videos: int = 0,
) -> DatasetManifest:
    """Write a full synthetic dataset; returns the validated manifest.

    `num_sessions` counts videos; every subject watches every video once, so
    the manifest holds num_sessions * num_subjects session records (plus
    repeats). The last max(1, round(holdout_fraction * num_sessions)) videos
    form the val split. The first `num_repeat_videos` val videos are emitted
    a second time per subject with fresh noise (split "val" as well); the
    teacher record lists those pairs for noise-ceiling estimation.
    """
    if num_subjects < 1 or num_sessions < 1 or session_trs < 2:
        raise SynthError("need >= 1 subject, >= 1 video, >= 2 TRs")
    if num_sessions >= 2:
        num_val = max(1, round(holdout_fraction * num_sessions))
        if num_val >= num_sessions:
            num_val = num_sessions - 1
    else:
        num_val = 0
    if num_repeat_videos > num_val:
        raise SynthError(
            f"{num_repeat_videos} repeat videos requested but only "
            f"{num_val} val videos exist"
        )
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "bold").mkdir(parents=True, exist_ok=True)

    teacher = Teacher.build(spec, num_subjects, seed)
    subjects = [f"sub{i + 1:02d}" for i in range(num_subjects)]
    video_ids = [f"vid{v:03d}" for v in range(num_sessions)]
    val_videos = set(video_ids[num_sessions - num_val :])
    repeat_videos = video_ids[num_sessions - num_val :][:num_repeat_videos]

    num_steps = math.ceil(session_trs * spec.tr_seconds * spec.frequency_hz)
    modalities = [
        ModalityMeta(
            name=m,
            dim=spec.feature_shapes[m][1],
            num_layers=spec.feature_shapes[m][0],
            frequency_hz=spec.frequency_hz,
        )
        for m in spec.modalities
    ]
    bold_meta = BoldMeta(num_parcels=spec.num_parcels, tr_seconds=spec.tr_seconds)

    sessions: list[SessionRecord] = []
    repeat_pairs: list[list[str]] = []
    session_counter = 0
    for v_idx, video_id in enumerate(video_ids):
        latents = teacher.latents(seed, v_idx, num_steps)
        features = teacher.features(latents)
        feature_paths = {}
        for m, arr in features.items():
            rel = f"features/{video_id}.{m}.f32"
            tensorio.write_tensor(out_dir / rel, arr)
            feature_paths[m] = rel
        split = "val" if video_id in val_videos else "train"
        viewings = 2 if video_id in repeat_videos else 1
        for s_idx, subject_id in enumerate(subjects):
            signal = teacher.bold_signal(latents, s_idx, session_trs)
            viewing_ids = []
            for viewing in range(viewings):
                noise_rng = _rng(seed, _NOISE_TAG, session_counter)
                session_counter += 1
                bold = signal + noise_rng.normal(
                    0.0, spec.noise_std, size=signal.shape
                )
                suffix = "" if viewing == 0 else f"_r{viewing + 1}"
                session_id = f"{subject_id}_{video_id}{suffix}"
                rel = f"bold/{session_id}.f32"
                tensorio.write_tensor(out_dir / rel, bold.astype(np.float32))
                sessions.append(
                    SessionRecord(
                        session_id=session_id,
                        subject_id=subject_id,
                        video_id=video_id,
                        split=split,
                        feature_paths=dict(feature_paths),
                        bold_path=rel,
                        num_trs=session_trs,
                        num_feature_steps=num_steps,
                    )
                )
                viewing_ids.append(session_id)
            if len(viewing_ids) == 2:
                repeat_pairs.append(viewing_ids)

    manifest = DatasetManifest(
        modalities=modalities,
        bold=bold_meta,
        subjects=subjects,
        sessions=sessions,
        root=out_dir,
    )
    datastore.save_manifest(manifest, out_dir / "manifest.json")

    signal_var = 1.0  # standardized before noise
    record = {
        "seed": seed,
        "spec": spec.to_json(),
        "num_subjects": num_subjects,
        "num_videos": num_sessions,
        "session_trs": session_trs,
        "parcel_drivers": teacher.drivers,
        "val_videos": sorted(val_videos),
        "repeat_pairs": repeat_pairs,
        "analytic_rho_self": signal_var / (signal_var + spec.noise_std**2),
    }
    (out_dir / "teacher.json").write_text(json.dumps(record, indent=1, sort_keys=True))
    return datastore.load_manifest(out_dir / "manifest.json")


def load_teacher_record(out_dir: Path | str) -> dict:
    return json.loads((Path(out_dir) / "teacher.json").read_text())
