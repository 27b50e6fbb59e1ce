"""Temporal and layer-dimension alignment.

Everything that moves tensors between the three native stimulus clocks and
the scanner clock lives here:

- a fixed feature grid at ``frequency_hz`` (2 Hz by default), phase-aligned so
  step b covers the half-open interval [b/f, (b+1)/f) with t=0 shared with
  the TR grid;
- ``bin_words``: timed word embeddings -> feature grid, by summing the
  embeddings of words whose time span overlaps a bin;
- ``resample_audio``: block-mean resampling from a faster grid (50 Hz
  speech-model frames) down to the feature grid;
- ``group_layers``: compress the layer axis of a [T, L_m, D_m] series into a
  small number of layer groups, then concatenate or average the groups;
- ``extract_window``: slice N TRs of targets plus the matching
  round(N*TR*f) feature steps, with optional jitter applied to the feature
  side only.

All functions are pure; arrays are never mutated in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import datastore
from .datastore import MODALITIES, DatasetManifest, SessionRecord

# zero-duration words get this span so they land in exactly one bin
ZERO_DURATION_S = 1e-3


class AlignmentError(ValueError):
    pass


@dataclass
class TimedWordEmbedding:
    word: str
    onset_s: float
    duration_s: float
    embedding: np.ndarray  # [L_m, D_text]

    def __post_init__(self):
        if not math.isfinite(self.onset_s) or self.onset_s < 0:
            raise AlignmentError(f"word {self.word!r}: bad onset {self.onset_s}")
        if self.duration_s < 0:
            raise AlignmentError(f"word {self.word!r}: negative duration")
        emb = np.asarray(self.embedding)
        if emb.ndim != 2:
            raise AlignmentError(f"word {self.word!r}: embedding must be [L, D]")
        if not np.isfinite(emb).all():
            raise AlignmentError(f"word {self.word!r}: embedding has NaN/Inf")


@dataclass(frozen=True)
class LayerGroupSpec:
    """How to compress a model's layer axis.

    anchors are fractional depths in [0, 1]. In group_by_intervals mode they
    are right edges of contiguous layer bands; a leading anchor of exactly 0
    puts layer 0 (the embedding output) in a band of its own. In
    single_layers mode each anchor picks the one layer round(a*(L_m-1)).
    """

    anchors: tuple[float, ...]
    mode: str = "group_by_intervals"  # or "single_layers"
    aggregation: str = "concatenate"  # or "average"

    def __post_init__(self):
        if self.mode not in ("group_by_intervals", "single_layers"):
            raise AlignmentError(f"bad layer-group mode {self.mode!r}")
        if self.aggregation not in ("concatenate", "average"):
            raise AlignmentError(f"bad layer aggregation {self.aggregation!r}")
        a = tuple(float(x) for x in self.anchors)
        if not a:
            raise AlignmentError("anchors must be non-empty")
        if any(not 0 <= x <= 1 for x in a):
            raise AlignmentError(f"anchors must lie in [0, 1]: {a}")
        if any(x >= y for x, y in zip(a, a[1:])):
            raise AlignmentError(f"anchors must be strictly ascending: {a}")
        if self.mode == "group_by_intervals" and a[-1] != 1.0:
            raise AlignmentError(f"last anchor must be 1 for interval mode: {a}")
        object.__setattr__(self, "anchors", a)

    @property
    def num_groups(self) -> int:
        return len(self.anchors)

    def grouped_dim(self, dim: int) -> int:
        """Feature width this spec produces from one modality of width `dim`."""
        return self.num_groups * dim if self.aggregation == "concatenate" else dim


@dataclass(frozen=True)
class WindowConfig:
    trs_per_window: int = 100  # N
    tr_seconds: float = 1.49
    frequency_hz: float = 2.0
    jitter_s: float = 10.0

    def __post_init__(self):
        if self.trs_per_window <= 0:
            raise AlignmentError("trs_per_window must be > 0")
        if self.tr_seconds <= 0 or self.frequency_hz <= 0:
            raise AlignmentError("tr_seconds and frequency_hz must be > 0")
        if self.jitter_s < 0:
            raise AlignmentError("jitter_s must be >= 0")

    @property
    def window_seconds(self) -> float:
        return self.trs_per_window * self.tr_seconds

    @property
    def window_steps(self) -> int:
        """Feature steps per window, round(N * TR * f). 298 for the defaults."""
        return round(self.window_seconds * self.frequency_hz)


@dataclass
class AlignedWindow:
    inputs: dict[str, np.ndarray]  # modality -> [window_steps, F_m]
    targets: np.ndarray | None  # [N, P]
    subject_index: int
    session_id: str
    start_tr: int
    pad_mask: np.ndarray = field(default=None)  # [window_steps] bool, True = padded

    def __post_init__(self):
        lengths = {v.shape[0] for v in self.inputs.values()}
        if len(lengths) != 1:
            raise AlignmentError(f"modality window lengths differ: {lengths}")


@dataclass
class SessionTensors:
    """One session's layer-grouped features plus z-scored targets, in memory."""

    features: dict[str, np.ndarray]  # modality -> [T_feat, F_m] float32
    bold: np.ndarray | None  # [num_trs, P] float32
    subject_index: int
    session_id: str
    num_trs: int


# ---------------------------------------------------------------------------
# word binning
# ---------------------------------------------------------------------------

def bin_words(
    words: list[TimedWordEmbedding],
    frequency_hz: float,
    num_steps: int,
    layer_shape: tuple[int, int] | None = None,
    diagnostics: list | None = None,
) -> np.ndarray:
    """Sum word embeddings into half-open time bins [b/f, (b+1)/f).

    A word overlaps bin b when [onset, onset+duration) intersects it; words
    of zero duration are widened to ZERO_DURATION_S so they hit exactly one
    bin. Words entirely outside [0, num_steps/f) are dropped; if
    `diagnostics` is given, one record per dropped word is appended.
    `layer_shape` (L, D) is only needed when `words` may be empty.
    """
    if num_steps < 1:
        raise AlignmentError(f"num_steps must be >= 1, got {num_steps}")
    if not words and layer_shape is None:
        raise AlignmentError("cannot infer embedding shape from zero words")
    layer_dim = tuple(layer_shape) if not words else words[0].embedding.shape
    out = np.zeros((num_steps,) + layer_dim, dtype=np.float64)
    f = float(frequency_hz)
    horizon = num_steps / f
    for w in words:
        if w.embedding.shape != layer_dim:
            raise AlignmentError(
                f"word {w.word!r}: embedding shape {w.embedding.shape} != {layer_dim}"
            )
        start = w.onset_s
        end = start + (w.duration_s if w.duration_s > 0 else ZERO_DURATION_S)
        if start >= horizon or end <= 0:
            if diagnostics is not None:
                diagnostics.append(
                    {"event": "dropped_word", "word": w.word, "onset_s": start}
                )
            continue
        first = max(0, math.floor(start * f))
        last = min(num_steps - 1, math.ceil(end * f) - 1)
        out[first : last + 1] += w.embedding
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# audio resampling
# ---------------------------------------------------------------------------

def resample_audio(series: np.ndarray, src_hz: float, dst_hz: float) -> np.ndarray:
    """Block-mean resample along axis 0 from src_hz down to dst_hz.

    Output step j averages the source steps whose centers (i+0.5)/src_hz fall
    in [j/dst_hz, (j+1)/dst_hz). A block left empty by a non-integral rate
    ratio borrows the source step whose center is nearest to the block's
    center (ties to the earlier step).
    """
    if src_hz < dst_hz:
        raise AlignmentError(f"cannot upsample: src {src_hz} Hz < dst {dst_hz} Hz")
    t_src = series.shape[0]
    t_dst = math.floor(t_src * dst_hz / src_hz)
    if t_dst < 1:
        raise AlignmentError(f"source too short: {t_src} steps at ratio {dst_hz/src_hz}")
    if src_hz == dst_hz:
        return np.array(series, copy=True)

    centers = (np.arange(t_src) + 0.5) / src_hz
    block = np.floor(centers * dst_hz).astype(np.int64)
    # block is nondecreasing; locate each output block's source run
    starts = np.searchsorted(block, np.arange(t_dst), side="left")
    ends = np.searchsorted(block, np.arange(t_dst), side="right")

    out = np.empty((t_dst,) + series.shape[1:], dtype=np.float64)
    flat = np.asarray(series, dtype=np.float64)
    for j in range(t_dst):
        lo, hi = starts[j], ends[j]
        if lo < hi:
            out[j] = flat[lo:hi].mean(axis=0)
        else:
            # nearest source center to the block center, earlier on ties
            r = (j + 0.5) / dst_hz * src_hz - 0.5
            i = math.ceil(r - 0.5)
            out[j] = flat[min(max(i, 0), t_src - 1)]
    return out.astype(series.dtype if series.dtype.kind == "f" else np.float64)


# ---------------------------------------------------------------------------
# layer grouping
# ---------------------------------------------------------------------------

def _interval_groups(anchors: tuple[float, ...], num_layers: int) -> list[range]:
    groups: list[range] = []
    rest = anchors
    start = 0
    if rest[0] == 0.0:
        groups.append(range(0, 1))  # embedding output as its own group
        rest = rest[1:]
        start = 1
        if not rest:
            raise AlignmentError("anchors [0] alone cover only the embedding layer")
    for a in rest:
        edge = round(a * num_layers)
        if edge <= start:
            raise AlignmentError(
                f"empty layer group at anchor {a} with {num_layers} layers "
                f"(anchors {anchors})"
            )
        groups.append(range(start, edge))
        start = edge
    return groups


def _single_layer_groups(anchors: tuple[float, ...], num_layers: int) -> list[range]:
    slots = [round(a * (num_layers - 1)) for a in anchors]
    if len(set(slots)) != len(slots):
        raise AlignmentError(
            f"anchors {anchors} collapse to duplicate layers {slots} at L={num_layers}"
        )
    return [range(s, s + 1) for s in slots]


def layer_groups(spec: LayerGroupSpec, num_layers: int) -> list[range]:
    """Resolve a spec to concrete layer index ranges for a model of L_m layers."""
    if num_layers < spec.num_groups:
        raise AlignmentError(
            f"{num_layers} layers cannot form {spec.num_groups} groups"
        )
    if spec.mode == "group_by_intervals":
        return _interval_groups(spec.anchors, num_layers)
    return _single_layer_groups(spec.anchors, num_layers)


def group_layers(series: np.ndarray, spec: LayerGroupSpec) -> np.ndarray:
    """Compress [T, L_m, D_m] to [T, G*D_m] (concatenate) or [T, D_m] (average).

    Each group is first averaged over its member layers; groups are then
    concatenated along the feature axis or averaged together.
    """
    if series.ndim != 3:
        raise AlignmentError(f"expected [T, L, D], got shape {series.shape}")
    groups = layer_groups(spec, series.shape[1])
    means = [series[:, g.start : g.stop].mean(axis=1) for g in groups]
    if spec.aggregation == "concatenate":
        return np.concatenate(means, axis=1)
    return np.mean(np.stack(means, axis=0), axis=0)


# ---------------------------------------------------------------------------
# window extraction
# ---------------------------------------------------------------------------

def feature_start_index(start_tr: int, jitter_s: float, config: WindowConfig) -> int:
    return round((start_tr * config.tr_seconds + jitter_s) * config.frequency_hz)


def extract_window(
    session: SessionTensors,
    config: WindowConfig,
    start_tr: int,
    jitter_s: float = 0.0,
    with_targets: bool = True,
) -> AlignedWindow:
    """Slice one aligned window: N TRs of targets, round(N*TR*f) feature steps.

    Jitter shifts only the feature slice; out-of-range feature steps are
    zero-padded and marked in pad_mask. Targets are never padded: the window
    must fit inside the session's TR range.
    """
    n = config.trs_per_window
    if start_tr < 0 or start_tr + n > session.num_trs:
        raise AlignmentError(
            f"window [{start_tr}, {start_tr + n}) outside session "
            f"{session.session_id} with {session.num_trs} TRs"
        )
    if abs(jitter_s) > config.jitter_s:
        raise AlignmentError(f"|jitter| {jitter_s} exceeds configured {config.jitter_s}")
    steps = config.window_steps
    lo = feature_start_index(start_tr, jitter_s, config)
    hi = lo + steps

    inputs: dict[str, np.ndarray] = {}
    pad_mask = None
    for name, feats in session.features.items():
        t_feat = feats.shape[0]
        src_lo, src_hi = max(lo, 0), min(hi, t_feat)
        if src_lo >= src_hi:
            raise AlignmentError(
                f"window features [{lo}, {hi}) miss session {session.session_id} "
                f"entirely ({t_feat} steps)"
            )
        buf = np.zeros((steps,) + feats.shape[1:], dtype=feats.dtype)
        buf[src_lo - lo : src_hi - lo] = feats[src_lo:src_hi]
        inputs[name] = buf
        if pad_mask is None:
            pad_mask = np.ones(steps, dtype=bool)
            pad_mask[src_lo - lo : src_hi - lo] = False

    targets = None
    if with_targets:
        if session.bold is None:
            raise AlignmentError(f"session {session.session_id} has no BOLD targets")
        targets = session.bold[start_tr : start_tr + n]
    return AlignedWindow(
        inputs=inputs,
        targets=targets,
        subject_index=session.subject_index,
        session_id=session.session_id,
        start_tr=start_tr,
        pad_mask=pad_mask,
    )


def training_starts(num_trs: int, trs_per_window: int) -> list[int]:
    """Non-overlapping window starts; an incomplete tail window is dropped."""
    if num_trs < trs_per_window:
        return []
    return list(range(0, num_trs - trs_per_window + 1, trs_per_window))


def eval_starts(num_trs: int, trs_per_window: int) -> list[int]:
    """Starts that tile a whole session; the last window is clamped to the end."""
    if num_trs < trs_per_window:
        raise AlignmentError(
            f"session of {num_trs} TRs shorter than window {trs_per_window}"
        )
    starts = training_starts(num_trs, trs_per_window)
    covered = starts[-1] + trs_per_window
    if covered < num_trs:
        starts.append(num_trs - trs_per_window)
    return starts


# ---------------------------------------------------------------------------
# session assembly
# ---------------------------------------------------------------------------

def assemble_session(
    manifest: DatasetManifest,
    record: SessionRecord,
    group_spec: LayerGroupSpec,
    with_bold: bool = True,
    zscore: bool = True,
) -> SessionTensors:
    """Load a session and collapse each modality's layer axis per group_spec."""
    features = {}
    for m in manifest.modalities:
        series = datastore.load_embedding_series(manifest, record, m.name)
        features[m.name] = np.ascontiguousarray(
            group_layers(series.data, group_spec), dtype=np.float32
        )
    bold = None
    if with_bold and record.bold_path is not None:
        bold = datastore.load_bold_series(manifest, record, zscore=zscore).data
    return SessionTensors(
        features=features,
        bold=bold,
        subject_index=manifest.subject_index(record.subject_id),
        session_id=record.session_id,
        num_trs=record.num_trs,
    )


def assemble_split(
    manifest: DatasetManifest,
    split: str,
    group_spec: LayerGroupSpec,
    subjects: list[str] | None = None,
) -> list[SessionTensors]:
    records = manifest.split_sessions(split)
    if subjects is not None:
        records = [r for r in records if r.subject_id in subjects]
    if not records:
        raise AlignmentError(f"no sessions in split {split!r}")
    return [assemble_session(manifest, r, group_spec) for r in records]


def feature_dims(manifest: DatasetManifest, group_spec: LayerGroupSpec) -> dict[str, int]:
    """Per-modality flattened feature width after layer grouping."""
    return {m.name: group_spec.grouped_dim(m.dim) for m in manifest.modalities}
