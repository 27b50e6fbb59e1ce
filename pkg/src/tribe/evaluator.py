"""Scoring and analysis: per-parcel Pearson, noise-ceiling normalization,
single-modality probing, and the ablation harness.

Conventions:

- A parcel score is the Pearson correlation between predicted and measured
  BOLD over all TRs of a split, concatenated across that subject's sessions.
- Zero-variance parcels score NaN and are excluded from every mean, with the
  exclusion count kept on the table; coercing them to 0 would bias averages.
- The noise ceiling rho_max = sqrt(2 / (1 + 1/rho_self)) is defined only for
  rho_self > 0; other parcels are flagged NaN and excluded the same way.
- Sessions are tiled with jitter-free windows; when a session length is not
  a multiple of the window, the final window is clamped to the session end
  and only its previously uncovered TRs contribute to the prediction.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path

import numpy as np

from .alignment import (
    LayerGroupSpec,
    SessionTensors,
    assemble_split,
    eval_starts,
    extract_window,
)
from .datastore import MODALITIES, BoldSeries, DatasetManifest
from .tribenet import ModalityMask, TribeNet, load_checkpoint, stack_windows


class EvalError(ValueError):
    pass


@dataclass
class ScoreTable:
    scores: np.ndarray  # [num_subjects, P], NaN = flagged
    mean_score: float
    per_subject_mean: np.ndarray  # [num_subjects]
    num_flagged: int
    metadata: dict = field(default_factory=dict)

    @staticmethod
    def from_scores(scores: np.ndarray, metadata: dict | None = None) -> "ScoreTable":
        scores = np.asarray(scores, dtype=np.float64)
        finite = np.isfinite(scores)
        mean = float(scores[finite].mean()) if finite.any() else float("nan")
        per_subject = np.full(scores.shape[0], np.nan)
        for s in range(scores.shape[0]):
            row_ok = finite[s]
            if row_ok.any():
                per_subject[s] = scores[s, row_ok].mean()
        return ScoreTable(
            scores=scores,
            mean_score=mean,
            per_subject_mean=per_subject,
            num_flagged=int((~finite).sum()),
            metadata=dict(metadata or {}),
        )

    def parcel_means(self) -> np.ndarray:
        """Per-parcel score averaged over subjects (NaN-aware), shape [P]."""
        out = np.full(self.scores.shape[1], np.nan)
        finite = np.isfinite(self.scores)
        counts = finite.sum(axis=0)
        sums = np.where(finite, self.scores, 0.0).sum(axis=0)
        ok = counts > 0
        out[ok] = sums[ok] / counts[ok]
        return out


@dataclass
class NoiseCeiling:
    rho_self: np.ndarray  # [P]
    rho_max: np.ndarray  # [P], NaN where rho_self <= 0 or undefined
    num_flagged: int


# ---------------------------------------------------------------------------
# correlation primitives
# ---------------------------------------------------------------------------

def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Product-moment correlation; NaN when either input has zero variance."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise EvalError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise EvalError("need at least 2 samples")
    return float(pearson_columns(x[:, None], y[:, None])[0])


def pearson_columns(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Column-wise Pearson over [T, P] arrays; zero-variance columns -> NaN."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise EvalError(f"shape mismatch: {x.shape} vs {y.shape}")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    sxx = (xc * xc).sum(axis=0)
    syy = (yc * yc).sum(axis=0)
    sxy = (xc * yc).sum(axis=0)
    ok = (sxx > 0) & (syy > 0)
    out = np.full(x.shape[1], np.nan)
    out[ok] = sxy[ok] / np.sqrt(sxx[ok] * syy[ok])
    return np.clip(out, -1.0, 1.0, out=out)


# ---------------------------------------------------------------------------
# model scoring
# ---------------------------------------------------------------------------

def predict_session(
    net: TribeNet, session: SessionTensors, mask: ModalityMask | None = None
) -> np.ndarray:
    """Stitched [num_trs, P] prediction; tiling windows, clamped final window."""
    cfg = net.config.window
    starts = eval_starts(session.num_trs, cfg.trs_per_window)
    windows = [
        extract_window(session, cfg, start, jitter_s=0.0, with_targets=False)
        for start in starts
    ]
    inputs, subject_indices, _ = stack_windows(windows)
    preds, _ = net.forward(inputs, subject_indices, mask=mask, train_mode=False)
    out = np.empty((session.num_trs, net.config.num_parcels), dtype=preds.dtype)
    covered = 0
    for w, start in enumerate(starts):
        lo = max(start, covered)  # only TRs no earlier window produced
        out[lo : start + cfg.trs_per_window] = preds[w, lo - start :]
        covered = start + cfg.trs_per_window
    return out


def score_sessions(
    net: TribeNet,
    sessions: list[SessionTensors],
    mask: ModalityMask | None = None,
    metadata: dict | None = None,
) -> ScoreTable:
    """Per-parcel Pearson per subject, predictions concatenated across sessions."""
    if not sessions:
        raise EvalError("no sessions to score")
    num_subjects = net.config.num_subjects
    by_subject: dict[int, list[SessionTensors]] = {}
    for sess in sessions:
        if sess.bold is None:
            raise EvalError(f"session {sess.session_id} has no BOLD targets")
        by_subject.setdefault(sess.subject_index, []).append(sess)
    scores = np.full((num_subjects, net.config.num_parcels), np.nan)
    for s, group in sorted(by_subject.items()):
        preds = np.concatenate([predict_session(net, sess, mask) for sess in group])
        truth = np.concatenate([sess.bold for sess in group])
        scores[s] = pearson_columns(preds, truth)
    meta = dict(metadata or {})
    if mask is not None and mask.masked:
        meta.setdefault("mask", sorted(mask.masked))
    return ScoreTable.from_scores(scores, meta)


def score_model(
    checkpoint_stem: Path | str,
    manifest: DatasetManifest,
    split: str,
    group_spec: LayerGroupSpec,
    mask: ModalityMask | None = None,
) -> ScoreTable:
    net = load_checkpoint(checkpoint_stem)
    sessions = assemble_split(manifest, split, group_spec)
    return score_sessions(
        net,
        sessions,
        mask,
        metadata={"split": split, "checkpoint": Path(checkpoint_stem).name},
    )


# ---------------------------------------------------------------------------
# noise ceiling
# ---------------------------------------------------------------------------

def _series_data(x) -> np.ndarray:
    return x.data if isinstance(x, BoldSeries) else np.asarray(x)


def noise_ceiling(repeat_a, repeat_b) -> NoiseCeiling:
    """Inter-trial correlation of two viewings, mapped through the ceiling rule."""
    a = _series_data(repeat_a)
    b = _series_data(repeat_b)
    if a.shape != b.shape:
        raise EvalError(f"repeat shapes differ: {a.shape} vs {b.shape}")
    rho_self = pearson_columns(a, b)
    return _ceiling_from_rho_self(rho_self)


def noise_ceiling_from_repeats(repeats: list) -> NoiseCeiling:
    """With more than two viewings, rho_self is the mean over unordered pairs."""
    if len(repeats) < 2:
        raise EvalError(f"need >= 2 repeats, got {len(repeats)}")
    arrays = [_series_data(r) for r in repeats]
    pair_rhos = [
        pearson_columns(arrays[i], arrays[j])
        for i in range(len(arrays))
        for j in range(i + 1, len(arrays))
    ]
    return _ceiling_from_rho_self(np.nanmean(np.stack(pair_rhos), axis=0))


def _ceiling_from_rho_self(rho_self: np.ndarray) -> NoiseCeiling:
    ok = np.isfinite(rho_self) & (rho_self > 0)
    rho_max = np.full_like(rho_self, np.nan)
    rho_max[ok] = np.sqrt(2.0 / (1.0 + 1.0 / rho_self[ok]))
    return NoiseCeiling(
        rho_self=rho_self, rho_max=rho_max, num_flagged=int((~ok).sum())
    )


def normalized_scores(table: ScoreTable, ceiling: NoiseCeiling) -> ScoreTable:
    """Elementwise rho / rho_max; parcels with a flagged ceiling go NaN."""
    if ceiling.rho_max.shape[0] != table.scores.shape[1]:
        raise EvalError(
            f"ceiling covers {ceiling.rho_max.shape[0]} parcels, "
            f"table has {table.scores.shape[1]}"
        )
    with np.errstate(invalid="ignore"):
        normed = table.scores / ceiling.rho_max[None, :]
    meta = dict(table.metadata)
    meta["normalized"] = True
    meta["ceiling_flagged"] = ceiling.num_flagged
    return ScoreTable.from_scores(normed, meta)


# ---------------------------------------------------------------------------
# probing
# ---------------------------------------------------------------------------

@dataclass
class ProbeResult:
    tables: dict  # modality -> ScoreTable
    solo: dict  # modality -> [P] subject-averaged scores
    argmax: list  # [P] modality names
    rgb: np.ndarray  # [P, 3] in MODALITIES order, min-subtracted, clipped to [0,1]


def probe_modalities(
    net: TribeNet,
    sessions: list[SessionTensors],
    trained_with_dropout: bool | None = None,
) -> ProbeResult:
    """Score the model with every modality but one masked, per modality.

    The per-parcel RGB triple is the (text, audio, video) solo scores with
    the smallest of the three subtracted, clipped to [0, 1].
    """
    if trained_with_dropout is False:
        warnings.warn(
            "probing a model trained without modality dropout; solo-modality "
            "inputs are far off its training distribution",
            stacklevel=2,
        )
    names = net.config.modality_names
    if len(names) < 2:
        raise EvalError("probing needs a model with >= 2 modalities")
    tables = {}
    solo = {}
    for m in names:
        mask = ModalityMask(frozenset(n for n in names if n != m))
        tables[m] = score_sessions(net, sessions, mask, metadata={"solo": m})
        solo[m] = tables[m].parcel_means()
    num_parcels = net.config.num_parcels
    stacked = np.stack([solo[m] for m in names])  # [len(names), P]
    winners = np.argmax(np.where(np.isfinite(stacked), stacked, -np.inf), axis=0)
    argmax = [names[w] for w in winners]
    rgb = np.zeros((num_parcels, 3))
    present = [i for i, m in enumerate(MODALITIES) if m in solo]
    vals = np.stack([solo[MODALITIES[i]] for i in present])  # [k, P]
    vals = np.where(np.isfinite(vals), vals, 0.0)
    vals = vals - vals.min(axis=0, keepdims=True)
    for row, i in enumerate(present):
        rgb[:, i] = np.clip(vals[row], 0.0, 1.0)
    return ProbeResult(tables=tables, solo=solo, argmax=argmax, rgb=rgb)


# ---------------------------------------------------------------------------
# ablation suites
# ---------------------------------------------------------------------------

ABLATION_SUITES = (
    "modality_subsets",
    "single_subject",
    "no_transformer",
    "sessions_scaling",
)


def _subset_name(subset: tuple[str, ...]) -> str:
    return "+".join(m for m in MODALITIES if m in subset)


def _restrict_train_videos(manifest: DatasetManifest, videos: set) -> DatasetManifest:
    sessions = [
        s
        for s in manifest.sessions
        if s.split != "train" or s.video_id in videos
    ]
    return DatasetManifest(
        modalities=list(manifest.modalities),
        bold=manifest.bold,
        subjects=list(manifest.subjects),
        sessions=sessions,
        root=manifest.root,
    )


def run_ablation(
    suite: str,
    manifest: DatasetManifest,
    group_spec: LayerGroupSpec,
    net_overrides: dict,
    train_config,
    seeds: tuple[int, ...] = (0, 1, 2),
    session_counts: tuple[int, ...] = (2, 4, 8, 16),
    out_path: Path | str | None = None,
) -> dict:
    """Train/evaluate one ablation suite over shared seeds.

    Returns {"suite", "rows": [{condition, seed, subject_id, mean_score}],
    "summary": {condition: mean over seeds}}; optionally writes the rows as
    CSV. net_overrides are keyword overrides for make_net_config, shared by
    every condition (the condition itself adds/changes what it ablates).
    """
    from . import trainer  # local import; trainer depends on this module

    if suite not in ABLATION_SUITES:
        raise EvalError(f"unknown suite {suite!r}, expected one of {ABLATION_SUITES}")

    def one_run(seed, condition, *, modalities=None, subjects=None, use_manifest=None, extra=None):
        mfst = use_manifest if use_manifest is not None else manifest
        overrides = dict(net_overrides)
        if modalities is not None:
            overrides["modalities"] = modalities
        if extra:
            overrides.update(extra)
        net_config = trainer.make_net_config(mfst, group_spec, **overrides)
        result = trainer.train(
            mfst,
            group_spec,
            net_config,
            replace(train_config, seed=seed),
            subjects=subjects,
        )
        val_sessions = assemble_split(mfst, "val", group_spec, subjects)
        table = score_sessions(result.net, val_sessions)
        rows = []
        for s, subj in enumerate(mfst.subjects):
            if subjects is not None and subj not in subjects:
                continue
            if np.isfinite(table.per_subject_mean[s]):
                rows.append(
                    {
                        "condition": condition,
                        "seed": seed,
                        "subject_id": subj,
                        "mean_score": float(table.per_subject_mean[s]),
                    }
                )
        return rows, float(table.mean_score)

    rows: list[dict] = []
    summary_acc: dict[str, list[float]] = {}

    def record(condition, seed_rows, mean):
        rows.extend(seed_rows)
        summary_acc.setdefault(condition, []).append(mean)

    for seed in seeds:
        if suite == "modality_subsets":
            names = tuple(m.name for m in manifest.modalities)
            subsets = []
            for k in range(1, len(names) + 1):
                subsets += list(combinations(names, k))
            for subset in subsets:
                cond = _subset_name(subset)
                seed_rows, mean = one_run(seed, cond, modalities=list(subset))
                record(cond, seed_rows, mean)
        elif suite == "single_subject":
            seed_rows, mean = one_run(seed, "multi")
            record("multi", seed_rows, mean)
            singles = []
            for subj in manifest.subjects:
                seed_rows, mean = one_run(seed, "single", subjects=[subj])
                rows.extend(seed_rows)
                singles.append(mean)
            summary_acc.setdefault("single", []).append(float(np.mean(singles)))
        elif suite == "no_transformer":
            seed_rows, mean = one_run(seed, "full")
            record("full", seed_rows, mean)
            seed_rows, mean = one_run(
                seed, "no_transformer", extra={"num_layers": 0}
            )
            record("no_transformer", seed_rows, mean)
        elif suite == "sessions_scaling":
            train_videos = sorted(
                {s.video_id for s in manifest.split_sessions("train")}
            )
            for count in session_counts:
                if count > len(train_videos):
                    continue
                sub = _restrict_train_videos(manifest, set(train_videos[:count]))
                cond = f"sessions={count}"
                seed_rows, mean = one_run(seed, cond, use_manifest=sub)
                record(cond, seed_rows, mean)

    summary = {cond: float(np.mean(vals)) for cond, vals in summary_acc.items()}
    report = {"suite": suite, "rows": rows, "summary": summary}
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with out_path.open("w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["condition", "seed", "subject_id", "mean_score"]
            )
            writer.writeheader()
            writer.writerows(rows)
    return report


# ---------------------------------------------------------------------------
# report writers
# ---------------------------------------------------------------------------

def write_scores_csv(
    table: ScoreTable,
    path: Path | str,
    ceiling: NoiseCeiling | None = None,
    subjects: list[str] | None = None,
) -> Path:
    """Long-format CSV: parcel_id, subject_id, rho, rho_max, rho_norm."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    num_subjects, num_parcels = table.scores.shape
    names = subjects or [f"subject{s}" for s in range(num_subjects)]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parcel_id", "subject_id", "rho", "rho_max", "rho_norm"])
        for s in range(num_subjects):
            for pid in range(num_parcels):
                rho = table.scores[s, pid]
                if ceiling is not None and np.isfinite(ceiling.rho_max[pid]):
                    rho_max = ceiling.rho_max[pid]
                    rho_norm = rho / rho_max if np.isfinite(rho) else float("nan")
                else:
                    rho_max = float("nan") if ceiling is not None else 1.0
                    rho_norm = rho if ceiling is None else float("nan")
                writer.writerow(
                    [pid, names[s], _fmt(rho), _fmt(rho_max), _fmt(rho_norm)]
                )
    return path


def write_probe_csv(probe: ProbeResult, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    num_parcels = probe.rgb.shape[0]
    cols = {m: probe.solo.get(m) for m in MODALITIES}
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["parcel_id", "rho_text", "rho_audio", "rho_video", "argmax", "r", "g", "b"]
        )
        for pid in range(num_parcels):
            row = [pid]
            for m in MODALITIES:
                row.append(_fmt(cols[m][pid]) if cols[m] is not None else "")
            row.append(probe.argmax[pid])
            row += [_fmt(v) for v in probe.rgb[pid]]
            writer.writerow(row)
    return path


def summarize_scores(table: ScoreTable) -> dict:
    """Mean/median/IQR plus a fixed-width histogram of per-parcel means."""
    parcels = table.parcel_means()
    finite = parcels[np.isfinite(parcels)]
    if finite.size == 0:
        return {"mean": None, "median": None, "iqr": None, "num_flagged": table.num_flagged}
    q25, q50, q75 = np.percentile(finite, [25, 50, 75])
    edges = np.linspace(-1.0, 1.0, 41)
    counts, _ = np.histogram(finite, bins=edges)
    return {
        "mean": float(finite.mean()),
        "median": float(q50),
        "iqr": [float(q25), float(q75)],
        "num_flagged": table.num_flagged,
        "histogram": {
            "bin_edges": [float(e) for e in edges],
            "counts": [int(c) for c in counts],
        },
    }


def _fmt(x) -> str:
    return "nan" if x is None or not np.isfinite(x) else f"{x:.6f}"


def save_summary(table: ScoreTable, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = dict(table.metadata)
    doc.update(summarize_scores(table))
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path
