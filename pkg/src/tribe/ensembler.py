"""Per-parcel softmax ensembling over a sampled hyperparameter grid.

Members are independent training jobs keyed by (seed, grid draw). Member 0
always carries the base configuration; the rest are uniform draws over the
grid cross-product (loss, modality dropout, layer-group anchors, layer
extraction mode, layer aggregation, modality aggregation, subject-embedding
flag). Weights are a softmax over each member's validation score per parcel,
at a fixed temperature, so every parcel picks its own blend.

The full anchor grid includes six-anchor variants; models whose layer count
cannot support a drawn variant fail loudly at sampling time rather than
silently redrawing, to keep draw statistics honest.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensorio, trainer
from .alignment import LayerGroupSpec, assemble_split, layer_groups
from .datastore import DatasetManifest
from .evaluator import ScoreTable, pearson_columns, predict_session, score_sessions
from .tribenet import TribeNet, load_checkpoint

GRID_LOSSES = ("mse", "pearson", "smooth_l1", "huber")
GRID_DROPOUT = (0.0, 0.2, 0.4)
GRID_ANCHORS = (
    (0.5, 0.75, 1.0),
    (0.0, 0.5, 1.0),
    (0.5, 1.0),
    (0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
)
GRID_LAYER_MODE = ("group_by_intervals", "single_layers")
GRID_LAYER_AGG = ("concatenate", "average")
GRID_MODALITY_AGG = ("concatenate", "average")
GRID_SUBJECT_FLAG = (True, False)

BASE_DRAW = {
    "loss": "mse",
    "dropout": 0.2,
    "anchors": (0.5, 0.75, 1.0),
    "layer_mode": "group_by_intervals",
    "layer_agg": "concatenate",
    "modality_agg": "concatenate",
    "subject_flag": True,
}


class EnsembleError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleConfig:
    num_models: int = 8
    temperature: float = 0.3
    seed: int = 0
    losses: tuple = GRID_LOSSES
    dropouts: tuple = GRID_DROPOUT
    anchor_sets: tuple = GRID_ANCHORS
    layer_modes: tuple = GRID_LAYER_MODE
    layer_aggs: tuple = GRID_LAYER_AGG
    modality_aggs: tuple = GRID_MODALITY_AGG
    subject_flags: tuple = GRID_SUBJECT_FLAG

    def __post_init__(self):
        if self.num_models < 1:
            raise EnsembleError("num_models must be >= 1")
        if self.temperature <= 0:
            raise EnsembleError("temperature must be > 0")
        for axis in (
            self.losses,
            self.dropouts,
            self.anchor_sets,
            self.layer_modes,
            self.layer_aggs,
            self.modality_aggs,
            self.subject_flags,
        ):
            if not axis:
                raise EnsembleError("every grid axis must be non-empty")


@dataclass(frozen=True)
class MemberSpec:
    index: int
    group_spec: LayerGroupSpec
    net_config: object  # NetConfig
    train_config: object  # TrainConfig
    draw: dict

    def describe(self) -> dict:
        return {"index": self.index, **_draw_json(self.draw)}


def _draw_json(draw: dict) -> dict:
    out = dict(draw)
    out["anchors"] = list(out["anchors"])
    return out


@dataclass
class EnsembleWeights:
    weights: np.ndarray  # [M, P], columns sum to 1
    member_ids: list


def sample_grid(
    config: EnsembleConfig,
    manifest: DatasetManifest,
    base_net_overrides: dict,
    base_train_config,
) -> list[MemberSpec]:
    """Member 0 = base draw; members 1..M-1 are uniform grid draws.

    Every draw is validated against the manifest's layer counts so an
    unsupported anchor variant fails here, not mid-training.
    """
    rng = np.random.default_rng(config.seed)
    members = []
    for index in range(config.num_models):
        if index == 0:
            draw = dict(BASE_DRAW)
        else:
            draw = {
                "loss": config.losses[rng.integers(len(config.losses))],
                "dropout": config.dropouts[rng.integers(len(config.dropouts))],
                "anchors": config.anchor_sets[rng.integers(len(config.anchor_sets))],
                "layer_mode": config.layer_modes[rng.integers(len(config.layer_modes))],
                "layer_agg": config.layer_aggs[rng.integers(len(config.layer_aggs))],
                "modality_agg": config.modality_aggs[
                    rng.integers(len(config.modality_aggs))
                ],
                "subject_flag": config.subject_flags[
                    rng.integers(len(config.subject_flags))
                ],
            }
        members.append(
            _member_from_draw(index, draw, manifest, base_net_overrides, base_train_config)
        )
    return members


def _member_from_draw(
    index: int,
    draw: dict,
    manifest: DatasetManifest,
    base_net_overrides: dict,
    base_train_config,
) -> MemberSpec:
    group_spec = LayerGroupSpec(
        anchors=tuple(draw["anchors"]),
        mode=draw["layer_mode"],
        aggregation=draw["layer_agg"],
    )
    for meta in manifest.modalities:
        layer_groups(group_spec, meta.num_layers)  # raises on unsupported draws
    overrides = dict(base_net_overrides)
    overrides["modality_aggregation"] = draw["modality_agg"]
    overrides["use_subject_embedding"] = draw["subject_flag"]
    net_config = trainer.make_net_config(manifest, group_spec, **overrides)
    train_config = replace(
        base_train_config,
        loss=draw["loss"],
        modality_dropout_p=draw["dropout"],
        seed=base_train_config.seed + index,
    )
    return MemberSpec(
        index=index,
        group_spec=group_spec,
        net_config=net_config,
        train_config=train_config,
        draw=draw,
    )


# ---------------------------------------------------------------------------
# member training
# ---------------------------------------------------------------------------

def _train_member(args) -> dict:
    """One member job. Registry paths are relative to the ensemble directory
    so a run can be moved or reproduced elsewhere bit-for-bit. Finished
    members (checkpoint + score file already present) are not retrained."""
    manifest_path, member, out_dir = args
    from . import datastore

    out_dir = Path(out_dir)
    member_rel = f"member{member.index:03d}"
    member_dir = out_dir / member_rel
    entry = {
        "index": member.index,
        "checkpoint": f"{member_rel}/swa",
        "score_file": f"{member_rel}/val_scores.f32",
        "draw": _draw_json(member.draw),
        "group_spec": {
            "anchors": list(member.group_spec.anchors),
            "mode": member.group_spec.mode,
            "aggregation": member.group_spec.aggregation,
        },
    }
    done = (member_dir / "swa.json").exists() and (member_dir / "val_scores.f32").exists()
    if done:
        scores = np.asarray(
            tensorio.read_tensor(member_dir / "val_scores.f32"), dtype=np.float64
        )
        entry["mean_val_score"] = float(np.nanmean(scores))
        return entry
    manifest = datastore.load_manifest(manifest_path)
    result = trainer.train(
        manifest, member.group_spec, member.net_config, member.train_config, member_dir
    )
    val_sessions = assemble_split(manifest, "val", member.group_spec)
    table = score_sessions(result.net, val_sessions)
    scores32 = table.parcel_means().astype(np.float32)
    tensorio.write_tensor(member_dir / "val_scores.f32", scores32)
    # mean from the f32 file's values, so resumed registries are byte-identical
    entry["mean_val_score"] = float(np.nanmean(np.asarray(scores32, dtype=np.float64)))
    return entry


def train_members(
    manifest: DatasetManifest,
    members: list[MemberSpec],
    out_dir: Path | str,
    jobs: int = 1,
) -> list[dict]:
    """Train every member, collect per-parcel val scores, write the registry."""
    if manifest.root is None:
        raise EnsembleError("manifest must be loaded from disk (needs a root dir)")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = manifest.root / "manifest.json"
    args = [(manifest_path, m, out_dir) for m in members]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(_train_member, args))
    else:
        entries = [_train_member(a) for a in args]
    entries.sort(key=lambda e: e["index"])
    (out_dir / "registry.json").write_text(
        json.dumps({"members": entries}, indent=1, sort_keys=True)
    )
    return load_registry(out_dir)  # same entries, paths resolved


def load_registry(out_dir: Path | str) -> list[dict]:
    """Registry entries with file paths resolved against the ensemble dir."""
    out_dir = Path(out_dir)
    doc = json.loads((out_dir / "registry.json").read_text())
    entries = doc["members"]
    for e in entries:
        e["checkpoint"] = str(out_dir / e["checkpoint"])
        e["score_file"] = str(out_dir / e["score_file"])
    return entries


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

def fit_weights(val_scores: np.ndarray, temperature: float) -> EnsembleWeights:
    """weights[:, p] = softmax(val_scores[:, p] / temperature)."""
    scores = np.asarray(val_scores, dtype=np.float64)
    if scores.ndim != 2:
        raise EnsembleError(f"val_scores must be [M, P], got {scores.shape}")
    if not np.isfinite(scores).all():
        raise EnsembleError("val_scores must be finite; map flagged parcels to 0 first")
    if temperature <= 0:
        raise EnsembleError("temperature must be > 0")
    z = scores / temperature
    z -= z.max(axis=0, keepdims=True)
    e = np.exp(z)
    weights = e / e.sum(axis=0, keepdims=True)
    return EnsembleWeights(weights=weights, member_ids=list(range(scores.shape[0])))


def collect_val_scores(entries: list[dict]) -> np.ndarray:
    """Stack per-member [P] score files into [M, P]; NaN (flagged) -> 0."""
    rows = [tensorio.read_tensor(Path(e["score_file"])) for e in entries]
    scores = np.stack([np.asarray(r, dtype=np.float64) for r in rows])
    return np.nan_to_num(scores, nan=0.0)


# ---------------------------------------------------------------------------
# blending
# ---------------------------------------------------------------------------

def _load_member_net(entry: dict) -> tuple[TribeNet, LayerGroupSpec]:
    gs = entry["group_spec"]
    group_spec = LayerGroupSpec(
        anchors=tuple(gs["anchors"]), mode=gs["mode"], aggregation=gs["aggregation"]
    )
    return load_checkpoint(entry["checkpoint"]), group_spec


def predict_ensemble(
    entries: list[dict],
    weights: EnsembleWeights,
    manifest: DatasetManifest,
    split: str,
    fit_split: str = "val",
    allow_fit_split: bool = False,
) -> tuple[dict, ScoreTable]:
    """Per-parcel weighted blend of member predictions, then scoring.

    Refuses to evaluate on the split the weights were fitted on unless
    `allow_fit_split` (the resulting table is an optimistic validation
    report, not a held-out estimate).
    """
    if split == fit_split and not allow_fit_split:
        raise EnsembleError(
            f"weights were fitted on split {fit_split!r}; evaluating on it "
            "reports an optimistic score (pass allow_fit_split=True to insist)"
        )
    if weights.weights.shape[0] != len(entries):
        raise EnsembleError(
            f"{weights.weights.shape[0]} weight rows for {len(entries)} members"
        )
    records = manifest.split_sessions(split)
    if not records:
        raise EnsembleError(f"split {split!r} is empty")

    blended: dict[str, np.ndarray] = {}
    truths: dict[str, np.ndarray] = {}
    subject_of: dict[str, int] = {}
    session_cache: dict[tuple, dict] = {}
    for m_idx, entry in enumerate(entries):
        net, group_spec = _load_member_net(entry)
        key = (group_spec.anchors, group_spec.mode, group_spec.aggregation)
        if key not in session_cache:
            sessions = assemble_split(manifest, split, group_spec)
            session_cache[key] = {s.session_id: s for s in sessions}
        w = weights.weights[m_idx]  # [P]
        for record in records:
            sess = session_cache[key][record.session_id]
            pred = predict_session(net, sess)
            if record.session_id not in blended:
                blended[record.session_id] = np.zeros_like(
                    pred, dtype=np.float64
                )
                truths[record.session_id] = sess.bold
                subject_of[record.session_id] = sess.subject_index
            blended[record.session_id] += w[None, :] * pred

    num_subjects = len(manifest.subjects)
    num_parcels = manifest.bold.num_parcels
    scores = np.full((num_subjects, num_parcels), np.nan)
    for s in range(num_subjects):
        ids = [r.session_id for r in records if subject_of[r.session_id] == s]
        if not ids:
            continue
        preds = np.concatenate([blended[i] for i in ids])
        truth = np.concatenate([truths[i] for i in ids])
        scores[s] = pearson_columns(preds, truth)
    table = ScoreTable.from_scores(
        scores, {"split": split, "ensemble_size": len(entries)}
    )
    return blended, table


def save_weights(weights: EnsembleWeights, out_dir: Path | str) -> Path:
    path = Path(out_dir) / "weights.f32"
    tensorio.write_tensor(path, weights.weights.astype(np.float32))
    return path


def load_weights(out_dir: Path | str) -> EnsembleWeights:
    arr = np.asarray(tensorio.read_tensor(Path(out_dir) / "weights.f32"), dtype=np.float64)
    return EnsembleWeights(weights=arr, member_ids=list(range(arr.shape[0])))
