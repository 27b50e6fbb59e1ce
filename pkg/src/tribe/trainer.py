"""Training loop: jittered window sampling, modality dropout, AdamW with
linear-warmup cosine decay, early stopping on validation Pearson, and
stochastic weight averaging.

The loop is deliberately plain: one numpy RNG seeded from TrainConfig.seed
drives shuffling, jitter, and modality dropout in a fixed draw order, so two
runs with the same seed produce bit-identical checkpoints and logs. Logs are
JSON lines without timestamps for the same reason.

Modality dropout is sampled per window, not per batch: each window in a
batch gets its own mask, applied by zeroing that window's input rows before
the forward pass (equivalent to masking inside the network, since the
projection is linear and windows do not interact before the readout).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluator
from .alignment import (
    LayerGroupSpec,
    SessionTensors,
    WindowConfig,
    assemble_split,
    extract_window,
    feature_dims,
    training_starts,
)
from .datastore import MODALITIES, DatasetManifest
from .tribenet import (
    ModalityMask,
    NetConfig,
    TribeNet,
    save_checkpoint,
    stack_windows,
)

LOSSES = ("mse", "pearson", "smooth_l1", "huber")
PEARSON_VAR_FLOOR = 1e-20


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 16
    lr_peak: float = 1e-4
    warmup_fraction: float = 0.1
    weight_decay: float = 0.0
    modality_dropout_p: float = 0.2
    swa_start_epoch: int = 8  # 1-indexed epoch at which averaging begins
    early_stop_patience: int = 3
    loss: str = "mse"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.modality_dropout_p < 1:
            raise TrainError(f"modality_dropout_p must be in [0, 1): {self.modality_dropout_p}")
        if not 1 <= self.swa_start_epoch <= self.epochs:
            raise TrainError(
                f"swa_start_epoch {self.swa_start_epoch} outside [1, {self.epochs}]"
            )
        if self.loss not in LOSSES:
            raise TrainError(f"unknown loss {self.loss!r}, expected one of {LOSSES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_fraction <= 1:
            raise TrainError(f"warmup_fraction must be in [0, 1]: {self.warmup_fraction}")

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr_peak": self.lr_peak,
            "warmup_fraction": self.warmup_fraction,
            "weight_decay": self.weight_decay,
            "modality_dropout_p": self.modality_dropout_p,
            "swa_start_epoch": self.swa_start_epoch,
            "early_stop_patience": self.early_stop_patience,
            "loss": self.loss,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(doc: dict) -> "TrainConfig":
        return TrainConfig(**doc)


# ---------------------------------------------------------------------------
# modality dropout
# ---------------------------------------------------------------------------

def sample_modality_mask(
    p: float, rng: np.random.Generator, names: tuple[str, ...] = MODALITIES
) -> ModalityMask:
    """Mask each modality independently with probability p; if the draw masks
    all of them, unmask one chosen uniformly."""
    if not 0 <= p < 1:
        raise TrainError(f"p must be in [0, 1): {p}")
    draws = rng.random(len(names)) < p
    if draws.all():
        draws[rng.integers(len(names))] = False
    return ModalityMask(frozenset(n for n, m in zip(names, draws) if m))


# ---------------------------------------------------------------------------
# losses (value + gradient wrt predictions)
# ---------------------------------------------------------------------------

def _mse(pred: np.ndarray, target: np.ndarray):
    diff = pred - target
    value = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return value, grad


def _smooth_l1(pred: np.ndarray, target: np.ndarray, delta: float = 1.0):
    diff = pred - target
    absd = np.abs(diff)
    quad = absd <= delta
    value = float(
        np.mean(np.where(quad, 0.5 * diff * diff, delta * (absd - 0.5 * delta)))
    )
    grad = np.where(quad, diff, delta * np.sign(diff)) / diff.size
    return value, grad


def _pearson_loss(pred: np.ndarray, target: np.ndarray):
    """1 - mean Pearson along the time axis, over (batch, parcel) pairs.

    Zero-variance pairs contribute correlation 0 (loss 1) with zero gradient.
    """
    if pred.shape[1] < 2:
        raise TrainError(f"pearson loss needs >= 2 TRs per window, got {pred.shape[1]}")
    u = pred - pred.mean(axis=1, keepdims=True)
    v = target - target.mean(axis=1, keepdims=True)
    bu = (u * u).sum(axis=1, keepdims=True)
    bv = (v * v).sum(axis=1, keepdims=True)
    cov = (u * v).sum(axis=1, keepdims=True)
    ok = (bu > PEARSON_VAR_FLOOR) & (bv > PEARSON_VAR_FLOOR)
    denom = np.sqrt(np.where(ok, bu * bv, 1.0))
    rho = np.where(ok, cov / denom, 0.0)
    npairs = pred.shape[0] * pred.shape[2]
    value = float(1.0 - rho.sum() / npairs)
    # d rho / d u = v/sqrt(bu*bv) - rho*u/bu, then center along time
    g = np.where(ok, v / denom - rho * u / np.where(ok, bu, 1.0), 0.0)
    g = g - g.mean(axis=1, keepdims=True) * ok
    grad = -g / npairs
    return value, grad


def compute_loss(pred: np.ndarray, target: np.ndarray, kind: str):
    """Scalar loss and its gradient wrt pred, both over [B, N, P] tensors."""
    if pred.shape != target.shape:
        raise TrainError(f"shape mismatch {pred.shape} vs {target.shape}")
    if kind == "mse":
        return _mse(pred, target)
    if kind in ("smooth_l1", "huber"):  # identical at delta = 1.0
        return _smooth_l1(pred, target)
    if kind == "pearson":
        return _pearson_loss(pred, target)
    raise TrainError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------

def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear 0 -> lr_peak over round(warmup_fraction * total) steps, then
    cosine decay to 0. lr(0) = 0; lr at the warmup boundary = lr_peak."""
    if not 0 <= step < total_steps:
        raise TrainError(f"step {step} outside [0, {total_steps})")
    warmup = round(cfg.warmup_fraction * total_steps)
    if step < warmup:
        return cfg.lr_peak * step / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight decay Adam; update order matches the common torch
    convention: p -= lr*wd*p, then the bias-corrected moment step."""

    def __init__(
        self,
        params: dict,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    net: TribeNet  # the shipped weights (SWA when active, else final)
    final_net: TribeNet
    log: list
    best_val_score: float
    out_dir: Path | None = None
    checkpoints: dict = field(default_factory=dict)


def make_net_config(
    manifest: DatasetManifest, group_spec: LayerGroupSpec, **overrides
) -> NetConfig:
    """NetConfig whose input widths match this manifest under this grouping.

    `modalities` (optional override) restricts the model to a subset of the
    manifest's modalities, for unimodal/bimodal ablations.
    """
    window = overrides.pop("window", None)
    if window is None:
        window = WindowConfig(
            tr_seconds=manifest.bold.tr_seconds, frequency_hz=manifest.frequency_hz
        )
    dims = feature_dims(manifest, group_spec)
    keep = overrides.pop("modalities", None)
    if keep is not None:
        missing = set(keep) - set(dims)
        if missing:
            raise TrainError(f"manifest lacks modalities {sorted(missing)}")
        dims = {m: dims[m] for m in keep}
    return NetConfig(
        feature_dims=dims,
        num_parcels=manifest.bold.num_parcels,
        num_subjects=len(manifest.subjects),
        window=window,
        **overrides,
    )


def _epoch_windows(sessions: list[SessionTensors], n: int) -> list[tuple[int, int]]:
    pairs = []
    for si, sess in enumerate(sessions):
        pairs += [(si, start) for start in training_starts(sess.num_trs, n)]
    return pairs


def _swa_fold(swa: dict, count: int, params: dict) -> int:
    count += 1
    for k, p in params.items():
        swa[k] += (np.asarray(p, dtype=np.float64) - swa[k]) / count
    return count


def _net_with(net: TribeNet, params64: dict) -> TribeNet:
    cast = {k: v.astype(net.dtype) for k, v in params64.items()}
    return TribeNet(config=net.config, params=cast)


def train(
    manifest: DatasetManifest,
    group_spec: LayerGroupSpec,
    net_config: NetConfig,
    train_config: TrainConfig,
    out_dir: Path | str | None = None,
    train_split: str = "train",
    val_split: str = "val",
    subjects: list[str] | None = None,
) -> TrainResult:
    """Train one network; returns SWA/final weights, the log, and paths.

    `subjects` restricts both splits to a subset (single-subject ablations);
    net_config.num_subjects must still equal the full manifest subject count
    so subject indices stay aligned.
    """
    expected = feature_dims(manifest, group_spec)
    if dict(net_config.feature_dims) != {
        m: expected[m] for m in net_config.modality_names
    }:
        raise TrainError(
            f"net feature_dims {net_config.feature_dims} disagree with manifest"
            f"+grouping {expected}"
        )
    train_sessions = assemble_split(manifest, train_split, group_spec, subjects)
    val_sessions = assemble_split(manifest, val_split, group_spec, subjects)

    n = net_config.window.trs_per_window
    window_index = _epoch_windows(train_sessions, n)
    if not window_index:
        raise TrainError(f"no complete {n}-TR training windows in split {train_split!r}")
    steps_per_epoch = math.ceil(len(window_index) / train_config.batch_size)
    total_steps = train_config.epochs * steps_per_epoch

    rng = np.random.default_rng(train_config.seed)
    net = TribeNet.init(net_config, seed=train_config.seed)
    opt = AdamW(net.params, weight_decay=train_config.weight_decay)
    swa = {k: np.zeros(v.shape, dtype=np.float64) for k, v in net.params.items()}
    swa_count = 0
    names = net_config.modality_names

    log: list[dict] = []
    best_val = -np.inf
    since_best = 0
    step = 0
    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(len(window_index))
        jitters = rng.uniform(
            -net_config.window.jitter_s, net_config.window.jitter_s, size=len(order)
        )
        epoch_loss = 0.0
        for lo in range(0, len(order), train_config.batch_size):
            batch_ids = order[lo : lo + train_config.batch_size]
            windows = []
            masks = []
            for wid in batch_ids:
                si, start = window_index[wid]
                windows.append(
                    extract_window(
                        train_sessions[si], net_config.window, start, jitters[wid]
                    )
                )
                masks.append(
                    sample_modality_mask(train_config.modality_dropout_p, rng, names)
                )
            inputs, subject_indices, targets = stack_windows(windows)
            for b, m in enumerate(masks):
                for name in names:
                    if m.is_masked(name):
                        inputs[name][b] = 0.0
            pred, cache = net.forward(inputs, subject_indices, train_mode=True)
            loss, dpred = compute_loss(pred, targets, train_config.loss)
            if not math.isfinite(loss):
                raise TrainError(
                    f"non-finite loss {loss} at epoch {epoch} step {step}; "
                    f"sessions {[windows[i].session_id for i in range(len(windows))]}"
                )
            grads = net.backward(cache, dpred)
            opt.step(net.params, grads, lr_at(step, total_steps, train_config))
            epoch_loss += loss
            step += 1

        if epoch >= train_config.swa_start_epoch:
            swa_count = _swa_fold(swa, swa_count, net.params)
        eval_net = _net_with(net, swa) if swa_count else net
        val_table = evaluator.score_sessions(eval_net, val_sessions)
        val_score = val_table.mean_score
        log.append(
            {
                "epoch": epoch,
                "step": step,
                "lr": lr_at(step - 1, total_steps, train_config),
                "train_loss": epoch_loss / steps_per_epoch,
                "val_pearson": val_score,
                "swa_active": bool(swa_count),
            }
        )
        if val_score > best_val:
            best_val = val_score
            since_best = 0
        else:
            since_best += 1
            if since_best >= train_config.early_stop_patience:
                break

    swa_net = _net_with(net, swa) if swa_count else net
    result = TrainResult(
        net=swa_net,
        final_net=net,
        log=log,
        best_val_score=float(best_val),
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.out_dir = out_dir
        result.checkpoints = {
            "final": save_checkpoint(net, out_dir / "final"),
            "swa": save_checkpoint(swa_net, out_dir / "swa"),
        }
        (out_dir / "log.jsonl").write_text(
            "".join(json.dumps(entry, sort_keys=True) + "\n" for entry in log)
        )
        (out_dir / "train_config.json").write_text(
            json.dumps(train_config.to_json(), indent=1, sort_keys=True)
        )
    return result
