"""Subject-conditioned multimodal encoder with handwritten gradients.

Pipeline (one window of round(N*TR*f) feature steps per modality):

    zero masked modalities
    -> per-modality linear projection to proj_dim + layer normalization
    -> fuse modalities (concatenate or average)
    -> add positional embedding and per-subject embedding to every timestep
    -> pre-norm transformer encoder (multi-head attention + GELU feedforward)
    -> adaptive average pooling from feature steps down to N TRs
    -> per-subject linear readout to P parcels

Everything is plain numpy. ``forward(train_mode=True)`` caches activations;
``backward`` consumes the cache and produces a gradient for every parameter,
exact up to floating point (checked against central finite differences in the
test suite). No autograd, no framework.

Parameters live in an ordered name->array registry; the order is frozen by
``param_shapes`` and shared by initialization, checkpoints, and the optimizer,
which is what makes training runs bit-reproducible.

Initialization makes the trunk an identity map: attention output projections
and feedforward second layers start at zero, so before the first optimizer
step the network output equals the per-subject readout applied to the
embedded inputs. Gradient tests must therefore randomize all parameters
first or the zero blocks would hide broken chain rules.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .alignment import AlignedWindow, WindowConfig
from .datastore import MODALITIES

LN_EPS = 1e-5
INV_SQRT2 = 1.0 / math.sqrt(2.0)
INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NetError(ValueError):
    pass


@dataclass(frozen=True)
class ModalityMask:
    """Which modalities are zeroed at the input. At least one must survive."""

    masked: frozenset = frozenset()

    def __post_init__(self):
        masked = frozenset(self.masked)
        bad = masked - set(MODALITIES)
        if bad:
            raise NetError(f"unknown modalities in mask: {sorted(bad)}")
        object.__setattr__(self, "masked", masked)

    def is_masked(self, name: str) -> bool:
        return name in self.masked

    def validate_against(self, names: tuple[str, ...]) -> None:
        if all(n in self.masked for n in names):
            raise NetError(f"mask would zero every modality in {names}")

    @staticmethod
    def none() -> "ModalityMask":
        return ModalityMask(frozenset())

    @staticmethod
    def keep_only(name: str) -> "ModalityMask":
        if name not in MODALITIES:
            raise NetError(f"unknown modality {name!r}")
        return ModalityMask(frozenset(m for m in MODALITIES if m != name))


@dataclass(frozen=True)
class NetConfig:
    feature_dims: dict  # modality -> flattened layer-grouped input width
    proj_dim: int = 1024  # D
    num_layers: int = 8  # 0 = identity trunk: projection -> pool -> readout
    num_heads: int = 8
    feedforward_mult: int = 4
    num_parcels: int = 1000
    num_subjects: int = 1
    modality_aggregation: str = "concatenate"  # or "average"
    use_subject_embedding: bool = True
    window: WindowConfig = field(default_factory=WindowConfig)

    def __post_init__(self):
        names = self.modality_names
        if not names:
            raise NetError("feature_dims must name at least one known modality")
        unknown = set(self.feature_dims) - set(MODALITIES)
        if unknown:
            raise NetError(f"unknown modalities {sorted(unknown)}")
        if self.modality_aggregation not in ("concatenate", "average"):
            raise NetError(f"bad modality_aggregation {self.modality_aggregation!r}")
        if min(self.proj_dim, self.num_heads, self.feedforward_mult) <= 0:
            raise NetError("proj_dim, num_heads, feedforward_mult must be > 0")
        if self.num_layers < 0:
            raise NetError("num_layers must be >= 0")
        if min(self.num_parcels, self.num_subjects) <= 0:
            raise NetError("num_parcels and num_subjects must be > 0")
        if self.hidden_size % self.num_heads != 0:
            raise NetError(
                f"hidden size {self.hidden_size} not divisible by "
                f"{self.num_heads} heads"
            )

    @property
    def modality_names(self) -> tuple[str, ...]:
        # fixed fusion order regardless of dict insertion order
        return tuple(m for m in MODALITIES if m in self.feature_dims)

    @property
    def hidden_size(self) -> int:
        if self.modality_aggregation == "concatenate":
            return len(self.modality_names) * self.proj_dim
        return self.proj_dim

    def to_json(self) -> dict:
        return {
            "feature_dims": {m: int(self.feature_dims[m]) for m in self.modality_names},
            "proj_dim": self.proj_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "feedforward_mult": self.feedforward_mult,
            "num_parcels": self.num_parcels,
            "num_subjects": self.num_subjects,
            "modality_aggregation": self.modality_aggregation,
            "use_subject_embedding": self.use_subject_embedding,
            "window": {
                "trs_per_window": self.window.trs_per_window,
                "tr_seconds": self.window.tr_seconds,
                "frequency_hz": self.window.frequency_hz,
                "jitter_s": self.window.jitter_s,
            },
        }

    @staticmethod
    def from_json(doc: dict) -> "NetConfig":
        w = doc["window"]
        return NetConfig(
            feature_dims=dict(doc["feature_dims"]),
            proj_dim=int(doc["proj_dim"]),
            num_layers=int(doc["num_layers"]),
            num_heads=int(doc["num_heads"]),
            feedforward_mult=int(doc["feedforward_mult"]),
            num_parcels=int(doc["num_parcels"]),
            num_subjects=int(doc["num_subjects"]),
            modality_aggregation=doc["modality_aggregation"],
            use_subject_embedding=bool(doc["use_subject_embedding"]),
            window=WindowConfig(
                trs_per_window=int(w["trs_per_window"]),
                tr_seconds=float(w["tr_seconds"]),
                frequency_hz=float(w["frequency_hz"]),
                jitter_s=float(w["jitter_s"]),
            ),
        )


def param_shapes(config: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """The frozen parameter registry: (name, shape) in a fixed order."""
    d = config.proj_dim
    h = config.hidden_size
    s = config.window.window_steps
    wide = config.feedforward_mult * h
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for m in config.modality_names:
        f = config.feature_dims[m]
        shapes += [
            (f"proj.{m}.W", (f, d)),
            (f"proj.{m}.b", (d,)),
            (f"proj.{m}.ln.gamma", (d,)),
            (f"proj.{m}.ln.beta", (d,)),
        ]
    if config.num_layers > 0:
        shapes.append(("pos", (s, h)))
        if config.use_subject_embedding:
            shapes.append(("subj", (config.num_subjects, h)))
        for i in range(config.num_layers):
            p = f"block{i}"
            shapes += [
                (f"{p}.ln1.gamma", (h,)),
                (f"{p}.ln1.beta", (h,)),
                (f"{p}.attn.Wq", (h, h)),
                (f"{p}.attn.bq", (h,)),
                (f"{p}.attn.Wk", (h, h)),
                (f"{p}.attn.bk", (h,)),
                (f"{p}.attn.Wv", (h, h)),
                (f"{p}.attn.bv", (h,)),
                (f"{p}.attn.Wo", (h, h)),
                (f"{p}.attn.bo", (h,)),
                (f"{p}.ln2.gamma", (h,)),
                (f"{p}.ln2.beta", (h,)),
                (f"{p}.ff.W1", (h, wide)),
                (f"{p}.ff.b1", (wide,)),
                (f"{p}.ff.W2", (wide, h)),
                (f"{p}.ff.b2", (h,)),
            ]
    shapes += [
        ("readout.W", (config.num_subjects, h, config.num_parcels)),
        ("readout.b", (config.num_subjects, config.num_parcels)),
    ]
    return shapes


def count_params(config: NetConfig) -> int:
    return sum(math.prod(shape) for _, shape in param_shapes(config))


# ---------------------------------------------------------------------------
# primitive layers (forward + backward pairs)
# ---------------------------------------------------------------------------

def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def layer_norm_backward(dy: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv, gamma = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def gelu(x: np.ndarray):
    cdf = 0.5 * (1.0 + erf(x * INV_SQRT2))
    return x * cdf, (x, cdf)


def gelu_backward(dy: np.ndarray, cache) -> np.ndarray:
    x, cdf = cache
    pdf = np.exp(-0.5 * x * x) * INV_SQRT2PI
    return dy * (cdf + x * pdf)


def softmax_lastaxis(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def pool_segments(t_in: int, out_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Row ranges of the overlapping-segment pooling rule."""
    if out_len <= 0:
        raise NetError(f"out_len must be > 0, got {out_len}")
    if out_len > t_in:
        raise NetError(f"cannot pool {t_in} steps up to {out_len}")
    idx = np.arange(out_len)
    los = (t_in * idx) // out_len
    his = -((-t_in * (idx + 1)) // out_len)  # ceil division
    return los, his


def adaptive_avg_pool(x: np.ndarray, out_len: int) -> np.ndarray:
    """Pool rows of [T_in, C]: segment i = mean of rows [floor(T*i/o), ceil(T*(i+1)/o))."""
    los, his = pool_segments(x.shape[0], out_len)
    return np.stack([x[lo:hi].mean(axis=0) for lo, hi in zip(los, his)])


def _pool_batch(x: np.ndarray, out_len: int):
    los, his = pool_segments(x.shape[1], out_len)
    out = np.stack(
        [x[:, lo:hi].mean(axis=1) for lo, hi in zip(los, his)], axis=1
    )
    return out, (x.shape[1], los, his)


def _pool_batch_backward(dy: np.ndarray, cache) -> np.ndarray:
    t_in, los, his = cache
    dx = np.zeros(dy.shape[:1] + (t_in,) + dy.shape[2:], dtype=dy.dtype)
    for i, (lo, hi) in enumerate(zip(los, his)):
        dx[:, lo:hi] += dy[:, i : i + 1] / (hi - lo)
    return dx


def _linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w + b


def _linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    dw = np.tensordot(x, dy, axes=([0, 1], [0, 1]))
    db = dy.sum(axis=(0, 1))
    dx = dy @ w.T
    return dx, dw, db


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

@dataclass
class TribeNet:
    config: NetConfig
    params: dict  # name -> np.ndarray, ordered per param_shapes

    @staticmethod
    def init(config: NetConfig, seed: int, dtype=np.float32) -> "TribeNet":
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        for name, shape in param_shapes(config):
            leaf = name.rsplit(".", maxsplit=1)[-1]
            if leaf in ("W", "Wq", "Wk", "Wv", "W1"):
                fan_in = shape[-2]
                bound = 1.0 / math.sqrt(fan_in)
                arr = rng.uniform(-bound, bound, size=shape)
            elif leaf in ("Wo", "W2"):
                arr = np.zeros(shape)  # identity trunk at init
            elif leaf == "gamma":
                arr = np.ones(shape)
            elif name in ("pos", "subj"):
                arr = rng.normal(0.0, 0.02, size=shape)
            else:  # all biases and ln beta
                arr = np.zeros(shape)
            params[name] = np.ascontiguousarray(arr, dtype=dtype)
        return TribeNet(config=config, params=params)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def randomize(self, seed: int, scale: float = 0.1) -> None:
        """Overwrite every parameter with small random values (gradient tests).

        The zero-initialized blocks (Wo, W2) block gradient flow at init;
        checks must run at a generic point in parameter space.
        """
        rng = np.random.default_rng(seed)
        for name in self.params:
            self.params[name] = rng.normal(
                0.0, scale, size=self.params[name].shape
            ).astype(self.dtype)
        # keep normalization gains near 1 so activations stay well-scaled
        for name in self.params:
            if name.endswith("gamma"):
                self.params[name] += np.asarray(1.0, dtype=self.dtype)

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        inputs: dict,
        subject_indices: np.ndarray,
        mask: ModalityMask | None = None,
        train_mode: bool = False,
    ):
        """Predict [B, N, P] from per-modality [B, S, F_m] inputs.

        Returns (predictions, cache); cache is None unless train_mode.
        """
        cfg = self.config
        names = cfg.modality_names
        mask = mask or ModalityMask.none()
        mask.validate_against(names)
        subject_indices = np.asarray(subject_indices)
        if subject_indices.ndim != 1:
            raise NetError("subject_indices must be 1-D")
        if subject_indices.size and subject_indices.max() >= cfg.num_subjects:
            raise NetError(
                f"subject index {int(subject_indices.max())} out of range "
                f"for {cfg.num_subjects} subjects"
            )
        s = cfg.window.window_steps
        dtype = self.dtype
        p = self.params

        proj_cache = {}
        fused_parts = []
        for m in names:
            if m not in inputs:
                raise NetError(f"missing modality {m!r} in inputs")
            x = np.ascontiguousarray(inputs[m], dtype=dtype)
            if x.ndim != 3 or x.shape[1] != s or x.shape[2] != cfg.feature_dims[m]:
                raise NetError(
                    f"{m} input shape {x.shape} != (B, {s}, {cfg.feature_dims[m]})"
                )
            if mask.is_masked(m):
                x = np.zeros_like(x)
            h = _linear(x, p[f"proj.{m}.W"], p[f"proj.{m}.b"])
            hn, ln_cache = layer_norm(h, p[f"proj.{m}.ln.gamma"], p[f"proj.{m}.ln.beta"])
            fused_parts.append(hn)
            proj_cache[m] = (x, ln_cache)

        if cfg.modality_aggregation == "concatenate":
            z = np.concatenate(fused_parts, axis=-1)
        else:
            z = np.mean(np.stack(fused_parts, axis=0), axis=0)

        if cfg.num_layers > 0:
            z = z + p["pos"][None]
            if cfg.use_subject_embedding:
                z = z + p["subj"][subject_indices][:, None, :]

        block_caches = []
        for i in range(cfg.num_layers):
            z, bc = self._block_forward(i, z)
            block_caches.append(bc)

        pooled, pool_cache = _pool_batch(z, cfg.window.trs_per_window)

        w_r = p["readout.W"][subject_indices]  # [B, H, P]
        b_r = p["readout.b"][subject_indices]  # [B, P]
        y = np.einsum("bnh,bhp->bnp", pooled, w_r) + b_r[:, None, :]

        if not train_mode:
            return y, None
        cache = {
            "proj": proj_cache,
            "blocks": block_caches,
            "pool": pool_cache,
            "pooled": pooled,
            "subject_indices": subject_indices,
            "mask": mask,
            "batch": subject_indices.shape[0],
        }
        return y, cache

    def _block_forward(self, i: int, z: np.ndarray):
        p = self.params
        cfg = self.config
        pre = f"block{i}"
        nh = cfg.num_heads
        h = cfg.hidden_size
        dh = h // nh
        b, s, _ = z.shape

        a, ln1_cache = layer_norm(z, p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"])
        q = _linear(a, p[f"{pre}.attn.Wq"], p[f"{pre}.attn.bq"])
        k = _linear(a, p[f"{pre}.attn.Wk"], p[f"{pre}.attn.bk"])
        v = _linear(a, p[f"{pre}.attn.Wv"], p[f"{pre}.attn.bv"])
        qh = q.reshape(b, s, nh, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(b, s, nh, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(b, s, nh, dh).transpose(0, 2, 1, 3)
        scores = qh @ kh.swapaxes(-1, -2) / math.sqrt(dh)
        attn = softmax_lastaxis(scores)
        ctx = (attn @ vh).transpose(0, 2, 1, 3).reshape(b, s, h)
        o = _linear(ctx, p[f"{pre}.attn.Wo"], p[f"{pre}.attn.bo"])
        z1 = z + o

        g, ln2_cache = layer_norm(z1, p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"])
        u = _linear(g, p[f"{pre}.ff.W1"], p[f"{pre}.ff.b1"])
        act, gelu_cache = gelu(u)
        f = _linear(act, p[f"{pre}.ff.W2"], p[f"{pre}.ff.b2"])
        z2 = z1 + f

        return z2, {
            "ln1": ln1_cache,
            "a": a,
            "qh": qh,
            "kh": kh,
            "vh": vh,
            "attn": attn,
            "ctx": ctx,
            "ln2": ln2_cache,
            "g": g,
            "gelu": gelu_cache,
            "act": act,
        }

    # -- backward -----------------------------------------------------------

    def backward(self, cache: dict, dy: np.ndarray) -> dict:
        """Gradient of a scalar loss wrt every parameter, given dLoss/dPredictions."""
        if cache is None:
            raise NetError("backward needs the cache from forward(train_mode=True)")
        cfg = self.config
        p = self.params
        grads = {name: np.zeros_like(arr) for name, arr in self.params.items()}
        subject_indices = cache["subject_indices"]
        pooled = cache["pooled"]

        dy = np.ascontiguousarray(dy, dtype=self.dtype)
        w_r = p["readout.W"][subject_indices]
        dpooled = np.einsum("bnp,bhp->bnh", dy, w_r)
        dw_r = np.einsum("bnh,bnp->bhp", pooled, dy)
        db_r = dy.sum(axis=1)
        np.add.at(grads["readout.W"], subject_indices, dw_r)
        np.add.at(grads["readout.b"], subject_indices, db_r)

        dz = _pool_batch_backward(dpooled, cache["pool"])

        for i in reversed(range(cfg.num_layers)):
            dz = self._block_backward(i, dz, cache["blocks"][i], grads)

        if cfg.num_layers > 0:
            grads["pos"] += dz.sum(axis=0)
            if cfg.use_subject_embedding:
                np.add.at(grads["subj"], subject_indices, dz.sum(axis=1))

        names = cfg.modality_names
        if cfg.modality_aggregation == "concatenate":
            d = cfg.proj_dim
            parts = [dz[..., j * d : (j + 1) * d] for j in range(len(names))]
        else:
            parts = [dz / len(names)] * len(names)

        for m, dhn in zip(names, parts):
            x, ln_cache = cache["proj"][m]
            dh, dgamma, dbeta = layer_norm_backward(dhn, ln_cache)
            grads[f"proj.{m}.ln.gamma"] += dgamma
            grads[f"proj.{m}.ln.beta"] += dbeta
            _, dw, db = _linear_backward(dh, x, p[f"proj.{m}.W"])
            grads[f"proj.{m}.W"] += dw
            grads[f"proj.{m}.b"] += db
        return grads

    def _block_backward(self, i: int, dz2: np.ndarray, bc: dict, grads: dict) -> np.ndarray:
        p = self.params
        cfg = self.config
        pre = f"block{i}"
        nh = cfg.num_heads
        h = cfg.hidden_size
        dh = h // nh
        b, s, _ = dz2.shape

        # feedforward branch: z2 = z1 + W2' gelu(W1' ln2(z1))
        dact, dw2, db2 = _linear_backward(dz2, bc["act"], p[f"{pre}.ff.W2"])
        grads[f"{pre}.ff.W2"] += dw2
        grads[f"{pre}.ff.b2"] += db2
        du = gelu_backward(dact, bc["gelu"])
        dg, dw1, db1 = _linear_backward(du, bc["g"], p[f"{pre}.ff.W1"])
        grads[f"{pre}.ff.W1"] += dw1
        grads[f"{pre}.ff.b1"] += db1
        dz1_ln, dgamma2, dbeta2 = layer_norm_backward(dg, bc["ln2"])
        grads[f"{pre}.ln2.gamma"] += dgamma2
        grads[f"{pre}.ln2.beta"] += dbeta2
        dz1 = dz2 + dz1_ln

        # attention branch: z1 = z + Wo' ctx(ln1(z))
        dctx, dwo, dbo = _linear_backward(dz1, bc["ctx"], p[f"{pre}.attn.Wo"])
        grads[f"{pre}.attn.Wo"] += dwo
        grads[f"{pre}.attn.bo"] += dbo
        dctx_h = dctx.reshape(b, s, nh, dh).transpose(0, 2, 1, 3)
        dattn = dctx_h @ bc["vh"].swapaxes(-1, -2)
        dvh = bc["attn"].swapaxes(-1, -2) @ dctx_h
        dscores = softmax_backward(dattn, bc["attn"]) / math.sqrt(dh)
        dqh = dscores @ bc["kh"]
        dkh = dscores.swapaxes(-1, -2) @ bc["qh"]

        dq = dqh.transpose(0, 2, 1, 3).reshape(b, s, h)
        dk = dkh.transpose(0, 2, 1, 3).reshape(b, s, h)
        dv = dvh.transpose(0, 2, 1, 3).reshape(b, s, h)
        da = np.zeros_like(bc["a"])
        for dout, tag in ((dq, "Wq|bq"), (dk, "Wk|bk"), (dv, "Wv|bv")):
            wname, bname = tag.split("|")
            dx, dw, db = _linear_backward(dout, bc["a"], p[f"{pre}.attn.{wname}"])
            grads[f"{pre}.attn.{wname}"] += dw
            grads[f"{pre}.attn.{bname}"] += db
            da += dx
        dz_ln, dgamma1, dbeta1 = layer_norm_backward(da, bc["ln1"])
        grads[f"{pre}.ln1.gamma"] += dgamma1
        grads[f"{pre}.ln1.beta"] += dbeta1
        return dz1 + dz_ln

    # -- conveniences ---------------------------------------------------------

    def predict_window(self, window: AlignedWindow, mask: ModalityMask | None = None) -> np.ndarray:
        inputs = {m: v[None] for m, v in window.inputs.items()}
        y, _ = self.forward(
            inputs, np.array([window.subject_index]), mask=mask, train_mode=False
        )
        return y[0]

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n, _ in param_shapes(self.config)])

    def load_flat(self, vec: np.ndarray) -> None:
        off = 0
        for name, shape in param_shapes(self.config):
            size = math.prod(shape)
            self.params[name] = (
                np.asarray(vec[off : off + size], dtype=self.dtype).reshape(shape).copy()
            )
            off += size
        if off != vec.size:
            raise NetError(f"flat vector has {vec.size} elements, registry needs {off}")


def stack_windows(windows: list[AlignedWindow]):
    """Batch windows into forward() inputs: (inputs, subject_indices, targets)."""
    if not windows:
        raise NetError("empty window batch")
    names = windows[0].inputs.keys()
    inputs = {m: np.stack([w.inputs[m] for w in windows]) for m in names}
    subject_indices = np.array([w.subject_index for w in windows], dtype=np.int64)
    targets = None
    if all(w.targets is not None for w in windows):
        targets = np.stack([w.targets for w in windows])
    return inputs, subject_indices, targets


# ---------------------------------------------------------------------------
# checkpoints: sidecar JSON (config + registry) + flat little-endian f32 blob
# ---------------------------------------------------------------------------

def save_checkpoint(net: TribeNet, stem: Path | str) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    registry = []
    offset = 0
    chunks = []
    for name, shape in param_shapes(net.config):
        arr = np.ascontiguousarray(net.params[name], dtype=np.dtype("<f4"))
        registry.append({"name": name, "shape": list(shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    doc = {"config": net.config.to_json(), "params": registry, "total_bytes": offset}
    stem.with_suffix(".json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    stem.with_suffix(".f32").write_bytes(b"".join(chunks))
    return stem


def load_checkpoint(stem: Path | str, dtype=np.float32) -> TribeNet:
    stem = Path(stem)
    doc = json.loads(stem.with_suffix(".json").read_text())
    config = NetConfig.from_json(doc["config"])
    blob = stem.with_suffix(".f32").read_bytes()
    if len(blob) != doc["total_bytes"]:
        raise NetError(
            f"checkpoint blob is {len(blob)} bytes, sidecar declares {doc['total_bytes']}"
        )
    expected = {name: shape for name, shape in param_shapes(config)}
    params: dict[str, np.ndarray] = {}
    for entry in doc["params"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in expected or expected[name] != shape:
            raise NetError(f"checkpoint parameter {name} {shape} not in registry")
        size = math.prod(shape)
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(shape)
        params[name] = np.ascontiguousarray(arr, dtype=dtype)
    missing = set(expected) - set(params)
    if missing:
        raise NetError(f"checkpoint missing parameters: {sorted(missing)}")
    ordered = {name: params[name] for name, _ in param_shapes(config)}
    return TribeNet(config=config, params=ordered)
