"""Model backends.

Every backend answers with all hidden layers stacked on axis 1 (the
embedding output is layer 0), shaped so the extraction ops never need to
know which model produced them:

- text: ``hidden_states(text) -> ([num_tokens, L, D], token spans)``
- audio: ``frame_features(chunk, sample_rate) -> [num_frames, L, D]`` at the
  model's native frame rate
- video: ``embed_clip(frames) -> [L, D]``, already averaged over patch tokens

The "toy" backends are deterministic references: token vectors come from a
hash of the token string, audio frames from windowed waveform statistics,
video clips from patch statistics. They exist so the whole pipeline can be
tested exactly, without weights. The text toy mixes a running mean of the
preceding tokens into every layer above the embedding, so its outputs are
genuinely context dependent and the context-window tests bite.

Real pretrained models resolve through `hf` (optional torch/transformers).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .config import AudioModelConfig, ExtractorError, TextModelConfig, VideoModelConfig


@dataclass(frozen=True)
class TokenSpan:
    """One token plus its half-open character span in the source text."""

    text: str
    lo: int
    hi: int


def _hash_vector(token: str, dim: int) -> np.ndarray:
    """Map a token string to a fixed pseudo-random vector in ~[-1.7, 1.7]."""
    out = np.empty(dim)
    filled = 0
    salt = 0
    while filled < dim:
        digest = hashlib.sha256(f"{salt}#{token}".encode()).digest()
        take = min(dim - filled, len(digest))
        chunk = np.frombuffer(digest[:take], dtype=np.uint8).astype(np.float64)
        out[filled : filled + take] = (chunk - 127.5) / 73.9
        filled += take
        salt += 1
    return out


class ToyTextBackend:
    """Deterministic causal stand-in for a text model with subword tokens."""

    SPLIT_LEN = 5  # words at least this long become two subword tokens

    def __init__(self, num_layers: int = 4, dim: int = 8):
        self.num_layers = num_layers
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def tokenize(self, text: str) -> list[TokenSpan]:
        spans: list[TokenSpan] = []
        offset = 0
        for word in text.split(" "):
            if word:
                if len(word) >= self.SPLIT_LEN:
                    mid = len(word) // 2
                    spans.append(TokenSpan(word[:mid], offset, offset + mid))
                    spans.append(TokenSpan(word[mid:], offset + mid, offset + len(word)))
                else:
                    spans.append(TokenSpan(word, offset, offset + len(word)))
            offset += len(word) + 1
        return spans

    def _vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            vec = _hash_vector(token, self.dim)
            self._cache[token] = vec
        return vec

    def hidden_states(self, text: str) -> tuple[np.ndarray, list[TokenSpan]]:
        spans = self.tokenize(text)
        if not spans:
            return np.zeros((0, self.num_layers, self.dim)), []
        base = np.stack([self._vector(s.text) for s in spans])
        ctx = np.zeros_like(base)
        if len(spans) > 1:
            csum = np.cumsum(base[:-1], axis=0)
            ctx[1:] = csum / np.arange(1, len(spans))[:, None]
        layers = [base]
        for layer in range(1, self.num_layers):
            gain = 1.0 - layer / (2.0 * self.num_layers)
            mix = layer / self.num_layers
            layers.append(np.tanh(gain * base + mix * ctx))
        return np.stack(layers, axis=1), spans


class ToyAudioBackend:
    """Windowed waveform statistics projected to per-layer features."""

    min_input_s = 1.0  # shorter chunks are zero-padded to this
    native_hz = 50.0  # frame rate of the emitted features

    def __init__(self, num_layers: int = 3, dim: int = 6):
        self.num_layers = num_layers
        self.dim = dim
        rngs = [np.random.default_rng(1000 + l) for l in range(num_layers)]
        self._proj = [r.standard_normal((5, dim)) / np.sqrt(5) for r in rngs]

    def frame_features(self, chunk: np.ndarray, sample_rate: int) -> np.ndarray:
        if chunk.ndim != 1:
            raise ExtractorError(f"expected mono waveform, got shape {chunk.shape}")
        native = self.native_hz
        if sample_rate < native:
            raise ExtractorError(f"sample rate {sample_rate} below frame rate {native}")
        num_frames = int(np.floor(len(chunk) * native / sample_rate))
        if num_frames < 1:
            return np.zeros((0, self.num_layers, self.dim))
        bounds = np.floor(np.arange(num_frames + 1) * sample_rate / native).astype(int)
        counts = np.diff(bounds).astype(np.float64)
        starts = bounds[:-1]
        x = chunk[: bounds[-1]].astype(np.float64)

        sums = np.add.reduceat(x, starts)
        sq = np.add.reduceat(x * x, starts)
        ab = np.add.reduceat(np.abs(x), starts)
        # pairwise stats stay frame-local (no term spans a frame boundary),
        # so chunking at frame-aligned offsets cannot change any value
        cross = np.zeros_like(x)
        cross[1:] = (x[1:] * x[:-1] < 0).astype(np.float64)
        cross[starts] = 0.0
        zc = np.add.reduceat(cross, starts)
        step = np.zeros_like(x)
        step[1:] = np.abs(np.diff(x))
        step[starts] = 0.0
        dv = np.add.reduceat(step, starts)

        mean = sums / counts
        std = np.sqrt(np.maximum(sq / counts - mean**2, 0.0))
        stats = np.stack([mean, std, ab / counts, zc / counts, dv / counts], axis=1)

        layers = [stats @ self._proj[0]]
        for l in range(1, self.num_layers):
            layers.append(np.tanh((1.0 + 0.5 * l) * (stats @ self._proj[l])))
        return np.stack(layers, axis=1)


class ToyVideoBackend:
    """Per-patch color statistics, projected per layer, averaged over patches."""

    PATCH_GRID = 4

    def __init__(self, num_layers: int = 3, dim: int = 5):
        self.num_layers = num_layers
        self.dim = dim
        rngs = [np.random.default_rng(2000 + l) for l in range(num_layers)]
        self._proj = [r.standard_normal((6, dim)) / np.sqrt(6) for r in rngs]

    def embed_clip(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames)
        if frames.ndim != 4 or frames.shape[3] != 3:
            raise ExtractorError(f"expected [n, H, W, 3] frames, got {frames.shape}")
        g = self.PATCH_GRID
        if frames.shape[1] < g or frames.shape[2] < g:
            raise ExtractorError(f"frames {frames.shape[1:3]} smaller than {g}x{g} grid")
        pix = frames.astype(np.float64)
        if np.issubdtype(frames.dtype, np.integer):
            pix /= 255.0
        tokens = []
        for rows in np.array_split(pix, g, axis=1):
            for patch in np.array_split(rows, g, axis=2):
                flat = patch.reshape(patch.shape[0], -1, 3)  # [n, pixels, 3]
                stats = np.concatenate([flat.mean(axis=1), flat.std(axis=1)], axis=1)
                tokens.append(stats)  # [n, 6]
        tok = np.concatenate(tokens, axis=0)  # [n * grid^2, 6]
        layers = [tok @ self._proj[0]]
        for l in range(1, self.num_layers):
            layers.append(np.tanh((1.0 + 0.5 * l) * (tok @ self._proj[l])))
        return np.stack(layers, axis=1).mean(axis=0)  # [L, D]


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------


def _is_toy(model_id: str) -> bool:
    return model_id == "toy" or model_id.startswith("toy-")


def text_backend(config: TextModelConfig):
    if _is_toy(config.model):
        return ToyTextBackend()
    from . import hf

    return hf.HFTextBackend(config.model)


def audio_backend(config: AudioModelConfig):
    if _is_toy(config.model):
        return ToyAudioBackend()
    from . import hf

    return hf.HFAudioBackend(config.model)


def video_backend(config: VideoModelConfig):
    if _is_toy(config.model):
        return ToyVideoBackend()
    from . import hf

    return hf.HFVideoBackend(config.model)
