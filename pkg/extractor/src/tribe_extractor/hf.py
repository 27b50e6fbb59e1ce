"""Hugging Face adapters (optional; needs the [hf] extra installed).

Thin wrappers that make pretrained checkpoints look like the backend
protocol in `backends`: all hidden layers stacked on one axis, numpy out.
They download/load weights on construction and run on CPU unless a device
is given. None of this is exercised by the test suite, which runs on the
deterministic toy backends; treat these as the integration path for real
stimulus sets.
"""

from __future__ import annotations

import numpy as np

from .backends import TokenSpan
from .config import ExtractorError


def _require(module: str):
    import importlib

    try:
        return importlib.import_module(module)
    except ImportError as e:
        raise ExtractorError(
            f"backend needs {module!r}; install the [hf] extra"
        ) from e


class HFTextBackend:
    def __init__(self, model_id: str, device: str = "cpu"):
        transformers = _require("transformers")
        self.torch = _require("torch")
        self.tokenizer = transformers.AutoTokenizer.from_pretrained(model_id)
        self.model = transformers.AutoModel.from_pretrained(
            model_id, output_hidden_states=True
        ).to(device).eval()
        self.device = device
        self.num_layers = self.model.config.num_hidden_layers + 1
        self.dim = self.model.config.hidden_size

    def hidden_states(self, text: str) -> tuple[np.ndarray, list[TokenSpan]]:
        enc = self.tokenizer(
            text, return_offsets_mapping=True, return_tensors="pt", truncation=False
        )
        offsets = enc.pop("offset_mapping")[0].tolist()
        with self.torch.no_grad():
            out = self.model(**{k: v.to(self.device) for k, v in enc.items()})
        # hidden_states: tuple of L arrays [1, T, D] -> [T, L, D]
        stack = self.torch.stack(out.hidden_states, dim=2)[0]
        spans = [
            TokenSpan(text[lo:hi], lo, hi) for lo, hi in offsets
        ]
        return stack.cpu().double().numpy(), spans


class HFAudioBackend:
    min_input_s = 0.5
    native_hz = 50.0  # frame rate of wav2vec-style speech encoders

    def __init__(self, model_id: str, device: str = "cpu"):
        transformers = _require("transformers")
        self.torch = _require("torch")
        self.processor = transformers.AutoProcessor.from_pretrained(model_id)
        self.model = transformers.AutoModel.from_pretrained(
            model_id, output_hidden_states=True
        ).to(device).eval()
        self.device = device
        self.num_layers = self.model.config.num_hidden_layers + 1
        self.dim = self.model.config.hidden_size

    def frame_features(self, chunk: np.ndarray, sample_rate: int) -> np.ndarray:
        inputs = self.processor(
            chunk, sampling_rate=sample_rate, return_tensors="pt"
        )
        with self.torch.no_grad():
            out = self.model(**{k: v.to(self.device) for k, v in inputs.items()})
        return self.torch.stack(out.hidden_states, dim=2)[0].cpu().double().numpy()


class HFVideoBackend:
    def __init__(self, model_id: str, device: str = "cpu"):
        transformers = _require("transformers")
        self.torch = _require("torch")
        self.processor = transformers.AutoImageProcessor.from_pretrained(model_id)
        self.model = transformers.AutoModel.from_pretrained(
            model_id, output_hidden_states=True
        ).to(device).eval()
        self.device = device
        self.num_layers = self.model.config.num_hidden_layers + 1
        self.dim = self.model.config.hidden_size

    def embed_clip(self, frames: np.ndarray) -> np.ndarray:
        inputs = self.processor(list(frames), return_tensors="pt")
        with self.torch.no_grad():
            out = self.model(**{k: v.to(self.device) for k, v in inputs.items()})
        # [1, tokens, D] per layer; mean over every patch token
        stack = self.torch.stack(out.hidden_states, dim=2)[0]
        return stack.mean(dim=0).cpu().double().numpy()
