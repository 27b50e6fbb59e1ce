"""Word-level text embedding with a trailing context window.

Each transcript word is embedded by rebuilding the text of the k words
preceding it (fewer near the start, truncated from the left) plus the word
itself, running one forward pass, and averaging the hidden states of the
tokens that overlap the word's own characters. Token-word overlap is decided
by character-span intersection, which also settles multi-word tokens: any
token sharing at least one character with the word counts.

This is one forward pass per word, O(n * k); cheap with the toy backend,
batched externally when a real model is in play.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from tribe import alignment
from tribe.datastore import EmbeddingSeries, ModalityMeta

from . import backends as backend_registry
from .config import ExtractionConfig, ExtractorError
from .stimuli import WordEvent


@dataclass
class TextExtraction:
    words: list[alignment.TimedWordEmbedding]  # one embedding per word
    series: EmbeddingSeries  # words summed into the output grid

    @property
    def data(self) -> np.ndarray:
        return self.series.data


def context_window(words: list[WordEvent], index: int, k: int) -> list[WordEvent]:
    """The k words preceding `index`, truncated at the transcript start,
    plus the word itself."""
    return words[max(0, index - k) : index + 1]


def embed_word(backend, window: list[WordEvent]) -> np.ndarray:
    """Embed the last word of `window`; returns [L, D]."""
    text = " ".join(w.word for w in window)
    target_lo = len(text) - len(window[-1].word)
    hidden, spans = backend.hidden_states(text)
    own = [
        i
        for i, s in enumerate(spans)
        if s.lo < len(text) and s.hi > target_lo
    ]
    if not own:
        raise ExtractorError(
            f"no tokens overlap word {window[-1].word!r}; tokenizer spans broken"
        )
    return hidden[own].mean(axis=0)


def extract_text(
    words: list[WordEvent],
    config: ExtractionConfig,
    num_steps: int,
    backend=None,
    series_id: str = "",
    diagnostics: list | None = None,
) -> TextExtraction:
    """Embed every word, then sum embeddings into the 2 Hz grid.

    An empty transcript yields an all-zero series. Words lying outside the
    [0, num_steps / frequency_hz) horizon are dropped by the binning step and
    reported through `diagnostics`.
    """
    if backend is None:
        backend = backend_registry.text_backend(config.text)
    for prev, cur in zip(words, words[1:]):
        if cur.onset_s < prev.onset_s:
            raise ExtractorError(
                f"transcript onsets not monotone: {cur.word!r} at {cur.onset_s} "
                f"after {prev.onset_s}"
            )
    k = config.text.context_words
    timed: list[alignment.TimedWordEmbedding] = []
    for i, w in enumerate(words):
        emb = embed_word(backend, context_window(words, i, k))
        timed.append(
            alignment.TimedWordEmbedding(
                word=w.word, onset_s=w.onset_s, duration_s=w.duration_s, embedding=emb
            )
        )
    layer_shape = (backend.num_layers, backend.dim)
    binned = alignment.bin_words(
        timed,
        config.frequency_hz,
        num_steps,
        layer_shape=layer_shape,
        diagnostics=diagnostics,
    )
    meta = ModalityMeta(
        name="text",
        dim=backend.dim,
        num_layers=backend.num_layers,
        frequency_hz=config.frequency_hz,
    )
    binned.setflags(write=False)
    return TextExtraction(
        words=timed,
        series=EmbeddingSeries(data=binned, meta=meta, session_id=series_id),
    )
