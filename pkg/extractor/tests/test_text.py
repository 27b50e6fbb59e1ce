import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from tribe import alignment

from tribe_extractor import (
    ExtractionConfig,
    ExtractorError,
    TextModelConfig,
    ToyTextBackend,
    WordEvent,
    context_window,
    embed_word,
    extract_text,
)


def events(tokens, spacing=0.5, duration=0.4):
    return [WordEvent(w, i * spacing, duration) for i, w in enumerate(tokens)]


class RecordingBackend:
    """Passes through to a toy backend, remembering every forward text."""

    def __init__(self):
        self.inner = ToyTextBackend()
        self.texts: list[str] = []
        self.num_layers = self.inner.num_layers
        self.dim = self.inner.dim

    def hidden_states(self, text):
        self.texts.append(text)
        return self.inner.hidden_states(text)


def test_single_word_is_mean_of_its_tokens(cfg):
    backend = ToyTextBackend()
    result = extract_text(events(["zebra"]), cfg, num_steps=4, backend=backend)
    hidden, spans = backend.hidden_states("zebra")
    assert len(spans) == 2  # five letters split into two subword tokens
    assert np.array_equal(result.words[0].embedding, hidden.mean(axis=0))


def test_two_token_word_is_arithmetic_mean_within_context(cfg):
    backend = ToyTextBackend()
    window = events(["it", "was", "sleeping"])
    emb = embed_word(backend, window)
    text = "it was sleeping"
    hidden, spans = backend.hidden_states(text)
    own = [i for i, s in enumerate(spans) if s.text in ("slee", "ping")]
    assert len(own) == 2
    assert np.array_equal(emb, (hidden[own[0]] + hidden[own[1]]) / 2.0)


def test_short_word_tokens_exclude_neighbours(cfg):
    # character spans, not whitespace heuristics, decide token ownership
    backend = ToyTextBackend()
    window = events(["sleeping", "dog"])
    emb = embed_word(backend, window)
    hidden, spans = backend.hidden_states("sleeping dog")
    assert [s.text for s in spans] == ["slee", "ping", "dog"]
    assert np.array_equal(emb, hidden[2])


@settings(max_examples=40, deadline=None)
@given(
    num_words=st.integers(min_value=1, max_value=24),
    k=st.integers(min_value=1, max_value=8),
)
def test_every_forward_sees_exactly_the_context_window(num_words, k):
    cfg = ExtractionConfig(text=TextModelConfig(context_words=k))
    backend = RecordingBackend()
    words = events([f"w{i}" for i in range(num_words)], spacing=0.1, duration=0.05)
    extract_text(words, cfg, num_steps=max(1, num_words), backend=backend)
    assert len(backend.texts) == num_words
    for i, text in enumerate(backend.texts):
        expected = " ".join(w.word for w in words[max(0, i - k) : i + 1])
        assert text == expected


def test_word_2000_sees_words_976_through_1999(cfg):
    assert cfg.text.context_words == 1024
    words = events([f"w{i}" for i in range(2100)], spacing=0.01, duration=0.005)
    result = extract_text(words, cfg, num_steps=42)

    oracle = ToyTextBackend()
    window = words[976:2001]  # the 1024 preceding words plus the word itself
    assert context_window(words, 2000, 1024) == window
    text = " ".join(w.word for w in window)
    hidden, spans = oracle.hidden_states(text)
    lo = len(text) - len("w2000")
    own = [i for i, s in enumerate(spans) if s.hi > lo]
    expected = hidden[own].mean(axis=0)
    assert np.array_equal(result.words[2000].embedding, expected)

    # before the window fills up, the context is the whole prefix
    head = " ".join(w.word for w in words[:51])
    hidden, spans = oracle.hidden_states(head)
    lo = len(head) - len("w50")
    own = [i for i, s in enumerate(spans) if s.hi > lo]
    assert np.array_equal(result.words[50].embedding, hidden[own].mean(axis=0))


def test_moving_the_window_edge_changes_the_embedding(cfg):
    # word 976 is inside word 2000's window, word 975 is not
    backend = ToyTextBackend()
    words = events([f"w{i}" for i in range(2100)], spacing=0.01, duration=0.005)
    base = embed_word(backend, context_window(words, 2000, 1024))

    inside = list(words)
    inside[976] = WordEvent("changed", inside[976].onset_s, inside[976].duration_s)
    outside = list(words)
    outside[975] = WordEvent("changed", outside[975].onset_s, outside[975].duration_s)

    assert not np.array_equal(
        base, embed_word(backend, context_window(inside, 2000, 1024))
    )
    assert np.array_equal(
        base, embed_word(backend, context_window(outside, 2000, 1024))
    )


def test_layer_zero_is_context_free_upper_layers_are_not():
    backend = ToyTextBackend()
    a = embed_word(backend, events(["rain", "fell", "dog"]))
    b = embed_word(backend, events(["quiet", "harbor", "dog"]))
    assert np.array_equal(a[0], b[0])
    assert not np.array_equal(a[1:], b[1:])


def test_empty_transcript_yields_zero_tensor(cfg):
    result = extract_text([], cfg, num_steps=10)
    assert result.words == []
    assert result.data.shape == (10, 4, 8)
    assert not result.data.any()


def test_non_monotone_onsets_rejected(cfg):
    words = [WordEvent("a", 1.0, 0.1), WordEvent("b", 0.2, 0.1)]
    with pytest.raises(ExtractorError, match="monotone"):
        extract_text(words, cfg, num_steps=4)


def test_words_outside_horizon_are_dropped_and_reported(cfg):
    words = events(["near", "far"], spacing=100.0, duration=0.1)
    diags = []
    result = extract_text(words, cfg, num_steps=10, diagnostics=diags)
    assert len(result.words) == 2  # embedded, just not binned
    drops = [d for d in diags if d["event"] == "dropped_word"]
    assert [d["word"] for d in drops] == ["far"]


def test_binned_series_matches_bin_words_on_the_word_table(cfg):
    words = events(["the", "quiet", "harbor", "at", "night"])
    result = extract_text(words, cfg, num_steps=6)
    again = alignment.bin_words(result.words, cfg.frequency_hz, 6)
    assert np.array_equal(result.data, again)
    assert result.series.meta.name == "text"
    assert result.series.meta.frequency_hz == cfg.frequency_hz
