"""Tests for the deterministic synthetic audio generators."""

import numpy as np
import pytest

from codecraid import synth


def test_alphabet_has_31_symbols():
    assert len(synth.ALPHABET) == 31
    assert len(set(synth.ALPHABET)) == 31
    assert synth.ALPHABET[0] == " "


def test_symbol_frequencies_distinct_low_chords():
    pairs = set()
    for i in range(len(synth.ALPHABET)):
        f1, f2, f3 = synth.symbol_frequencies(i)
        assert f1 < 1900 and f2 < 1900
        assert f3 > 2500
        pairs.add((f1, f2))
    assert len(pairs) == len(synth.ALPHABET)


def test_synthesize_transcript_deterministic():
    a = synth.synthesize_transcript("ab cd", 24000, 1.0, seed=4)
    b = synth.synthesize_transcript("ab cd", 24000, 1.0, seed=4)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert a.n_samples == 24000


def test_synthesize_transcript_rejects_bad_symbols():
    with pytest.raises(ValueError):
        synth.synthesize_transcript("ab!cd", 24000, 1.0)
    with pytest.raises(ValueError):
        synth.synthesize_transcript("", 24000, 1.0)


def test_random_words_alphabet_only():
    rng = np.random.default_rng(0)
    text = synth.random_words(rng, 6)
    assert set(text) <= set(synth.ALPHABET)
    assert len(text.split(" ")) == 6


def test_codec_corpus_mixed_and_seeded():
    a = synth.codec_corpus(10, 24000, 0.5, seed=3)
    b = synth.codec_corpus(10, 24000, 0.5, seed=3)
    assert len(a) == 10
    for wa, wb in zip(a, b):
        np.testing.assert_array_equal(wa.samples, wb.samples)
        assert wa.n_samples == 12000


def test_victim_pairs_match_alphabet():
    pairs = synth.victim_pairs(5, 16000, 1.0, seed=9)
    for w, text in pairs:
        assert w.sample_rate_hz == 16000
        assert set(text) <= set(synth.ALPHABET)


def test_carrier_kinds():
    s = synth.carrier_clip("speech", 24000, 1.0, seed=1)
    m = synth.carrier_clip("music", 24000, 1.0, seed=1)
    assert s.n_samples == m.n_samples == 24000
    with pytest.raises(ValueError):
        synth.carrier_clip("podcast", 24000, 1.0, seed=1)
