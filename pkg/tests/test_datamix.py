import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from almaforge.datamix import (ConfigError, DataError, LanguageCorpusStat, ToyLanguages, compute_mixture,
                               gen_toy_corpus, stats_from_shards, stream_mixture)
from almaforge.bleu import corpus_bleu
from almaforge.prompt import Vocab, read_jsonl
from conftest import load_fixture

PUBLISHED = {"de": 0.20, "cs": 0.14, "is": 0.08, "zh": 0.19, "ru": 0.22, "en": 0.17}


def _stats(d):
    return [LanguageCorpusStat(k, v) for k, v in d.items()]


def test_published_ratios_within_two_points():
    spec = compute_mixture(_stats(load_fixture("word_counts_billions.json")), temperature=6)
    for lang, p in PUBLISHED.items():
        assert abs(spec.probabilities[lang] - p) <= 0.02, lang
    assert spec.probabilities["en"] == 1 / 6


def test_frozen_ratios():
    spec = compute_mixture(_stats(load_fixture("word_counts_billions.json")), temperature=6)
    frozen = {"de": 0.206239, "cs": 0.147059, "is": 0.082392, "zh": 0.189493, "ru": 0.208151, "en": 0.166667}
    for lang, p in frozen.items():
        assert spec.probabilities[lang] == pytest.approx(p, abs=1e-6)


def test_independent_formula():
    counts = load_fixture("word_counts_billions.json")
    free = {k: v for k, v in counts.items() if k != "en"}
    total = sum(free.values())
    w = {k: (v / total) ** (1 / 6) for k, v in free.items()}
    z = sum(w.values())
    spec = compute_mixture(_stats(counts), 6)
    for k in free:
        assert spec.probabilities[k] == pytest.approx(5 / 6 * w[k] / z, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.sampled_from(list("abcdefgh")), st.floats(1e-3, 1e6), min_size=2),
       st.floats(0.5, 20))
def test_mixture_properties(counts, T):
    spec = compute_mixture(_stats(counts), T, pinned={})
    p = spec.probabilities
    assert math.isclose(sum(p.values()), 1.0, rel_tol=1e-12)
    order = sorted(counts, key=counts.get)
    assert all(p[a] <= p[b] + 1e-15 for a, b in zip(order, order[1:]))  # monotone in size
    # higher temperature flattens: the smallest share never shrinks
    hotter = compute_mixture(_stats(counts), T * 2, pinned={}).probabilities
    assert hotter[order[0]] >= p[order[0]] - 1e-12


def test_temperature_one_is_proportional():
    p = compute_mixture(_stats({"a": 1, "b": 3}), 1, pinned={}).probabilities
    assert p == pytest.approx({"a": 0.25, "b": 0.75})


def test_mixture_errors():
    with pytest.raises(ConfigError):
        compute_mixture(_stats({"de": 1.0}), 6)  # en pinned by default but absent
    with pytest.raises(ConfigError):
        compute_mixture(_stats({"a": 1.0, "b": 1.0}), 0, pinned={})
    with pytest.raises(ConfigError):
        compute_mixture(_stats({"a": 1.0, "b": 1.0}), 6, pinned={"a": 1.0})
    with pytest.raises(DataError):
        compute_mixture(_stats({"a": 0.0, "b": 1.0}), 6, pinned={})


def test_stream_follows_probabilities_and_budget():
    spec = compute_mixture(_stats({"a": 1, "b": 1}), 1, pinned={"a": 0.8})
    shards = {"a": [["x y"] * 10], "b": [["z"] * 10]}
    got = list(stream_mixture(spec, shards, seed=5, token_budget=20_000))
    langs = [l for l, _ in got]
    assert abs(langs.count("a") / len(langs) - 0.8) < 0.02
    assert sum(len(t.split()) for _, t in got) >= 20_000
    assert got == list(stream_mixture(spec, shards, seed=5, token_budget=20_000))


def test_stream_errors():
    spec = compute_mixture(_stats({"a": 1, "b": 1}), 1, pinned={})
    with pytest.raises(DataError):
        list(stream_mixture(spec, {"a": [["x"]]}, 0, 10))
    with pytest.raises(DataError):
        list(stream_mixture(spec, {"a": [["x"]], "b": [[]]}, 0, 10))


def test_toy_translate_is_a_bijection():
    for transform in ("cipher", "reverse"):
        langs = ToyLanguages(50, transform, seed=3)
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = langs.sentence(rng)
            a, b = langs.render(s, langs.src), langs.render(s, langs.tgt)
            assert langs.translate(a, langs.src) == b
            assert langs.translate(b, langs.tgt) == a


def test_gen_toy_corpus(tmp_path):
    m = gen_toy_corpus(tmp_path / "toy", seed=1, vocab_size=30, n_sentences=40, mono_tokens=4000,
                       n_valid=10, n_test=10, model_vocab=160)
    train, test = read_jsonl(m["parallel"]["train"]), read_jsonl(m["parallel"]["test"])
    assert len(train) == 40 and len(test) == 10
    assert not {r["src"] for r in train} & {r["src"] for r in test}
    vocab = Vocab.load(m["vocab"])
    assert len(vocab) == 160
    assert all(1 not in vocab.encode(r["src"] + " " + r["tgt"]) for r in train)  # no UNK
    stats = stats_from_shards(m["mono"])
    assert all(s.word_count >= 2000 for s in stats)
    assert json.loads((tmp_path / "toy" / "manifest.json").read_text())["languages"] == {"lx": "Lexan", "hz": "Hanzic"}
    # reproducible
    m2 = gen_toy_corpus(tmp_path / "toy2", seed=1, vocab_size=30, n_sentences=40, mono_tokens=4000,
                        n_valid=10, n_test=10, model_vocab=160)
    assert read_jsonl(m2["parallel"]["train"]) == train


def test_oracle_translator_scores_100_and_shuffled_scores_low(tmp_path):
    m = gen_toy_corpus(tmp_path / "toy", seed=2, n_sentences=10, mono_tokens=200, n_valid=10, n_test=100)
    langs = ToyLanguages(m["vocab_size"], m["transform"], m["seed"])
    test = read_jsonl(m["parallel"]["test"])
    refs = [r["tgt"] for r in test]
    hyps = [langs.translate(r["src"], r["src_lang"]) for r in test]
    assert corpus_bleu(hyps, refs, tokenizer="zh").score == pytest.approx(100, abs=1e-9)
    back = [langs.translate(r["tgt"], r["tgt_lang"]) for r in test]
    assert corpus_bleu(back, [r["src"] for r in test]).score == pytest.approx(100, abs=1e-9)
    shuffled = [hyps[i] for i in np.random.default_rng(0).permutation(len(hyps))]
    assert corpus_bleu(shuffled, refs, tokenizer="zh").score < 5
