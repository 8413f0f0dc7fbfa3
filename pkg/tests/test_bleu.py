import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from almaforge.bleu import corpus_bleu, is_cjk_char, tokenize_13a, tokenize_zh
from conftest import load_fixture


def test_identity_is_100():
    refs = ["the cat sat on the mat .", "a b c d e", "丁 七 万 丈"]
    # float rounding of exp(mean(log 100)) can land a few ulps off, as in the reference scorer
    assert corpus_bleu(refs, refs).score == pytest.approx(100.0, abs=1e-9)
    assert corpus_bleu(refs, refs, tokenizer="zh").score == pytest.approx(100.0, abs=1e-9)


def test_clipping():
    r = corpus_bleu(["the the the the"], ["the cat"])
    assert r.matches[0] == 1 and r.totals[0] == 4
    assert r.precisions[0] == pytest.approx(0.25)


def test_six_token_example():
    r = corpus_bleu(["the cat sat on the mat"], ["the cat is on the mat"])
    assert r.brevity_penalty == 1.0
    assert r.precisions[:3] == pytest.approx([5 / 6, 3 / 5, 1 / 4])
    assert r.precisions[3] == pytest.approx(1 / 6)  # exp smoothing: 1 / (2 * 3)
    hand = 100 * math.exp((math.log(5 / 6) + math.log(3 / 5) + math.log(1 / 4) + math.log(1 / 6)) / 4)
    assert r.score == pytest.approx(hand, abs=1e-9)
    assert abs(r.score - 37.99) <= 0.01


def test_brevity_penalty():
    r = corpus_bleu(["a b c"], ["a b c d e f"])
    assert r.brevity_penalty == pytest.approx(math.exp(1 - 6 / 3))
    assert r.hyp_len == 3 and r.ref_len == 6


def test_no_smoothing_zero_match_is_zero():
    assert corpus_bleu(["a b c d"], ["w x y z"], smoothing="none").score == 0.0


def test_empty_hypothesis():
    assert corpus_bleu([""], ["a b"]).score == 0.0


def test_length_mismatch_raises():
    with pytest.raises(ValueError):
        corpus_bleu(["a"], ["a", "b"])


def test_report_recompute_and_json():
    r = corpus_bleu(["the cat sat on the mat"], ["the cat is on the mat"])
    assert r.recompute() == pytest.approx(r.score)
    js = r.to_json()
    assert js["bleu"] == r.score and js["bp"] == 1.0


def test_reference_tokenizer_outputs():
    rows = load_fixture("tokenizer_reference.json")
    assert len(rows) == 50
    for row in rows:
        assert tokenize_13a(row["text"]) == row["13a"].split(), row["text"]
        assert tokenize_zh(row["text"]) == row["zh"].split(), row["text"]


def test_cjk_predicate():
    assert is_cjk_char("中") and is_cjk_char("。") and is_cjk_char("Ａ")
    assert not is_cjk_char("a") and not is_cjk_char("é")


text = st.text(alphabet=st.sampled_from(list("abc de.,!中文。")), max_size=30)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(text, text), min_size=1, max_size=5))
def test_score_bounds(pairs):
    hyps, refs = [h for h, _ in pairs], [r for _, r in pairs]
    for tok in ("13a", "zh"):
        r = corpus_bleu(hyps, refs, tokenizer=tok)
        assert 0.0 <= r.score <= 100.0 + 1e-9
        assert 0.0 < r.brevity_penalty <= 1.0 or r.hyp_len == 0
