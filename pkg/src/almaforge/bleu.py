"""Corpus BLEU compatible with the reference sacreBLEU scorer (13a and zh tokenizers)."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass

MAX_ORDER = 4

_POST_RULES = [
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    # period and comma unless preceded by a digit
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    # period and comma unless followed by a digit
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    # dash preceded by a digit
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
]


def _post_tokenize(line: str) -> str:
    for pattern, repl in _POST_RULES:
        line = pattern.sub(repl, line)
    return " ".join(line.split())


def tokenize_13a(text: str) -> list[str]:
    line = text.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in line:
        line = line.replace("&quot;", '"').replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">")
    return _post_tokenize(f" {line} ").split()


# Ranges compared as strings, exactly like the reference tokenizer.  Two
# bounds look like 5-hex-digit escapes, but Python reads "\u20000" as U+2000
# followed by "0"; for single characters the comparison then covers
# U+2001..U+2A6D and U+2F81..U+2FA1.  Kept verbatim for score parity.
_CJK_RANGES = [
    ("\u3400", "\u4db5"), ("\u4e00", "\u9fa5"), ("\u9fa6", "\u9fbb"), ("\uf900", "\ufa2d"),
    ("\ufa30", "\ufa6a"), ("\ufa70", "\ufad9"), ("\u20000", "\u2a6d6"), ("\u2f800", "\u2fa1d"),
    ("\uff00", "\uffef"), ("\u2e80", "\u2eff"), ("\u3000", "\u303f"), ("\u31c0", "\u31ef"),
    ("\u2f00", "\u2fdf"), ("\u2ff0", "\u2fff"), ("\u3100", "\u312f"), ("\u31a0", "\u31bf"),
    ("\ufe10", "\ufe1f"), ("\ufe30", "\ufe4f"), ("\u2600", "\u26ff"), ("\u2700", "\u27bf"),
    ("\u3200", "\u32ff"), ("\u3300", "\u33ff"),
]


def is_cjk_char(ch: str) -> bool:
    return any(lo <= ch <= hi for lo, hi in _CJK_RANGES)


def tokenize_zh(text: str) -> list[str]:
    """Each CJK character is its own token; the rest follows the 13a punctuation rules.

    Like the reference, this skips the 13a markup/unescape step.
    """
    chars = []
    for ch in text.strip():
        chars.append(f" {ch} " if is_cjk_char(ch) else ch)
    return _post_tokenize("".join(chars)).split()


TOKENIZERS = {"13a": tokenize_13a, "zh": tokenize_zh, "none": str.split}


@dataclass
class BleuReport:
    score: float
    precisions: list  # matched / total per order, as fractions (smoothed where applicable)
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    tokenizer_name: str
    smoothing: str = "exp"
    matches: list = None
    totals: list = None

    def to_json(self):
        d = asdict(self)
        d["bleu"] = d.pop("score")
        d["bp"] = d.pop("brevity_penalty")
        return d

    def recompute(self) -> float:
        if any(p <= 0 for p in self.precisions):
            return 0.0
        return self.brevity_penalty * math.exp(sum(math.log(p) for p in self.precisions) / MAX_ORDER) * 100


def _ngrams(tokens, order):
    return Counter(tuple(tokens[i:i + order]) for i in range(len(tokens) - order + 1))


def corpus_bleu(hypotheses, references, tokenizer="13a", smoothing="exp") -> BleuReport:
    """Single-reference corpus BLEU with clipped n-gram counts and brevity penalty."""
    if not hypotheses:
        raise ValueError("corpus_bleu needs at least one hypothesis")
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if smoothing not in ("exp", "none"):
        raise ValueError(f"unknown smoothing {smoothing!r}")
    tok = TOKENIZERS[tokenizer]
    matches, totals = [0] * MAX_ORDER, [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = tok(hyp.rstrip()), tok(ref.rstrip())
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, MAX_ORDER + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)

    bp = 1.0
    if hyp_len < ref_len:
        bp = math.exp(1 - ref_len / hyp_len) if hyp_len > 0 else 0.0
    # percent-scale arithmetic in the reference scorer's order, for bit parity
    pct = [0.0] * MAX_ORDER
    score = 0.0
    if any(matches):
        smooth = 1.0
        for n in range(MAX_ORDER):
            if totals[n] == 0:
                break
            if matches[n] == 0:
                if smoothing == "exp":
                    smooth *= 2
                    pct[n] = 100.0 / (smooth * totals[n])
            else:
                pct[n] = 100.0 * matches[n] / totals[n]
        if all(p > 0 for p in pct):
            score = bp * math.exp(sum(math.log(p) for p in pct) / MAX_ORDER)
    precisions = [p / 100.0 for p in pct]
    return BleuReport(score, precisions, bp, hyp_len, ref_len, tokenizer, smoothing, matches, totals)
