"""Temperature-sampled language mixtures, the mixed monolingual stream, and toy corpora."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .objectives import derived_rng
from .prompt import read_jsonl, write_jsonl

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid user configuration (CLI exit code 2)."""


class DataError(ValueError):
    pass


@dataclass
class LanguageCorpusStat:
    language: str
    word_count: float
    shard_paths: list = field(default_factory=list)


@dataclass
class MixtureSpec:
    probabilities: dict
    temperature: float
    pinned: dict

    def to_json(self):
        return dict(self.probabilities)


def compute_mixture(stats, temperature=6.0, pinned=None) -> MixtureSpec:
    """P(l) proportional to (D_l / sum D)^(1/T) over unpinned languages.

    Pinned languages keep their fraction verbatim; the unpinned ones share
    ``1 - sum(pinned)``.
    """
    pinned = {"en": 1 / 6} if pinned is None else dict(pinned)
    langs = [s.language for s in stats]
    if len(set(langs)) != len(langs):
        raise DataError(f"duplicate language codes in corpus stats: {langs}")
    for s in stats:
        if not s.word_count > 0:
            raise DataError(f"word_count for {s.language!r} must be positive, got {s.word_count}")
    for lang in pinned:
        if lang not in langs:
            raise ConfigError(f"pinned language {lang!r} not among corpus languages {langs}")
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    rest = 1.0 - sum(pinned.values())
    if not 0 < rest <= 1 or any(v < 0 for v in pinned.values()):
        raise ConfigError(f"pinned fractions must be nonnegative and sum below 1, got {pinned}")
    free = [s for s in stats if s.language not in pinned]
    if not free:
        raise ConfigError("every language is pinned; nothing left to mix")
    total = math.fsum(s.word_count for s in stats)
    # exponents on shares in [0, 1]; normalizing makes the result scale-free in D
    weights = np.array([(s.word_count / total) ** (1.0 / temperature) for s in free], dtype=np.float64)
    weights = weights / weights.sum() * rest
    probs = {}
    for s in stats:
        probs[s.language] = float(pinned[s.language]) if s.language in pinned else None
    for s, w in zip(free, weights):
        probs[s.language] = float(w)
    return MixtureSpec(probs, float(temperature), pinned)


def whitespace_words(text: str) -> int:
    return len(text.split())


def stats_from_shards(shards: dict, count=whitespace_words) -> list[LanguageCorpusStat]:
    """Word counts per language from monolingual JSONL shards ``{lang: [paths]}``."""
    out = []
    for lang, paths in shards.items():
        n = sum(count(r["text"]) for p in paths for r in read_jsonl(p))
        out.append(LanguageCorpusStat(lang, n, list(paths)))
    return out


class _LanguageCursor:
    """Documents of one language in shuffled shard order; wraps with a reshuffle."""

    def __init__(self, lang, shards, rng):
        if not shards:
            raise DataError(f"language {lang!r} has no shards")
        self.lang, self.shards, self.rng = lang, list(shards), rng
        self.wraps = 0
        self._started = False
        self._order = []
        self._docs = []

    def _load(self, shard):
        if callable(shard):
            return list(shard())
        if isinstance(shard, (list, tuple)):
            return list(shard)
        return [r["text"] for r in read_jsonl(shard)]

    def next(self):
        # bounded so that a language whose shards are all empty fails instead of spinning
        for _ in range(2 * len(self.shards) + 1):
            if self._docs:
                return self._docs.pop()
            if not self._order:
                if self._started:
                    self.wraps += 1
                    log.info("language %s exhausted its shards; reshuffling (wrap %d)", self.lang, self.wraps)
                self._started = True
                self._order = [int(i) for i in self.rng.permutation(len(self.shards))]
            self._docs = self._load(self.shards[self._order.pop(0)])[::-1]
        raise DataError(f"language {self.lang!r} has only empty shards")


def stream_mixture(spec: MixtureSpec, shards: dict, seed: int, token_budget: int, count=whitespace_words):
    """Yield ``(language, text)`` until at least ``token_budget`` tokens are emitted.

    ``shards`` maps language to a list of shard sources (JSONL paths, lists of
    strings, or zero-argument callables).  The stream is a pure function of
    ``(spec, shards, seed)``.
    """
    langs = sorted(spec.probabilities)
    probs = np.array([spec.probabilities[l] for l in langs], dtype=np.float64)
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    for lang in langs:
        if not shards.get(lang):
            raise DataError(f"language {lang!r} in mixture has no shards")
    cursors = {l: _LanguageCursor(l, shards[l], derived_rng(seed, i + 1)) for i, l in enumerate(langs)}
    rng = derived_rng(seed, 0)
    seen = 0
    while seen < token_budget:
        lang = langs[int(np.searchsorted(cdf, rng.random(), side="right"))]
        text = cursors[lang].next()
        seen += count(text)
        yield lang, text


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

LANG_NAMES = {"lx": "Lexan", "hz": "Hanzic", "xl": "Naxel"}
_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
CJK_BASE = 0x4E00


@dataclass
class ToyLanguages:
    """Two synthetic languages over ``n_words`` lexemes and a deterministic transform."""

    n_words: int
    transform: str
    seed: int
    coherence: float = 0.5

    def __post_init__(self):
        if self.n_words < 10:
            raise ConfigError("toy vocab_size must be at least 10")
        if self.transform not in ("cipher", "reverse"):
            raise ConfigError(f"unknown transform {self.transform!r}; use cipher or reverse")
        rng = derived_rng(self.seed, 1000)
        self.src_words = _pseudo_words(self.n_words, rng)
        if self.transform == "cipher":
            self.src, self.tgt = "lx", "hz"
            self.perm = rng.permutation(self.n_words)
            self.tgt_words = [chr(CJK_BASE + int(k)) for k in range(self.n_words)]
        else:
            self.src, self.tgt = "lx", "xl"
            self.perm = np.arange(self.n_words)
            self.tgt_words = self.src_words
        ranks = np.arange(1, self.n_words + 1, dtype=np.float64)
        self.zipf = (1.0 / ranks) / (1.0 / ranks).sum()
        self._cdf = np.cumsum(self.zipf)
        self._cdf[-1] = 1.0
        # preferred successor of each lexeme, giving sentences some bigram structure
        self.successor = rng.permutation(self.n_words)

    def sentence(self, rng) -> list[int]:
        n = int(rng.integers(3, 13))
        words = [self._zipf_draw(rng)]
        for _ in range(n - 1):
            if rng.random() < self.coherence:
                words.append(int(self.successor[words[-1]]))
            else:
                words.append(self._zipf_draw(rng))
        return words

    def _zipf_draw(self, rng):
        return int(np.searchsorted(self._cdf, rng.random(), side="right"))

    def render(self, lexemes, lang) -> str:
        if lang == self.src:
            return " ".join(self.src_words[w] for w in lexemes)
        mapped = [self.tgt_words[int(self.perm[w])] for w in lexemes]
        if self.transform == "reverse":
            mapped = mapped[::-1]
        return " ".join(mapped)

    def translate(self, text: str, src_lang: str) -> str:
        """The exact transform between the two languages (the oracle translator)."""
        if self.transform == "reverse":
            return " ".join(text.split()[::-1])
        if src_lang == self.src:
            index = {w: i for i, w in enumerate(self.src_words)}
            return " ".join(self.tgt_words[int(self.perm[index[w]])] for w in text.split())
        inv = np.argsort(self.perm)
        return " ".join(self.src_words[int(inv[ord(c) - CJK_BASE])] for c in text.split())

    def words(self):
        return list(self.src_words) + [w for w in self.tgt_words if w not in set(self.src_words)]


def _pseudo_words(n, rng):
    out, seen = [], set()
    while len(out) < n:
        syl = int(rng.integers(1, 4))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(syl))
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def _document(langs: ToyLanguages, lang, rng, max_sentences, bilingual_rate, label_rate):
    other = langs.tgt if lang == langs.src else langs.src
    lines = []
    for _ in range(int(rng.integers(1, max_sentences + 1))):
        s = langs.sentence(rng)
        a, b = langs.render(s, lang), langs.render(s, other)
        if rng.random() < bilingual_rate:
            if rng.random() < label_rate:
                lines.append(f"{LANG_NAMES[lang]}: {a}\n{LANG_NAMES[other]}: {b}")
            else:
                lines.append(f"{a}\n{b}")
        else:
            lines.append(a)
    return "\n".join(lines)


def gen_toy_corpus(out_dir, seed=0, vocab_size=200, n_sentences=2000, transform="cipher",
                   mono_tokens=2_000_000, n_valid=200, n_test=100, max_sentences=2,
                   bilingual_rate=0.5, label_rate=0.5, coherence=0.5, model_vocab=512,
                   mono_shards=4):
    """Write a synthetic bilingual corpus to ``out_dir`` and return a manifest.

    Files: ``mono/<lang>.<k>.jsonl`` (documents, ``{"text", "lang"}``),
    ``parallel/{train,valid,test}.jsonl`` (``{"src","tgt","src_lang","tgt_lang"}``,
    source-language to target-language only; trainers use both directions),
    ``vocab.txt`` and ``manifest.json``.

    Monolingual documents hold 1..``max_sentences`` sentences, one per line.
    A ``bilingual_rate`` fraction of sentences is followed by its translation
    on the next line, and ``label_rate`` of those carry ``Name:`` labels, the
    way real web text occasionally contains side-by-side translations.
    """
    from .prompt import Vocab

    out = Path(out_dir).resolve()
    (out / "mono").mkdir(parents=True, exist_ok=True)
    (out / "parallel").mkdir(parents=True, exist_ok=True)
    langs = ToyLanguages(vocab_size, transform, seed, coherence)

    rng = derived_rng(seed, 1)
    seen = set()

    def draw(n):
        recs = []
        while len(recs) < n:
            s = langs.sentence(rng)
            key = tuple(s)
            if key in seen:
                continue
            seen.add(key)
            recs.append({"src": langs.render(s, langs.src), "tgt": langs.render(s, langs.tgt),
                         "src_lang": langs.src, "tgt_lang": langs.tgt})
        return recs

    # test first so it never overlaps with training pairs
    test, valid, train = draw(n_test), draw(n_valid), draw(n_sentences)
    for name, recs in (("train", train), ("valid", valid), ("test", test)):
        write_jsonl(out / "parallel" / f"{name}.jsonl", recs)

    mono = {}
    for i, lang in enumerate((langs.src, langs.tgt)):
        r = derived_rng(seed, 10 + i)
        docs, n = [], 0
        while n < mono_tokens / 2:
            text = _document(langs, lang, r, max_sentences, bilingual_rate, label_rate)
            docs.append({"text": text, "lang": lang})
            n += len(text.split())
        paths = []
        for k in range(mono_shards):
            p = out / "mono" / f"{lang}.{k}.jsonl"
            write_jsonl(p, docs[k::mono_shards])
            paths.append(str(p))
        mono[lang] = paths

    vocab = Vocab.build([LANG_NAMES[langs.src], LANG_NAMES[langs.tgt]] + langs.words(), size=model_vocab)
    vocab.save(out / "vocab.txt")
    manifest = {
        "seed": seed, "transform": transform, "vocab_size": vocab_size,
        "languages": {langs.src: LANG_NAMES[langs.src], langs.tgt: LANG_NAMES[langs.tgt]},
        "mono": mono, "vocab": str(out / "vocab.txt"),
        "parallel": {k: str(out / "parallel" / f"{k}.jsonl") for k in ("train", "valid", "test")},
        "bilingual_rate": bilingual_rate, "label_rate": label_rate, "max_sentences": max_sentences,
        "coherence": coherence,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, ensure_ascii=False), encoding="utf-8")
    return manifest
