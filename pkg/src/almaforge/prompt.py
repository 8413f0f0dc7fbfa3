"""Translation prompt rendering, word-level tokenizer, and loss-masked examples."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<s>", "</s>")
N_SENTINELS = 64

# Header words and punctuation the template always produces.
TEMPLATE_TOKENS = ("Translate", "this", "from", "to", ":", "\n")

_CJK = "㐀-䶿一-鿿豈-﫿"
_TOKEN_RE = re.compile(rf"\n|[{_CJK}]|[^\W{_CJK}]+|[^\w\s]")


def render_prompt(src_name: str, tgt_name: str, source: str) -> str:
    if not src_name or not tgt_name:
        raise ValueError("language names must be non-empty")
    return f"Translate this from {src_name} to {tgt_name}:\n{src_name}: {source}\n{tgt_name}:"


def split_words(text: str) -> list[str]:
    """Word-level pieces: newline, single CJK characters, word runs, punctuation."""
    return _TOKEN_RE.findall(text)


class Vocab:
    """Fixed word-level vocabulary; the line number of the vocab file is the id.

    Layout: the four reserved ids, then regular tokens, then ``N_SENTINELS``
    sentinel ids at the very top (``<extra_id_0>`` is the last id).
    """

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError(f"vocab must start with {RESERVED}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.sentinel_ids = [i for i, t in enumerate(tokens) if t.startswith("<extra_id_")]

    @classmethod
    def build(cls, words, size=None, n_sentinels=N_SENTINELS):
        """Reserved ids + template tokens + ``words``, padded to ``size`` with unused slots."""
        body = list(RESERVED) + [t for t in TEMPLATE_TOKENS]
        seen = set(body)
        for w in words:
            if w not in seen:
                body.append(w)
                seen.add(w)
        sentinels = [f"<extra_id_{k}>" for k in reversed(range(n_sentinels))]
        if size is not None:
            if len(body) + n_sentinels > size:
                raise ValueError(f"{len(body) + n_sentinels} tokens do not fit vocab size {size}")
            body += [f"<unused_{k}>" for k in range(size - len(body) - n_sentinels)]
        return cls(body + sentinels)

    @classmethod
    def load(cls, path):
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        # the newline token is stored escaped so that one line == one token
        return cls([("\n" if t == "\\n" else t) for t in lines])

    def save(self, path):
        body = "".join(("\\n" if t == "\n" else t) + "\n" for t in self.tokens)
        Path(path).write_text(body, encoding="utf-8")

    def __len__(self):
        return len(self.tokens)

    def sentinel(self, k: int) -> int:
        if k >= len(self.sentinel_ids):
            raise ValueError(f"sentinel {k} exceeds the {len(self.sentinel_ids)} reserved sentinel ids")
        return self.index[f"<extra_id_{k}>"]

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, UNK) for w in split_words(text)]

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.tokens[i])
        return " ".join(words).replace(" \n ", "\n")


@dataclass
class PromptedExample:
    input_ids: list[int]
    loss_mask: list[int]  # 1 where input_ids[t] is a supervised token (target or EOS)
    prompt_len: int
    meta: dict = field(default_factory=dict)

    def labels_masked_in(self):
        return [t for t, m in zip(self.input_ids, self.loss_mask) if m]


def build_example(prompt: str, target: str, vocab: Vocab, add_bos=False, meta=None) -> PromptedExample:
    """prompt ∥ target ∥ EOS, supervising only the target tokens and EOS."""
    tgt = vocab.encode(target)
    if not tgt:
        raise ValueError("empty supervision: target has no tokens")
    head = ([BOS] if add_bos else []) + vocab.encode(prompt)
    ids = head + tgt + [EOS]
    mask = [0] * len(head) + [1] * (len(tgt) + 1)
    return PromptedExample(ids, mask, len(head), dict(meta or {}))


def build_monolingual(text: str, vocab: Vocab, add_bos=False, meta=None) -> PromptedExample:
    """A stage-1 document: every token after the first is supervised."""
    ids = ([BOS] if add_bos else []) + vocab.encode(text) + [EOS]
    mask = [0] + [1] * (len(ids) - 1)
    return PromptedExample(ids, mask, 0, dict(meta or {}))


def translation_example(record: dict, names: dict, vocab: Vocab, add_bos=False) -> PromptedExample:
    """Prompted example from a parallel JSONL record ``{src, tgt, src_lang, tgt_lang}``."""
    src_name = names.get(record["src_lang"], record["src_lang"])
    tgt_name = names.get(record["tgt_lang"], record["tgt_lang"])
    prompt = render_prompt(src_name, tgt_name, record["src"])
    return build_example(prompt, record["tgt"], vocab, add_bos=add_bos,
                         meta={"pair": f"{record['src_lang']}-{record['tgt_lang']}"})


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")
