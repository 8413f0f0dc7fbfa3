"""Greedy and beam-search decoding, and per-direction BLEU evaluation."""

from __future__ import annotations

import logging

import numpy as np

from . import autograd as ag
from .bleu import corpus_bleu
from .model import causal_mask, forward
from .prompt import EOS, render_prompt

log = logging.getLogger(__name__)

# Target languages scored with the zh tokenizer.
CJK_LANGS = {"zh", "ja", "hz"}


class LMScorer:
    """Next-token log-probabilities from the toy model for equal-length prefixes."""

    def __init__(self, params, config, adapters=None):
        self.params, self.config, self.adapters = params, config, adapters

    @property
    def max_len(self):
        return self.config.max_len

    def __call__(self, seqs) -> np.ndarray:
        ids = np.asarray(seqs, dtype=np.int64)
        T = ids.shape[1]
        with ag.no_grad():
            logits = forward(self.params, ids, causal_mask(T), self.config, self.adapters).data[:, -1]
        return ag.log_softmax_np(logits.astype(np.float64))


def _budget(model, prompt_len, max_new_tokens):
    limit = getattr(model, "max_len", None)
    if limit is not None:
        if prompt_len >= limit:
            raise ValueError(f"prompt of {prompt_len} tokens leaves no room under max_len {limit}")
        max_new_tokens = min(max_new_tokens, limit - prompt_len)
    return max_new_tokens


def greedy(model, prompt_ids, max_new_tokens=64, eos=EOS):
    """Argmax continuation (lowest id wins ties); includes the EOS if produced."""
    seq = list(prompt_ids)
    out = []
    for _ in range(_budget(model, len(seq), max_new_tokens)):
        tok = int(np.argmax(model([seq + out])[0]))
        out.append(tok)
        if tok == eos:
            break
    return out


def beam_search(model, prompt_ids, beam=5, max_new_tokens=64, eos=EOS, return_score=False):
    """Beam search over total log-probability, without length normalization.

    Each step expands every live hypothesis by every token and ranks the
    candidates by score, then by the lower token-id sequence.  EOS candidates
    ranked within the top ``beam`` enter the done set; the best non-EOS
    candidates refill the live beam.  Search stops once the done set holds
    ``beam`` hypotheses that all score at least as well as every live one, or
    after ``max_new_tokens``; the best of done and live is returned.
    """
    if beam < 1:
        raise ValueError("beam size must be >= 1")
    prompt = list(prompt_ids)
    live = [(0.0, [])]
    done = []
    for _ in range(_budget(model, len(prompt), max_new_tokens)):
        logp = model([prompt + seq for _, seq in live])
        cands = []
        for (score, seq), row in zip(live, logp):
            for tok in range(row.shape[0]):
                cands.append((score + float(row[tok]), seq + [tok]))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for rank, (score, seq) in enumerate(cands):
            if seq[-1] == eos:
                if rank < beam:
                    done.append((score, seq))
            else:
                live.append((score, seq))
                if len(live) == beam:
                    break
        done.sort(key=lambda c: (-c[0], c[1]))
        done = done[:beam]
        if not live or (len(done) >= beam and done[-1][0] >= live[0][0]):
            break
    best = min(done + live, key=lambda c: (-c[0], c[1]))
    return (best[1], best[0]) if return_score else best[1]


def translate(model, vocab, source, src_name, tgt_name, beam=5, max_new_tokens=64, add_bos=False):
    prompt = vocab.encode(render_prompt(src_name, tgt_name, source))
    if add_bos:
        from .prompt import BOS
        prompt = [BOS] + prompt
    ids = greedy(model, prompt, max_new_tokens) if beam == 1 else beam_search(model, prompt, beam, max_new_tokens)
    return vocab.decode(ids)


def direction_records(records, direction):
    """Records for ``"src-tgt"``, swapping fields when the corpus runs the other way."""
    src, tgt = direction.split("-")
    out = []
    for r in records:
        if (r["src_lang"], r["tgt_lang"]) == (src, tgt):
            out.append(r)
        elif (r["src_lang"], r["tgt_lang"]) == (tgt, src):
            out.append({"src": r["tgt"], "tgt": r["src"], "src_lang": src, "tgt_lang": tgt})
    return out


def tokenizer_for(lang):
    return "zh" if lang in CJK_LANGS else "13a"


def evaluate_directions(model, vocab, tests: dict, names: dict, beam=5, max_new_tokens=64, limit=None):
    """Decode every test segment and score it per direction.

    ``tests`` maps ``"src-tgt"`` to a list of parallel records (or None when the
    corpus is missing, which is reported as skipped).  Returns
    ``{direction: BleuReport | {"skipped": reason}}``.
    """
    report = {}
    for direction, records in tests.items():
        recs = direction_records(records or [], direction)[:limit]
        if not recs:
            log.warning("no test corpus for %s; skipping", direction)
            report[direction] = {"skipped": "missing test corpus"}
            continue
        src, tgt = direction.split("-")
        hyps = [translate(model, vocab, r["src"], names.get(src, src), names.get(tgt, tgt), beam, max_new_tokens)
                for r in recs]
        report[direction] = corpus_bleu(hyps, [r["tgt"] for r in recs], tokenizer=tokenizer_for(tgt))
    return report


def report_json(report):
    return {d: (r.to_json() if hasattr(r, "to_json") else r) for d, r in report.items()}
