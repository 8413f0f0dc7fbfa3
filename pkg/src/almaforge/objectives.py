"""Batch construction for causal LM, prefix LM, and mixture-of-denoisers training.

Every builder returns a :class:`Batch` of (inputs, labels, loss_mask,
attention mask).  Labels are the inputs shifted left by one, so
``loss_mask[b, t]`` says whether the prediction made at position ``t`` (of
token ``t + 1``) counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .prompt import EOS, N_SENTINELS, PAD, PromptedExample

REGULAR, EXTREME, SEQUENTIAL, SPAN = "Regular", "Extreme", "Sequential", "Span"
_SPAN_DEFAULTS = {REGULAR: (3.0, 0.15), EXTREME: (32.0, 0.25)}
# Regular, Extreme, Sequential
DENOISER_PROBS = (0.25, 0.25, 0.5)


@dataclass(frozen=True)
class DenoiserTask:
    """One denoising objective.

    ``Regular`` and ``Extreme`` carry their fixed span parameters;
    ``Sequential`` is prefix-LM continuation.  ``Span`` is a free-form span
    corruption task (any mean span / rate) for ablations and tests.
    """

    kind: str
    mean_span: float | None = None
    corruption_rate: float | None = None

    def __post_init__(self):
        if self.kind in _SPAN_DEFAULTS:
            expected = _SPAN_DEFAULTS[self.kind]
            if (self.mean_span, self.corruption_rate) == (None, None):
                object.__setattr__(self, "mean_span", expected[0])
                object.__setattr__(self, "corruption_rate", expected[1])
            elif (self.mean_span, self.corruption_rate) != expected:
                raise ValueError(f"{self.kind} denoiser is fixed at mean_span={expected[0]}, rate={expected[1]}")
        elif self.kind == SEQUENTIAL:
            if self.mean_span is not None or self.corruption_rate is not None:
                raise ValueError("Sequential denoiser has no span parameters")
        elif self.kind == SPAN:
            if self.mean_span is None or self.mean_span <= 0 or not 0 <= (self.corruption_rate or 0) < 1:
                raise ValueError("Span task needs mean_span > 0 and 0 <= corruption_rate < 1")
        else:
            raise ValueError(f"unknown denoiser kind {self.kind!r}")

    @property
    def is_span(self):
        return self.kind != SEQUENTIAL


def derived_rng(seed: int, shard: int = 0) -> np.random.Generator:
    """Independent PCG64 stream for (global seed, shard index)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, shard])))


def sample_denoiser(rng: np.random.Generator) -> DenoiserTask:
    u = rng.random()
    if u < DENOISER_PROBS[0]:
        return DenoiserTask(REGULAR)
    if u < DENOISER_PROBS[0] + DENOISER_PROBS[1]:
        return DenoiserTask(EXTREME)
    return DenoiserTask(SEQUENTIAL)


def span_counts(length: int, task: DenoiserTask) -> tuple[int, int]:
    """(num_noise, num_spans) for a sequence of ``length`` tokens."""
    num_noise = int(round(task.corruption_rate * length))
    if num_noise < 1:
        return 0, 0
    return num_noise, max(1, int(round(num_noise / task.mean_span)))


def _random_composition(rng, total, parts):
    """Uniformly random split of ``total`` items into ``parts`` nonempty runs."""
    if parts == 1:
        return np.array([total])
    cuts = np.sort(rng.choice(total - 1, parts - 1, replace=False)) + 1
    return np.diff(np.concatenate(([0], cuts, [total])))


def corrupt_spans(tokens, task: DenoiserTask, rng, vocab_size: int, n_sentinels=N_SENTINELS):
    """T5-style span corruption.

    Returns ``(corrupted_input, target)``.  The sequence is laid out as
    alternating kept/noise runs starting with a kept run, so spans are never
    adjacent.  Span ``k`` is replaced by sentinel ``vocab_size - 1 - k``; the
    target is ``s_0 span_0 s_1 span_1 ... EOS``.
    """
    if not task.is_span:
        raise ValueError("corrupt_spans needs a span task, not Sequential")
    tokens = list(tokens)
    L = len(tokens)
    if L < 2:
        raise ValueError("sequence too short: span corruption needs at least 2 tokens")
    num_noise, num_spans = span_counts(L, task)
    if num_spans == 0:
        return tokens, []
    if num_spans > n_sentinels:
        raise ValueError(f"{num_spans} spans exceed the {n_sentinels} reserved sentinel ids")
    if L - num_noise < num_spans:
        raise ValueError(f"sequence too short: {L} tokens cannot host {num_spans} spans of {num_noise} noise tokens")
    noise_lens = _random_composition(rng, num_noise, num_spans)
    keep_lens = _random_composition(rng, L - num_noise, num_spans)

    inp, tgt, pos = [], [], 0
    for k in range(num_spans):
        inp.extend(tokens[pos:pos + keep_lens[k]])
        pos += keep_lens[k]
        sentinel = vocab_size - 1 - k
        inp.append(sentinel)
        tgt.append(sentinel)
        tgt.extend(tokens[pos:pos + noise_lens[k]])
        pos += noise_lens[k]
    tgt.append(EOS)
    return inp, tgt


def uncorrupt(corrupted, target, vocab_size: int, n_sentinels=N_SENTINELS):
    """Splice target spans back into sentinel positions (inverse of corrupt_spans)."""
    lo = vocab_size - n_sentinels
    spans, cur = {}, None
    for t in target:
        if t == EOS:
            break
        if t >= lo:
            cur = t
            spans[cur] = []
        else:
            spans[cur].append(t)
    out = []
    for t in corrupted:
        out.extend(spans[t] if t >= lo else [t])
    return out


def build_prefix_mask(prefix_len: int, total_len: int) -> np.ndarray:
    if not 0 <= prefix_len <= total_len:
        raise ValueError(f"prefix_len {prefix_len} outside [0, {total_len}]")
    m = np.tri(total_len, dtype=bool)
    m[:prefix_len, :prefix_len] = True
    return m


@dataclass
class Batch:
    inputs: np.ndarray      # [B, T] int64
    labels: np.ndarray      # [B, T] int64, inputs shifted left, PAD at the end
    loss_mask: np.ndarray   # [B, T] float32 0/1
    attn_mask: np.ndarray   # [T, T] shared causal, or [B, T, T] per row
    prefix_lens: np.ndarray  # [B] int64 (0 for causal rows)
    positions: np.ndarray | None = None  # [B, T] position ids; None means 0..T-1 in every row

    @property
    def n_supervised(self) -> int:
        return int(self.loss_mask.sum())

    def rows(self, idx):
        """Sub-batch view used for gradient accumulation."""
        attn = self.attn_mask[idx] if self.attn_mask.ndim == 3 else self.attn_mask
        pos = None if self.positions is None else self.positions[idx]
        return Batch(self.inputs[idx], self.labels[idx], self.loss_mask[idx], attn, self.prefix_lens[idx], pos)


def _fit(ex: PromptedExample, max_len, truncate):
    ids, mask = list(ex.input_ids), list(ex.loss_mask)
    if len(ids) != len(mask):
        raise ValueError("input_ids and loss_mask lengths differ")
    if len(ids) > max_len:
        if not truncate:
            raise ValueError(f"example of {len(ids)} tokens exceeds max_len {max_len}")
        ids, mask = ids[:max_len], mask[:max_len]
    return ids, mask


def _pack(examples, max_len, truncate):
    if not examples:
        raise ValueError("empty batch")
    fitted = [_fit(ex, max_len, truncate) for ex in examples]
    B, T = len(fitted), max(len(ids) for ids, _ in fitted)
    inputs = np.full((B, T), PAD, dtype=np.int64)
    labels = np.full((B, T), PAD, dtype=np.int64)
    loss_mask = np.zeros((B, T), dtype=np.float32)
    for b, (ids, mask) in enumerate(fitted):
        n = len(ids)
        inputs[b, :n] = ids
        labels[b, :n - 1] = ids[1:]
        loss_mask[b, :n - 1] = mask[1:]
    return inputs, labels, loss_mask


def make_clm_batch(examples, max_len=512, truncate=False) -> Batch:
    inputs, labels, loss_mask = _pack(examples, max_len, truncate)
    T = inputs.shape[1]
    return Batch(inputs, labels, loss_mask, np.tri(T, dtype=bool), np.zeros(len(examples), dtype=np.int64))


def make_packed_clm_batch(examples, max_len=512, truncate=False) -> Batch:
    """Causal batch with several examples per row, first-fit by decreasing length.

    Each example keeps its own causal block (no attention across examples) and
    position ids restart at 0, so the loss and gradients equal those of
    ``make_clm_batch`` on the same examples while far less padding is computed.
    """
    if not examples:
        raise ValueError("empty batch")
    fitted = [_fit(ex, max_len, truncate) for ex in examples]
    W = max(len(ids) for ids, _ in fitted)
    rows, free = [], []
    for k in sorted(range(len(fitted)), key=lambda k: -len(fitted[k][0])):
        n = len(fitted[k][0])
        for r, room in enumerate(free):
            if room >= n:
                rows[r].append(k)
                free[r] -= n
                break
        else:
            rows.append([k])
            free.append(W - n)
    B = len(rows)
    inputs = np.full((B, W), PAD, dtype=np.int64)
    labels = np.full((B, W), PAD, dtype=np.int64)
    loss_mask = np.zeros((B, W), dtype=np.float32)
    positions = np.zeros((B, W), dtype=np.int64)
    attn = np.zeros((B, W, W), dtype=bool)
    attn[:, np.arange(W), np.arange(W)] = True  # padding attends to itself only
    for b, members in enumerate(rows):
        start = 0
        for k in members:
            ids, mask = fitted[k]
            n, end = len(ids), start + len(ids)
            inputs[b, start:end] = ids
            labels[b, start:end - 1] = ids[1:]
            loss_mask[b, start:end - 1] = mask[1:]
            positions[b, start:end] = np.arange(n)
            attn[b, start:end, start:end] = np.tri(n, dtype=bool)
            start = end
    return Batch(inputs, labels, loss_mask, attn, np.zeros(B, dtype=np.int64), positions)


def make_prefix_lm_batch(examples, max_len=512, truncate=False, prefix_lens=None) -> Batch:
    """Like make_clm_batch, but row ``b`` attends bidirectionally over its prefix.

    The prefix defaults to each example's ``prompt_len``; predictions of
    tokens inside the prefix are never supervised.
    """
    inputs, labels, loss_mask = _pack(examples, max_len, truncate)
    B, T = inputs.shape
    if prefix_lens is None:
        prefix_lens = [ex.prompt_len for ex in examples]
    prefix_lens = np.minimum(np.asarray(prefix_lens, dtype=np.int64), T)
    attn = np.empty((B, T, T), dtype=bool)
    for b, p in enumerate(prefix_lens):
        attn[b] = build_prefix_mask(int(p), T)
        # position t predicts token t + 1; those inside the prefix are context only
        loss_mask[b, :max(int(p) - 1, 0)] = 0
    return Batch(inputs, labels, loss_mask, attn, prefix_lens)


def denoising_example(tokens, task: DenoiserTask, rng, vocab_size: int) -> PromptedExample:
    """One mixture-of-denoisers training row from a plain token sequence.

    Span tasks give ``corrupted ∥ target`` with the corrupted input as a
    bidirectional prefix and loss on the target only.  Sequential picks a
    uniformly random split point and continues the prefix.
    """
    tokens = list(tokens)
    if task.is_span:
        inp, tgt = corrupt_spans(tokens, task, rng, vocab_size)
        if not tgt:
            # nothing corrupted: fall back to plain continuation of the whole row
            return PromptedExample(tokens, [0] + [1] * (len(tokens) - 1), 0, {"denoiser": task.kind})
        ids = inp + tgt
        return PromptedExample(ids, [0] * len(inp) + [1] * len(tgt), len(inp), {"denoiser": task.kind})
    if len(tokens) < 2:
        raise ValueError("sequence too short for sequential denoising")
    p = int(rng.integers(1, len(tokens)))
    return PromptedExample(tokens, [0] * p + [1] * (len(tokens) - p), p, {"denoiser": task.kind})


def make_mod_batch(token_rows, rng, vocab_size: int, max_len=512) -> Batch:
    """Mixture-of-denoisers batch: one denoiser drawn per row."""
    examples = []
    for tokens in token_rows:
        task = sample_denoiser(rng)
        n = min(len(tokens), max_len)
        # corrupted input plus target is L + 2 * spans + 1 tokens long
        while task.is_span and n + 2 * span_counts(n, task)[1] + 1 > max_len:
            n -= 1
        examples.append(denoising_example(list(tokens)[:n], task, rng, vocab_size))
    return make_prefix_lm_batch(examples, max_len=max_len, truncate=True)
