"""Two-stage fine-tuning: monolingual mixture (stage 1), then parallel data (stage 2)."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt_io
from . import lora
from .autograd import Tensor
from .datamix import ConfigError, compute_mixture, stats_from_shards, stream_mixture
from .decode import LMScorer, evaluate_directions, report_json
from .model import ModelConfig, forward, init_params
from .objectives import derived_rng, make_clm_batch, make_mod_batch, make_packed_clm_batch, make_prefix_lm_batch
from .prompt import Vocab, build_monolingual, read_jsonl, translation_example

log = logging.getLogger(__name__)

DECAY_KINDS = ("isqrt_linear", "isqrt", "linear")
OBJECTIVES = ("clm", "prefix_lm", "mod")


class DivergenceError(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step}: loss={loss}")
        self.step, self.loss = step, loss


@dataclass
class TrainConfig:
    stage: int = 2
    peak_lr: float = 2e-5
    warmup_ratio: float = 0.01
    weight_decay: float = 0.01
    micro_batch: int = 4
    accum_steps: int = 64
    max_seq_len: int = 512
    token_budget: int | None = None
    epochs: int | None = None
    decay_kind: str = "isqrt_linear"
    seed: int = 0
    trainable: str = "full"
    lora_rank: int = 16
    lora_alpha: float | None = None
    objective: str = "clm"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.1
    effective_batch: int | None = None
    bucket_window: int = 0
    packing: bool = True
    log_every: int = 100

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.token_budget is None and self.epochs is None:
            if self.stage == 1:
                self.token_budget = 2_000_000
            else:
                self.epochs = 2
        if (self.token_budget is None) == (self.epochs is None):
            raise ConfigError("set exactly one of token_budget / epochs")
        if self.micro_batch < 1 or self.accum_steps < 1:
            raise ConfigError("micro_batch and accum_steps must be >= 1")
        product = self.micro_batch * self.accum_steps
        if self.effective_batch is None:
            self.effective_batch = product
        elif self.effective_batch != product:
            raise ConfigError(f"effective_batch {self.effective_batch} != micro_batch {self.micro_batch}"
                              f" x accum_steps {self.accum_steps}")
        if not 0 < self.warmup_ratio < 1:
            raise ConfigError("warmup_ratio must lie in (0, 1)")
        if not 0 < self.val_fraction <= 1:
            raise ConfigError("val_fraction must lie in (0, 1]")
        if self.decay_kind not in DECAY_KINDS:
            raise ConfigError(f"decay_kind must be one of {DECAY_KINDS}")
        if self.trainable not in ("full", "lora"):
            raise ConfigError("trainable must be 'full' or 'lora'")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.token_budget is not None and self.token_budget < 0:
            raise ConfigError("token_budget must be >= 0")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.bucket_window < 0:
            raise ConfigError("bucket_window must be >= 0")

    def to_dict(self):
        return asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return {"sha256": hashlib.sha256(blob).hexdigest(), "config": self.to_dict()}


def warmup_steps(total_steps, config):
    return max(1, round(config.warmup_ratio * total_steps))


def lr_at(step, total_steps, config) -> float:
    """Linear warmup, then (by default) inverse-sqrt decay times a linear ramp to 0."""
    if total_steps < 2:
        raise ConfigError("a schedule needs at least 2 steps")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    peak, S = config.peak_lr, total_steps
    w = warmup_steps(S, config)
    if step < w:
        return peak * step / w
    if step == S:
        return 0.0 if config.decay_kind != "isqrt" else peak * math.sqrt(w / S)
    ramp = (S - step) / (S - w)
    if config.decay_kind == "linear":
        return peak * ramp
    isqrt = math.sqrt(w / step)
    if config.decay_kind == "isqrt":
        return peak * isqrt
    return peak * isqrt * ramp


class Adam:
    """Adam with decoupled weight decay (the decay multiplies lr, like AdamW)."""

    def __init__(self, tensors: dict, config: TrainConfig):
        self.tensors = tensors
        self.b1, self.b2, self.eps, self.wd = config.beta1, config.beta2, config.eps, config.weight_decay
        self.m = {n: np.zeros_like(t.data) for n, t in tensors.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in tensors.items()}
        self.t = 0

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.tensors.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            if self.wd:
                p.data *= p.dtype.type(1.0 - lr * self.wd)
            denom = v * p.dtype.type(1.0 / c2)
            np.sqrt(denom, out=denom)
            denom += p.dtype.type(self.eps)
            np.divide(m, denom, out=denom)
            denom *= p.dtype.type(lr / c1)
            p.data -= denom
            p.grad = None


def make_batch(examples, config: TrainConfig, rng, vocab_size):
    if config.objective == "prefix_lm":
        return make_prefix_lm_batch(examples, config.max_seq_len, truncate=True)
    if config.objective == "mod":
        return make_mod_batch([ex.input_ids for ex in examples], rng, vocab_size, config.max_seq_len)
    if config.packing:
        return make_packed_clm_batch(examples, config.max_seq_len, truncate=True)
    return make_clm_batch(examples, config.max_seq_len, truncate=True)


def batch_loss(params, batch, model_config, adapters=None):
    """(summed masked NLL Tensor, supervised count) for one batch."""
    logits = forward(params, batch.inputs, batch.attn_mask, model_config, adapters, batch.positions)
    return ag.masked_cross_entropy(logits, batch.labels, batch.loss_mask)


def accumulate_gradients(params, micro_batches, model_config, adapters=None):
    """Gradients of (sum NLL / sum count) over all micro-batches, left in ``.grad``.

    Returns the normalized loss.  The normalizer is the total count across the
    micro-batches, so the result does not depend on how rows are split.
    """
    total = sum(b.n_supervised for b in micro_batches)
    if total == 0:
        raise ValueError("no supervised positions in the effective batch")
    loss = 0.0
    for b in micro_batches:
        if b.n_supervised == 0:
            continue
        with ag.Tape() as tape:
            nll, _ = batch_loss(params, b, model_config, adapters)
        loss += float(nll.data)
        tape.backward(nll, grad=np.asarray(1.0 / total, dtype=nll.dtype))
    return loss / total


def evaluate_loss(params, examples, model_config, adapters=None, batch_size=32, max_len=512):
    """Per-token masked NLL over ``examples`` (no gradients)."""
    nll = count = 0.0
    with ag.no_grad():
        for i in range(0, len(examples), batch_size):
            b = make_clm_batch(examples[i:i + batch_size], max_len, truncate=True)
            s, c = batch_loss(params, b, model_config, adapters)
            nll += float(s.data)
            count += c
    return nll / count


@dataclass
class StageResult:
    best: ckpt_io.Checkpoint
    final: ckpt_io.Checkpoint
    params: dict
    adapters: object
    history: list = field(default_factory=list)  # per-step loss
    val_history: list = field(default_factory=list)
    steps: int = 0
    tokens_seen: int = 0
    seconds: float = 0.0


def snapshot_params(params, adapters=None):
    tensors = {n: t.data.copy() for n, t in params.items()}
    if adapters is not None:
        tensors.update({n: t.data.copy() for n, t in adapters.tensors().items()})
    return tensors


def make_checkpoint(tensors, model_config, config, step, val_history, **meta):
    return ckpt_io.Checkpoint(model_config.to_dict(), tensors, step, config.digest(), [list(v) for v in val_history],
                              dict(meta))


def plan_steps(n_examples, config: TrainConfig):
    per_epoch = math.ceil(n_examples / config.effective_batch)
    return per_epoch * (config.epochs or 1)


def epoch_batches(examples, config: TrainConfig, rng):
    """One epoch of effective batches (lists of example indices).

    With ``bucket_window`` > 0, a shuffled window of that many batches is
    sorted by length before slicing and the resulting batches are shuffled
    again, which cuts padding without changing what each epoch contains.
    It is off by default: length-homogeneous batches train the toy recipe
    far worse (mono-only and side-by-side documents stop sharing batches).
    """
    order = rng.permutation(len(examples))
    eff = config.effective_batch
    if not config.bucket_window:
        return [order[i:i + eff] for i in range(0, len(order), eff)]
    span = eff * config.bucket_window
    batches = []
    for w in range(0, len(order), span):
        window = sorted(order[w:w + span], key=lambda i: len(examples[i].input_ids))
        chunk = [window[i:i + eff] for i in range(0, len(window), eff)]
        batches.extend(chunk[j] for j in rng.permutation(len(chunk)))
    return batches


def validation_steps(total_steps, fraction=0.1):
    """Steps after which validation runs: every ``fraction`` of total progress."""
    k = round(1 / fraction)
    return sorted({max(1, round(total_steps * i / k)) for i in range(1, k + 1)})


def train_stage(config: TrainConfig, examples, params, model_config: ModelConfig, adapters=None, valid=None,
                on_progress=None):
    """Run one stage and return the lowest-validation and final checkpoints.

    ``examples`` are PromptedExamples (stage-1 documents or stage-2
    translations).  ``params`` is not modified; training works on a copy.
    With ``config.trainable == "lora"`` only the adapters update.
    ``on_progress(step, tokens_seen, params, adapters)`` is called after every step.
    """
    if not examples:
        raise ValueError("training data is empty")
    if config.stage == 2 and not valid:
        raise ValueError("stage 2 needs a validation set")
    rng = derived_rng(config.seed, 0)
    noise_rng = derived_rng(config.seed, 1)
    params = {n: Tensor(t.data.copy(), requires_grad=config.trainable == "full", name=n) for n, t in params.items()}
    if config.trainable == "lora":
        if adapters is None:
            adapters = lora.inject(params, config.lora_rank, config.lora_alpha, seed=config.seed)
        else:
            adapters = copy.deepcopy(adapters)
        trainable = adapters.tensors()
    else:
        adapters = None
        trainable = params
    opt = Adam(trainable, config)
    S = plan_steps(len(examples), config)
    val_at = set(validation_steps(S, config.val_fraction)) if valid else set()
    meta = dict(stage=config.stage, trainable=config.trainable, objective=config.objective)
    if adapters is not None:
        meta.update(lora_rank=adapters.rank, lora_alpha=adapters.alpha)

    history, val_history = [], []
    best_loss, best_tensors, best_step, best_tokens = math.inf, None, 0, 0
    tokens_seen, step = 0, 0
    t0 = time.time()
    for _ in range(config.epochs or 1):
        for idx in epoch_batches(examples, config, rng):
            rows = [examples[i] for i in idx]
            micro = [make_batch(rows[j:j + config.micro_batch], config, noise_rng, model_config.vocab_size)
                     for j in range(0, len(rows), config.micro_batch)]
            step += 1
            loss = accumulate_gradients(params, micro, model_config, adapters)
            if not math.isfinite(loss):
                raise DivergenceError(step, loss)
            opt.step(lr_at(step, S, config))
            tokens_seen += sum(len(ex.input_ids) for ex in rows)
            history.append(loss)
            if config.log_every and step % config.log_every == 0:
                log.info("stage %d step %d/%d loss %.4f lr %.2e", config.stage, step, S, loss, lr_at(step, S, config))
            if step in val_at:
                vl = evaluate_loss(params, valid, model_config, adapters, max_len=config.max_seq_len)
                val_history.append((step, vl))
                log.info("stage %d step %d validation loss %.4f", config.stage, step, vl)
                if vl < best_loss:
                    best_loss, best_tensors, best_step = vl, snapshot_params(params, adapters), step
                    best_tokens = tokens_seen
            if on_progress is not None:
                on_progress(step, tokens_seen, params, adapters)

    final_tensors = snapshot_params(params, adapters)
    final = make_checkpoint(final_tensors, model_config, config, step, val_history, tokens_seen=tokens_seen, **meta)
    if best_tensors is None:
        best = final
    else:
        best = make_checkpoint(best_tensors, model_config, config, best_step, val_history,
                               tokens_seen=best_tokens, best_val_loss=best_loss, **meta)
    return StageResult(best, final, params, adapters, history, val_history, step, tokens_seen, time.time() - t0)


def load_model(ckpt: ckpt_io.Checkpoint):
    """(ModelConfig, params, adapters or None) from a checkpoint."""
    cfg = ModelConfig(**ckpt.model_config)
    params = {n: Tensor(ckpt.tensors[n].copy(), name=n) for n in ckpt.base_names}
    adapters = None
    if ckpt.lora_names:
        tensors = {n: Tensor(ckpt.tensors[n].copy(), name=n) for n in ckpt.lora_names}
        adapters = lora.AdapterSet.from_tensors(tensors, ckpt.meta["lora_rank"], ckpt.meta["lora_alpha"])
    return cfg, params, adapters


# ---------------------------------------------------------------------------
# corpora and the full recipe
# ---------------------------------------------------------------------------


@dataclass
class Corpora:
    """Paths and language names for a recipe run (the toy manifest layout)."""

    vocab: str
    mono: dict  # lang -> [jsonl shard paths]
    train: str
    valid: str
    test: str
    languages: dict  # code -> display name
    directions: list = None

    def __post_init__(self):
        if self.directions is None:
            src, tgt = list(self.languages)[:2]
            self.directions = [f"{src}-{tgt}", f"{tgt}-{src}"]

    @classmethod
    def from_manifest(cls, path_or_dict, directions=None):
        m = path_or_dict
        if not isinstance(m, dict):
            m = json.loads(Path(m).read_text(encoding="utf-8"))
        p = m["parallel"]
        return cls(m["vocab"], m["mono"], p["train"], p["valid"], p["test"], m["languages"], directions)


def parallel_examples(records, directions, names, vocab, add_bos=False):
    """Prompted examples for every record in every requested direction."""
    from .decode import direction_records

    out = []
    for d in directions:
        out.extend(translation_example(r, names, vocab, add_bos) for r in direction_records(records, d))
    return out


def stage1_examples(corpora: Corpora, vocab, temperature, pinned, token_budget, seed, max_len):
    """Materialize the token-budgeted mixture stream as training documents."""
    stats = stats_from_shards(corpora.mono)
    spec = compute_mixture(stats, temperature, pinned)
    count = lambda text: len(vocab.encode(text)) + 1  # noqa: E731  (documents end with EOS)
    docs = []
    for _lang, text in stream_mixture(spec, corpora.mono, seed, token_budget, count=count):
        ex = build_monolingual(text, vocab)
        if len(ex.input_ids) > max_len:
            ex.input_ids, ex.loss_mask = ex.input_ids[:max_len], ex.loss_mask[:max_len]
        docs.append(ex)
    return spec, docs


@dataclass
class EvalSettings:
    beam: int = 5
    max_new_tokens: int = 32
    snapshot_beam: int = 1
    snapshot_limit: int | None = 50
    test_limit: int | None = None
    snapshots: int = 4


def _eval(params, model_config, adapters, vocab, corpora, beam, limit, max_new):
    scorer = LMScorer(params, model_config, adapters)
    tests = {d: read_jsonl(corpora.test) for d in corpora.directions}
    return evaluate_directions(scorer, vocab, tests, corpora.languages, beam, max_new, limit)


def _bleu_map(report):
    return {d: (r.score if hasattr(r, "score") else None) for d, r in report.items()}


def run_recipe(stage1: TrainConfig, stage2: TrainConfig, corpora: Corpora, model_config: ModelConfig,
               out_dir=None, mixture=None, evaluation: EvalSettings | None = None, base=None, seed=None):
    """Stage 1 from init (or ``base`` params), then stage 2 from its last checkpoint.

    Returns ``(final Checkpoint, metrics report dict)``.  With ``out_dir`` set,
    writes the mixture audit, per-snapshot checkpoints, final checkpoints, and
    ``metrics.json``.
    """
    mixture = dict(temperature=6.0, pinned=None) if mixture is None else mixture
    evaluation = evaluation or EvalSettings()
    seed = stage1.seed if seed is None else seed
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    vocab = Vocab.load(corpora.vocab)
    if len(vocab) != model_config.vocab_size:
        raise ConfigError(f"vocab file has {len(vocab)} tokens but model.vocab_size is {model_config.vocab_size}")
    names = corpora.languages
    train_recs, valid_recs = read_jsonl(corpora.train), read_jsonl(corpora.valid)
    valid = parallel_examples(valid_recs, corpora.directions, names, vocab)
    report = {"model": model_config.to_dict(), "stage1": stage1.to_dict(), "stage2": stage2.to_dict(),
              "directions": corpora.directions, "snapshots": []}

    params = base if base is not None else init_params(model_config, seed)

    def snapshot(tokens_seen, p, label):
        vl = evaluate_loss(p, valid, model_config, max_len=stage2.max_seq_len)
        ev = _eval(p, model_config, None, vocab, corpora, evaluation.snapshot_beam, evaluation.snapshot_limit,
                   evaluation.max_new_tokens)
        entry = {"label": label, "tokens_seen": tokens_seen, "val_loss": vl, "bleu_per_direction": _bleu_map(ev)}
        report["snapshots"].append(entry)
        log.info("snapshot %s: tokens=%d val_loss=%.4f bleu=%s", label, tokens_seen, vl, entry["bleu_per_direction"])
        return entry

    if stage1.token_budget:
        spec, docs = stage1_examples(corpora, vocab, mixture.get("temperature", 6.0), mixture.get("pinned"),
                                     stage1.token_budget, seed, stage1.max_seq_len)
        report["mixture"] = spec.to_json()
        if out:
            (out / "mixture.json").write_text(json.dumps(spec.to_json(), indent=2), encoding="utf-8")
        total_tokens = sum(len(d.input_ids) for d in docs)
        milestones = [total_tokens * (i + 1) / evaluation.snapshots for i in range(evaluation.snapshots)]
        milestones[-1] = total_tokens

        def on_progress(step, tokens_seen, p, _adapters):
            while milestones and tokens_seen >= milestones[0] - 1e-9:
                milestones.pop(0)
                snapshot(tokens_seen, p, f"stage1@{tokens_seen}")
                if out:
                    ckpt_io.save(make_checkpoint(snapshot_params(p), model_config, stage1, step, [],
                                                 tokens_seen=tokens_seen, stage=1),
                                 out / f"stage1_{tokens_seen}.ckpt")

        s1 = train_stage(stage1, docs, params, model_config, on_progress=on_progress)
        report["stage1_result"] = {"steps": s1.steps, "tokens_seen": s1.tokens_seen, "seconds": s1.seconds,
                                   "final_loss": s1.history[-1]}
        if out:
            ckpt_io.save(s1.final, out / "stage1_final.ckpt")
        params = s1.params
    else:
        report["mixture"] = None
        report["stage1_result"] = {"steps": 0, "tokens_seen": 0}

    train_ex = parallel_examples(train_recs, corpora.directions, names, vocab)
    s2 = train_stage(stage2, train_ex, params, model_config, valid=valid)
    _, best_params, best_adapters = load_model(s2.best)
    final_eval = _eval(best_params, model_config, best_adapters, vocab, corpora, evaluation.beam,
                       evaluation.test_limit, evaluation.max_new_tokens)
    report["stage2_result"] = {"steps": s2.steps, "seconds": s2.seconds, "val_history": s2.val_history,
                               "best_step": s2.best.step}
    report["final"] = {"tokens_seen": s2.best.meta.get("tokens_seen"), "val_loss": s2.best.meta.get("best_val_loss"),
                       "bleu_per_direction": report_json(final_eval)}
    if out:
        ckpt_io.save(s2.best, out / "stage2_best.ckpt")
        ckpt_io.save(s2.final, out / "stage2_final.ckpt")
        (out / "metrics.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    return s2.best, report


SWEEP_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["sizes", "directions", "runs"],
    "properties": {
        "sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "directions": {"type": "array", "items": {"type": "string"}},
        "runs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["size", "init", "bleu", "val_loss", "steps"],
                "properties": {
                    "size": {"type": "integer", "minimum": 1},
                    "init": {"enum": ["base", "scratch"]},
                    "bleu": {"type": "object", "additionalProperties": {"type": ["number", "null"]}},
                    "val_loss": {"type": "number"},
                    "steps": {"type": "integer"},
                },
            },
        },
    },
}


def validate_sweep(report):
    import jsonschema

    jsonschema.validate(report, SWEEP_SCHEMA)


def sweep_parallel_size(config: TrainConfig, corpora: Corpora, sizes, base_params, model_config: ModelConfig,
                        from_scratch=True, evaluation: EvalSettings | None = None, seed=0):
    """Stage-2 fine-tune from the same base on growing parallel subsets.

    Sizes are counted in parallel pairs (each used in every direction).  With
    ``from_scratch`` each size is also trained from a random init.
    """
    evaluation = evaluation or EvalSettings()
    vocab = Vocab.load(corpora.vocab)
    names = corpora.languages
    records = read_jsonl(corpora.train)
    sizes = sorted(int(s) for s in sizes)
    if sizes[-1] > len(records):
        raise ValueError(f"largest size {sizes[-1]} exceeds the {len(records)} available pairs")
    valid = parallel_examples(read_jsonl(corpora.valid), corpora.directions, names, vocab)
    arms = [("base", base_params)]
    if from_scratch:
        arms.append(("scratch", None))
    runs = []
    for size in sizes:
        subset = parallel_examples(records[:size], corpora.directions, names, vocab)
        for init, params in arms:
            start = params if params is not None else init_params(model_config, seed)
            res = train_stage(config, subset, start, model_config, valid=valid)
            _, p, a = load_model(res.best)
            ev = _eval(p, model_config, a, vocab, corpora, evaluation.beam, evaluation.test_limit,
                       evaluation.max_new_tokens)
            runs.append({"size": size, "init": init, "bleu": _bleu_map(ev),
                         "val_loss": float(res.best.meta.get("best_val_loss", math.nan)), "steps": res.steps})
            log.info("sweep size=%d init=%s bleu=%s", size, init, runs[-1]["bleu"])
    report = {"sizes": sizes, "directions": corpora.directions, "runs": runs}
    validate_sweep(report)
    return report
