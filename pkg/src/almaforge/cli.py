"""Command-line entry point: ``almaforge <command> [<subcommand>] ...``.

Machine-readable JSON goes to stdout, logs to stderr.  Exit codes: 0 ok,
2 configuration error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .datamix import ConfigError, DataError

log = logging.getLogger("almaforge")


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2, ensure_ascii=False) + "\n")
    sys.stdout.flush()


def _keys_epilog(*sections):
    from .config import documented_keys

    keys = documented_keys()
    lines = ["config keys read (TOML):"]
    for s in sections:
        lines.append(f"  [{s}] " + ", ".join(keys[s]) if s != "(top level)" else "  " + ", ".join(keys[s]))
    return "\n".join(lines)


def _pin(text):
    lang, _, val = text.partition("=")
    if not lang or not val:
        raise argparse.ArgumentTypeError(f"expected LANG=FRACTION, got {text!r}")
    try:
        return lang, float(val)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number in {text!r}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_mix_compute(args):
    from .datamix import LanguageCorpusStat, compute_mixture

    try:
        raw = json.loads(Path(args.stats).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"--stats file not found: {args.stats}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--stats is not valid JSON: {exc}") from None
    if isinstance(raw, dict):
        stats = [LanguageCorpusStat(k, float(v)) for k, v in raw.items()]
    else:
        stats = [LanguageCorpusStat(r["language"], float(r["word_count"])) for r in raw]
    pinned = dict(args.pin) if args.pin is not None else None
    if args.no_pin:
        pinned = {}
    spec = compute_mixture(stats, args.temperature, pinned)
    _emit({"probabilities": spec.probabilities, "temperature": spec.temperature, "pinned": spec.pinned})
    return 0


def cmd_gen_toy(args):
    from .datamix import gen_toy_corpus

    manifest = gen_toy_corpus(args.out, seed=args.seed, vocab_size=args.vocab_size, n_sentences=args.n_sentences,
                              transform=args.transform, mono_tokens=args.mono_tokens,
                              bilingual_rate=args.bilingual_rate, label_rate=args.label_rate,
                              model_vocab=args.model_vocab)
    _emit(manifest)
    return 0


def _load(args):
    from .config import load_config

    return load_config(args.config, getattr(args, "seed", None))


def _out_dir(args, cfg, default):
    out = args.out or cfg.out_dir or default
    Path(out).mkdir(parents=True, exist_ok=True)
    return Path(out)


def cmd_train_stage1(args):
    from . import checkpoint as ckpt_io
    from .model import init_params
    from .prompt import Vocab
    from .trainer import stage1_examples, train_stage

    cfg = _load(args)
    out = _out_dir(args, cfg, "runs/stage1")
    vocab = Vocab.load(cfg.corpora.vocab)
    spec, docs = stage1_examples(cfg.corpora, vocab, cfg.mixture["temperature"], cfg.mixture["pinned"],
                                 cfg.stage1.token_budget, cfg.seed, cfg.stage1.max_seq_len)
    (out / "mixture.json").write_text(json.dumps(spec.to_json(), indent=2), encoding="utf-8")
    if not docs:
        raise ConfigError("stage1.token_budget is 0: nothing to train")
    res = train_stage(cfg.stage1, docs, init_params(cfg.model, cfg.seed), cfg.model)
    ckpt_io.save(res.final, out / "stage1_final.ckpt")
    _emit({"checkpoint": str(out / "stage1_final.ckpt"), "steps": res.steps, "tokens_seen": res.tokens_seen,
           "final_loss": res.history[-1], "mixture": spec.to_json()})
    return 0


def cmd_train_stage2(args):
    from . import checkpoint as ckpt_io
    from .decode import LMScorer, evaluate_directions, report_json
    from .model import init_params
    from .prompt import Vocab, read_jsonl
    from .trainer import load_model, parallel_examples, train_stage

    cfg = _load(args)
    out = _out_dir(args, cfg, "runs/stage2")
    stage2 = cfg.stage2
    if args.trainable:
        import dataclasses
        stage2 = dataclasses.replace(stage2, trainable=args.trainable)
    if args.init:
        model_cfg, params, _ = load_model(ckpt_io.load(args.init))
    else:
        model_cfg, params = cfg.model, init_params(cfg.model, cfg.seed)
    vocab = Vocab.load(cfg.corpora.vocab)
    names, dirs = cfg.corpora.languages, cfg.corpora.directions
    train = parallel_examples(read_jsonl(cfg.corpora.train), dirs, names, vocab)
    valid = parallel_examples(read_jsonl(cfg.corpora.valid), dirs, names, vocab)
    res = train_stage(stage2, train, params, model_cfg, valid=valid)
    ckpt_io.save(res.best, out / "stage2_best.ckpt")
    ckpt_io.save(res.final, out / "stage2_final.ckpt")
    _, bp, ba = load_model(res.best)
    tests = {d: read_jsonl(cfg.corpora.test) for d in dirs}
    ev = evaluate_directions(LMScorer(bp, model_cfg, ba), vocab, tests, names, cfg.evaluation.beam,
                             cfg.evaluation.max_new_tokens, cfg.evaluation.test_limit)
    _emit({"checkpoint": str(out / "stage2_best.ckpt"), "steps": res.steps, "val_history": res.val_history,
           "best_step": res.best.step, "bleu_per_direction": report_json(ev)})
    return 0


def cmd_recipe_run(args):
    from .plotting import plot_metrics
    from .trainer import run_recipe

    cfg = _load(args)
    out = _out_dir(args, cfg, "runs/recipe")
    if args.config:
        (out / "config.toml").write_text(Path(args.config).read_text(encoding="utf-8"), encoding="utf-8")
    _, report = run_recipe(cfg.stage1, cfg.stage2, cfg.corpora, cfg.model, out_dir=out, mixture=cfg.mixture,
                           evaluation=cfg.evaluation, seed=cfg.seed)
    if not args.no_plot:
        report["figure"] = str(plot_metrics(report, out / "metrics.png"))
    _emit(report)
    return 0


def cmd_sweep(args):
    from . import checkpoint as ckpt_io
    from .model import init_params
    from .plotting import plot_sweep
    from .trainer import load_model, sweep_parallel_size

    cfg = _load(args)
    out = _out_dir(args, cfg, "runs/sweep")
    if args.base:
        model_cfg, params, _ = load_model(ckpt_io.load(args.base))
    else:
        model_cfg, params = cfg.model, init_params(cfg.model, cfg.seed)
    sizes = args.sizes or cfg.sweep.get("sizes") or [10, 100, 1000]
    scratch = cfg.sweep.get("from_scratch", True) and not args.no_scratch
    report = sweep_parallel_size(cfg.stage2, cfg.corpora, sizes, params, model_cfg, from_scratch=scratch,
                                 evaluation=cfg.evaluation, seed=cfg.seed)
    (out / "sweep.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    if not args.no_plot:
        report["figure"] = str(plot_sweep(report, out / "sweep.png"))
    _emit(report)
    return 0


def cmd_translate(args):
    from . import checkpoint as ckpt_io
    from .datamix import LANG_NAMES
    from .decode import LMScorer, translate
    from .prompt import Vocab
    from .trainer import load_model

    model_cfg, params, adapters = load_model(ckpt_io.load(args.checkpoint))
    vocab = Vocab.load(args.vocab)
    if len(vocab) != model_cfg.vocab_size:
        raise ConfigError(f"--vocab has {len(vocab)} tokens; the checkpoint expects {model_cfg.vocab_size}")
    src = args.src_name or LANG_NAMES.get(args.src_lang, args.src_lang)
    tgt = args.tgt_name or LANG_NAMES.get(args.tgt_lang, args.tgt_lang)
    lines = args.text if args.text else Path(args.input).read_text(encoding="utf-8").splitlines()
    scorer = LMScorer(params, model_cfg, adapters)
    for line in lines:
        hyp = translate(scorer, vocab, line, src, tgt, args.beam, args.max_new_tokens)
        sys.stdout.write(json.dumps({"src": line, "hyp": hyp}, ensure_ascii=False) + "\n")
    return 0


def cmd_bleu(args):
    from .bleu import corpus_bleu

    hyps = Path(args.hyp).read_text(encoding="utf-8").splitlines()
    refs = Path(args.ref).read_text(encoding="utf-8").splitlines()
    if len(hyps) != len(refs):
        raise DataError(f"{args.hyp} has {len(hyps)} lines but {args.ref} has {len(refs)}")
    _emit(corpus_bleu(hyps, refs, args.tokenizer, args.smoothing).to_json())
    return 0


def cmd_inspect(args):
    from . import checkpoint as ckpt_io
    from .model import ModelConfig, param_count

    ck = ckpt_io.load(args.checkpoint)
    cfg = ModelConfig(**ck.model_config)
    full = sum(int(ck.tensors[n].size) for n in ck.base_names)
    lora_n = sum(int(ck.tensors[n].size) for n in ck.lora_names)
    _emit({"model_config": ck.model_config, "step": ck.step, "params_full": full,
           "params_closed_form": param_count(cfg), "params_lora": lora_n,
           "trainable": ck.meta.get("trainable"), "lora_rank": ck.meta.get("lora_rank"),
           "val_history": ck.val_history, "meta": ck.meta, "train_digest": ck.train_digest.get("sha256")})
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="almaforge", description="Two-stage translation fine-tuning on toy corpora.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    mix = sub.add_parser("mix", help="language mixture tools").add_subparsers(dest="sub", required=True)
    mc = mix.add_parser("compute", help="temperature-sampled language ratios from word counts")
    mc.add_argument("--stats", required=True, help='JSON {"lang": word_count} or [{"language", "word_count"}]')
    mc.add_argument("--temperature", type=float, default=6.0)
    mc.add_argument("--pin", type=_pin, action="append", metavar="LANG=FRACTION",
                    help="fixed fraction for a language (repeatable; default en=1/6)")
    mc.add_argument("--no-pin", action="store_true", help="pin nothing")
    mc.set_defaults(func=cmd_mix_compute)

    data = sub.add_parser("data", help="corpus tools").add_subparsers(dest="sub", required=True)
    g = data.add_parser("gen-toy", help="write a synthetic bilingual corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--vocab-size", type=int, default=200, help="lexemes per toy language")
    g.add_argument("--n-sentences", type=int, default=2000, help="parallel training pairs")
    g.add_argument("--transform", choices=("cipher", "reverse"), default="cipher")
    g.add_argument("--mono-tokens", type=int, default=2_000_000)
    g.add_argument("--bilingual-rate", type=float, default=0.5)
    g.add_argument("--label-rate", type=float, default=0.5)
    g.add_argument("--model-vocab", type=int, default=512)
    g.set_defaults(func=cmd_gen_toy)

    train = sub.add_parser("train", help="run one stage").add_subparsers(dest="sub", required=True)
    t1 = train.add_parser("stage1", help="full-weight training on the monolingual mixture", formatter_class=fmt,
                          epilog=_keys_epilog("(top level)", "model", "data", "mixture", "stage1"))
    t2 = train.add_parser("stage2", help="parallel fine-tuning (full or LoRA)", formatter_class=fmt,
                          epilog=_keys_epilog("(top level)", "model", "data", "stage2", "eval"))
    t2.add_argument("--init", help="checkpoint to start from (default: random init)")
    t2.add_argument("--trainable", choices=("full", "lora"))
    for t, fn in ((t1, cmd_train_stage1), (t2, cmd_train_stage2)):
        t.add_argument("--config", required=True)
        t.add_argument("--out")
        t.add_argument("--seed", type=int, help="overrides ALMAFORGE_SEED and the config seed")
        t.set_defaults(func=fn)

    rec = sub.add_parser("recipe", help="full two-stage recipe").add_subparsers(dest="sub", required=True)
    rr = rec.add_parser("run", help="stage 1 + stage 2 + evaluation", formatter_class=fmt,
                        epilog=_keys_epilog("(top level)", "model", "data", "mixture", "stage1", "stage2", "eval"))
    rr.add_argument("--config", required=True)
    rr.add_argument("--out")
    rr.add_argument("--seed", type=int)
    rr.add_argument("--no-plot", action="store_true")
    rr.set_defaults(func=cmd_recipe_run)

    sw = sub.add_parser("sweep", help="BLEU against parallel-data size", formatter_class=fmt,
                        epilog=_keys_epilog("(top level)", "model", "data", "stage2", "eval", "sweep"))
    sw.add_argument("--config", required=True)
    sw.add_argument("--base", help="stage-1 checkpoint shared by every size")
    sw.add_argument("--sizes", type=lambda s: [int(x) for x in s.split(",")], help="comma-separated pair counts")
    sw.add_argument("--no-scratch", action="store_true", help="skip the random-init arm")
    sw.add_argument("--out")
    sw.add_argument("--seed", type=int)
    sw.add_argument("--no-plot", action="store_true")
    sw.set_defaults(func=cmd_sweep)

    tr = sub.add_parser("translate", help="decode sentences with a checkpoint")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--vocab", required=True)
    tr.add_argument("--src-lang", required=True)
    tr.add_argument("--tgt-lang", required=True)
    tr.add_argument("--src-name")
    tr.add_argument("--tgt-name")
    src = tr.add_mutually_exclusive_group(required=True)
    src.add_argument("--text", nargs="+")
    src.add_argument("--input", help="file with one source sentence per line")
    tr.add_argument("--beam", type=int, default=5)
    tr.add_argument("--max-new-tokens", type=int, default=64)
    tr.set_defaults(func=cmd_translate)

    b = sub.add_parser("bleu", help="corpus BLEU of line-aligned files")
    b.add_argument("--hyp", required=True)
    b.add_argument("--ref", required=True)
    b.add_argument("--tokenizer", choices=("13a", "zh", "none"), default="13a")
    b.add_argument("--smoothing", choices=("exp", "none"), default="exp")
    b.set_defaults(func=cmd_bleu)

    ins = sub.add_parser("inspect", help="summarize a checkpoint")
    ins.add_argument("checkpoint")
    ins.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        sys.stderr.write(f"almaforge: config error: {exc}\n")
        return 2
    except (CheckpointError, DataError, OSError, ValueError, RuntimeError) as exc:
        sys.stderr.write(f"almaforge: error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
