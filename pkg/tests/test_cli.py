import json
import subprocess
import sys

import pytest

from almaforge import checkpoint as ckpt_io
from almaforge.cli import build_parser, main
from almaforge.config import documented_keys
from almaforge.lora import count_trainable
from almaforge.model import ModelConfig, param_count
from conftest import FIXTURES


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["data", "gen-toy", "--out", str(root / "data"), "--vocab-size", "30", "--n-sentences", "40",
                 "--mono-tokens", "4000", "--model-vocab", "160"]) == 0
    cfg = root / "toy.toml"
    cfg.write_text((FIXTURES / "toy_small.toml").read_text() + '\n[data]\nmanifest = "data/manifest.json"\n')
    return root


@pytest.fixture(scope="module")
def recipe(workspace):
    out = workspace / "run"
    assert main(["recipe", "run", "--config", str(workspace / "toy.toml"), "--out", str(out)]) == 0
    return out


def test_mix_compute_published_counts(capsys, tmp_path):
    stats = tmp_path / "counts.json"
    stats.write_text((FIXTURES / "word_counts_billions.json").read_text())
    code, out, _ = run(capsys, "mix", "compute", "--stats", stats, "--temperature", 6, "--pin", "en=0.16667")
    assert code == 0
    probs = json.loads(out)["probabilities"]
    for lang, p in {"de": 0.20, "cs": 0.14, "is": 0.08, "zh": 0.19, "ru": 0.22, "en": 0.17}.items():
        assert abs(probs[lang] - p) <= 0.02


def test_mix_compute_errors(capsys, tmp_path):
    code, _, err = run(capsys, "mix", "compute", "--stats", tmp_path / "missing.json")
    assert code == 2 and "--stats" in err
    (tmp_path / "s.json").write_text('{"de": 1, "zh": 2}')
    code, _, err = run(capsys, "mix", "compute", "--stats", tmp_path / "s.json")
    assert code == 2 and "'en'" in err


def test_bleu_identity(capsys, tmp_path):
    (tmp_path / "h.txt").write_text("a b c d\nthe cat sat\n")
    code, out, _ = run(capsys, "bleu", "--hyp", tmp_path / "h.txt", "--ref", tmp_path / "h.txt", "--tokenizer", "13a")
    assert code == 0 and json.loads(out)["bleu"] == pytest.approx(100.0)
    (tmp_path / "r.txt").write_text("a b c d\n")
    code, _, _ = run(capsys, "bleu", "--hyp", tmp_path / "h.txt", "--ref", tmp_path / "r.txt")
    assert code == 1


def test_recipe_outputs(recipe):
    report = json.loads((recipe / "metrics.json").read_text())
    assert set(report["final"]["bleu_per_direction"]) == {"lx-hz", "hz-lx"}
    assert len(report["snapshots"]) == 2
    for name in ("stage1_final.ckpt", "stage2_best.ckpt", "stage2_final.ckpt", "mixture.json", "metrics.png",
                 "config.toml"):
        assert (recipe / name).exists(), name


def test_recipe_is_reproducible(workspace, recipe, capsys):
    out2 = workspace / "run2"
    code, out, _ = run(capsys, "recipe", "run", "--config", workspace / "toy.toml", "--out", out2, "--no-plot")
    assert code == 0
    a = json.loads((recipe / "metrics.json").read_text())
    b = json.loads(out)
    assert a["final"] == b["final"]
    assert a["stage2_result"]["val_history"] == b["stage2_result"]["val_history"]
    assert (recipe / "stage2_best.ckpt").read_bytes() == (out2 / "stage2_best.ckpt").read_bytes()


def test_inspect(recipe, capsys):
    code, out, _ = run(capsys, "inspect", recipe / "stage2_best.ckpt")
    info = json.loads(out)
    assert code == 0
    assert info["params_full"] == info["params_closed_form"] == param_count(ModelConfig(**info["model_config"]))
    assert info["params_lora"] == 0
    assert info["val_history"]


def test_inspect_lora_checkpoint(workspace, recipe, capsys):
    out = workspace / "lora"
    code, stdout, err = run(capsys, "train", "stage2", "--config", workspace / "toy.toml", "--out", out,
                            "--init", recipe / "stage1_final.ckpt", "--trainable", "lora")
    assert code == 0, err
    code, stdout, _ = run(capsys, "inspect", out / "stage2_best.ckpt")
    info = json.loads(stdout)
    cfg = ModelConfig(**info["model_config"])
    assert info["params_lora"] == cfg.n_layers * 16 * (cfg.d_ff + cfg.d_model)
    ck = ckpt_io.load(out / "stage2_best.ckpt")
    assert info["params_lora"] == count_trainable({n: ck.tensors[n] for n in ck.lora_names})


def test_inspect_bad_files(tmp_path, recipe, capsys):
    blob = (recipe / "stage2_best.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(blob[:len(blob) // 2])
    code, _, err = run(capsys, "inspect", tmp_path / "cut.ckpt")
    assert code == 1 and "truncated" in err
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    code, _, err = run(capsys, "inspect", tmp_path / "junk.ckpt")
    assert code == 1 and "magic" in err


def test_translate(recipe, workspace, capsys):
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    code, out, _ = run(capsys, "translate", "--checkpoint", recipe / "stage2_best.ckpt", "--vocab", manifest["vocab"],
                       "--src-lang", "lx", "--tgt-lang", "hz", "--text", "pala", "--beam", 2, "--max-new-tokens", 4)
    assert code == 0
    row = json.loads(out.splitlines()[0])
    assert row["src"] == "pala" and isinstance(row["hyp"], str)


def test_stage1_then_sweep(workspace, capsys):
    code, out, err = run(capsys, "train", "stage1", "--config", workspace / "toy.toml", "--out", workspace / "s1")
    assert code == 0, err
    ck = json.loads(out)["checkpoint"]
    code, out, err = run(capsys, "sweep", "--config", workspace / "toy.toml", "--base", ck, "--out",
                         workspace / "sweep")
    assert code == 0, err
    report = json.loads(out)
    assert report["sizes"] == [5, 10, 20]
    assert {r["init"] for r in report["runs"]} == {"base", "scratch"}
    assert (workspace / "sweep" / "sweep.png").exists()


def test_config_error_exit_code(workspace, capsys):
    bad = workspace / "bad.toml"
    bad.write_text((workspace / "toy.toml").read_text().replace("[stage2]\n", "[stage2]\nlearning_rate = 1\n"))
    code, out, err = run(capsys, "recipe", "run", "--config", bad)
    assert code == 2 and "stage2.learning_rate" in err and out == ""


def test_help_lists_config_keys():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    text = sub["recipe"]._subparsers._group_actions[0].choices["run"].format_help()
    for section in ("model", "data", "mixture", "stage1", "stage2", "eval"):
        for key in documented_keys()[section]:
            assert key in text, (section, key)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "almaforge", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "recipe" in res.stdout
