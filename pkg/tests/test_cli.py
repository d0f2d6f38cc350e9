from __future__ import annotations

import csv
import json
import math

import pytest

from mcmdpo import checkpoint
from mcmdpo.cli import main
from mcmdpo.losses import TERMS
from mcmdpo.pipeline import read_manifest
from mcmdpo.rejection import STRATEGY_NAMES


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    w = root / "w"
    assert run("gen-synth", "--out-dir", w, "--n-train", 48, "--n-pref", 12, "--n-test", 12) == 0
    assert run("sft", "--train", w / "train.jsonl", "--vocab", w / "vocab.json", "--epochs", 2,
               "--out-dir", root / "run") == 0
    return root


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_synth_outputs(world):
    w = world / "w"
    man = read_manifest(w / "pref_manifest.jsonl")
    assert len(man.items) == 12 and man.splits == {"train": 48, "pref": 12, "test": 12}
    assert all(it["context_rejected"] != it["context"] for it in man.items)


def test_sft_writes_checkpoint_and_reports(world):
    run_dir = world / "run"
    report = json.loads((run_dir / "sft_report.json").read_text())
    assert len(report["epochs"]) == report["config"]["epochs"] == 2
    assert "wall_time_s" in json.loads((run_dir / "sft_report.time.json").read_text())
    assert "wall_time_s" not in report
    assert checkpoint.read_meta(run_dir / "sft.ckpt.json")["stage"] == "sft"
    rows = _read_csv(run_dir / "sft_report.epochs.csv")
    assert [r["epoch"] for r in rows] == ["1", "2"]


def test_pref_report_starts_at_anchor(world, tmp_path):
    w = world / "w"
    assert run("pref", "--init-checkpoint", world / "run" / "sft.ckpt.json", "--pref", w / "pref_manifest.jsonl",
               "--test-pref", w / "test_manifest.jsonl", "--epochs", 2, "--out-dir", tmp_path) == 0
    report = json.loads((tmp_path / "mcm_dpo_report.json").read_text())
    assert abs(report["initial_loss"] - 2.8 * math.log(2)) < 1e-9
    assert set(report["epochs"][0]["terms"]) == set(TERMS)
    assert 0 <= report["pref_acc_before"] <= 1 and 0 <= report["pref_acc_after"] <= 1
    rows = _read_csv(tmp_path / "mcm_dpo_report.epochs.csv")
    assert list(rows[0]) == ["epoch", "loss", *TERMS]


def test_runs_are_byte_identical(world, tmp_path):
    w = world / "w"
    args = ["sft", "--train", w / "train.jsonl", "--vocab", w / "vocab.json", "--epochs", 1, "--out-dir", tmp_path]
    names = ["sft.ckpt.json", "sft.ckpt.json.bin", "sft_report.json", "sft_report.epochs.csv"]
    assert run(*args) == 0
    first = {n: (tmp_path / n).read_bytes() for n in names}
    assert run(*args) == 0
    assert first == {n: (tmp_path / n).read_bytes() for n in names}

    pref = ["pref", "--init-checkpoint", tmp_path / "sft.ckpt.json", "--pref", w / "pref_manifest.jsonl",
            "--epochs", 1, "--out-dir", tmp_path / "p"]
    names = ["mcm_dpo.ckpt.json", "mcm_dpo.ckpt.json.bin", "mcm_dpo_report.json"]
    assert run(*pref) == 0
    first = {n: (tmp_path / "p" / n).read_bytes() for n in names}
    assert run(*pref) == 0
    assert first == {n: (tmp_path / "p" / n).read_bytes() for n in names}


def test_eval_schema_and_repeatability(world, tmp_path, capsys):
    w, ckpt = world / "w", world / "run" / "sft.ckpt.json"
    for name in ("a", "b"):
        assert run("eval", "--checkpoint", ckpt, "--test", w / "test.jsonl", "--test-pref", w / "test_manifest.jsonl",
                   "--out", tmp_path / f"{name}.json", "--max-len", 8) == 0
    a = (tmp_path / "a.json").read_bytes()
    assert a == (tmp_path / "b.json").read_bytes()
    data = json.loads(a)
    assert {"rouge_l", "bleu4", "meteor", "cider", "pref_acc"} <= set(data)
    assert (tmp_path / "a.csv").exists()


def test_eval_on_own_outputs_scores_rouge_100(world, tmp_path):
    """Rewrite the test set so each gold alt-text is what the model generates."""
    from mcmdpo.cli import load_checkpoint, read_samples
    from mcmdpo.pipeline import RawPost, write_posts
    from mcmdpo.training import generate_texts

    w, ckpt = world / "w", world / "run" / "sft.ckpt.json"
    params, vocab, prompt = load_checkpoint(ckpt)
    samples = read_samples(w / "test.jsonl")
    generated = generate_texts(params, samples, vocab, prompt, 8)
    posts = [RawPost(s.id, s.context, g, image=s.image) for s, g in zip(samples, generated) if g]
    assert posts
    write_posts(tmp_path / "memo.jsonl", posts)
    assert run("eval", "--checkpoint", ckpt, "--test", tmp_path / "memo.jsonl", "--out", tmp_path / "m.json",
               "--max-len", 8) == 0
    assert json.loads((tmp_path / "m.json").read_text())["rouge_l"] == pytest.approx(100.0, abs=1e-9)


def _sweep(world, tmp_path, kind, grid):
    w = world / "w"
    out = tmp_path / f"{kind}.csv"
    rc = run("sweep", "--kind", kind, f"--grid={grid}", "--init-checkpoint", world / "run" / "sft.ckpt.json",
             "--pref", w / "pref_manifest.jsonl", "--epochs", 1, "--out", out)
    return rc, out


def test_sweep_gamma_grid(world, tmp_path):
    rc, out = _sweep(world, tmp_path, "gamma", "0.1,0.2,0.4")
    assert rc == 0
    rows = _read_csv(out)
    assert [float(r["gamma"]) for r in rows] == [0.1, 0.2, 0.4]


def test_sweep_ablation_multi_contributes_nothing(world, tmp_path):
    rc, out = _sweep(world, tmp_path, "ablation", "-Multi")
    assert rc == 0
    (row,) = _read_csv(out)
    t = {k: float(row[k]) for k in TERMS}
    without_mtpo = t["rpo"] + 0.5 * (t["vpo"] + t["cpo"]) + 0.2 * (t["vrpo"] + t["crpo"] + t["vcpo"])
    assert float(row["loss"]) == pytest.approx(without_mtpo, abs=1e-9)
    assert t["mtpo"] > 0  # still measured, just not weighted


def test_sweep_covers_every_strategy(world, tmp_path):
    rc, out = _sweep(world, tmp_path, "strategy", ",".join(sorted(STRATEGY_NAMES)))
    assert rc == 0
    assert sorted(r["strategy"] for r in _read_csv(out)) == sorted(STRATEGY_NAMES)
    assert len(STRATEGY_NAMES) == 5


def test_sweep_noise_grid(world, tmp_path):
    rc, out = _sweep(world, tmp_path, "noise_T", "300,700")
    assert rc == 0 and [r["noise_T"] for r in _read_csv(out)] == ["300", "700"]


def test_export_embeddings(world, tmp_path):
    out = tmp_path / "emb.csv"
    assert run("export-embeddings", "--checkpoint", world / "run" / "sft.ckpt.json",
               "--samples", world / "w" / "test.jsonl", "--out", out, "--max-len", 8) == 0
    rows = _read_csv(out)
    assert len(rows) == 24 and {r["kind"] for r in rows} == {"generated", "gold"}
    assert abs(sum(float(r["pc1"]) for r in rows)) < 1e-9


def test_build_data_offline(tmp_path):
    from mcmdpo.synth import gen_dataset, write_dataset_file

    write_dataset_file(tmp_path / "raw.jsonl", gen_dataset(0, 10, 1, 1).train)
    assert run("build-data", "--input", tmp_path / "raw.jsonl", "--out-dir", tmp_path / "out") == 0
    assert len(read_manifest(tmp_path / "out" / "pref_manifest.jsonl").items) == 10


def _diag(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


@pytest.mark.parametrize("argv,fragment", [
    (["sft", "--train", "missing.jsonl", "--out-dir", "x"], "does not exist"),
    (["pref", "--out-dir", "x"], "--init-checkpoint"),
    (["sft", "--train", "missing.jsonl", "--lr", "-1"], "lr"),
])
def test_errors_exit_nonzero_with_json(argv, fragment, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2
    diag = _diag(capsys)
    assert diag["command"] == argv[0] and fragment in diag["message"]


def test_unknown_grid_value_is_fatal(world, tmp_path, capsys):
    rc, _ = _sweep(world, tmp_path, "strategy", "diffusion,blur")
    assert rc == 2 and "blur" in _diag(capsys)["message"]
    rc, _ = _sweep(world, tmp_path, "noise_T", "1200")
    assert rc == 2


def test_vocab_mismatch_is_fatal_before_training(world, tmp_path, capsys):
    from mcmdpo.text import SPECIALS

    tokens = list(SPECIALS) + [f"w{i}" for i in range(64 - len(SPECIALS))]
    (tmp_path / "v.json").write_text(json.dumps(tokens))
    rc = run("sft", "--train", world / "w" / "train.jsonl", "--vocab", tmp_path / "v.json", "--out-dir", tmp_path)
    assert rc == 2 and "mismatch" in _diag(capsys)["message"]
    assert not (tmp_path / "sft.ckpt.json").exists()
