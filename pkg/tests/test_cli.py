"""End-to-end command-line behavior: exit codes, file outputs, precedence."""

import json

import pytest

from melformer.cli import main

TINY_MODEL = ["--d-model", "16", "--heads", "2", "--d-ff", "32", "--dropout", "0.0",
              "--layers-text", "1", "--layers-cross", "1", "--layers-fusion", "1",
              "--num-classes", "2"]
TINY_RUN = ["--lr", "3e-3", "--batch-size", "5", "--max-epochs", "2",
            "--patience", "5", "--seeds", "0", "--workers", "1"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    raw = root / "raw"
    assert main(["gen-synthetic", "--out", str(raw), "--classes", "2",
                 "--per-class", "5", "--seed", "11"]) == 0
    feats = root / "feats"
    assert main(["featurize", "--manifest", str(raw / "manifest.jsonl"),
                 "--out-dir", str(feats)]) == 0
    return root, raw, feats / "manifest.jsonl"


def test_gen_synthetic_writes_corpus(corpus):
    _, raw, _ = corpus
    assert len(list(raw.glob("*.wav"))) == 10
    assert (raw / "manifest.jsonl").exists()
    assert (raw / "uemb.txt").exists()
    assert (raw / "wordvecs.txt").exists()


def test_featurize_second_run_skips_everything(corpus, capsys):
    _, raw, feats_manifest = corpus
    capsys.readouterr()
    assert main(["featurize", "--manifest", str(raw / "manifest.jsonl"),
                 "--out-dir", str(feats_manifest.parent)]) == 0
    out = capsys.readouterr().out
    assert "features written: 0, unchanged: 10" in out


def test_missing_config_exits_one_with_message(capsys):
    assert main(["train", "--config", "missing.json"]) == 1
    assert "error: config not found: missing.json" in capsys.readouterr().err


def test_missing_manifest_exits_one(capsys):
    assert main(["train", "--manifest", "nowhere.jsonl"] + TINY_MODEL + TINY_RUN) == 1
    assert "error: manifest not found" in capsys.readouterr().err


def test_usage_error_exits_two():
    with pytest.raises(SystemExit) as exc:
        main(["definitely-not-a-command"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--seeds", "zero,one"])
    assert exc.value.code == 2


def test_train_writes_results_and_config_echo(corpus, tmp_path, capsys):
    _, _, manifest = corpus
    out = tmp_path / "run"
    rc = main(["train", "--manifest", str(manifest), "--out-dir", str(out)]
              + TINY_MODEL + TINY_RUN)
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "WA " in stdout and "UA " in stdout

    echoed = json.loads((out / "config.json").read_text())
    assert echoed["harness"]["lr"] == pytest.approx(3e-3)
    assert echoed["model"]["d_model"] == 16

    doc = json.loads((out / "results.json").read_text())
    assert len(doc["folds"]) == 5
    assert len(doc["run_id"]) == 12
    assert (out / "table.txt").exists()
    assert list(out.glob("seed0-fold*-best.ckpt"))


def test_flags_override_config_file(corpus, tmp_path):
    _, _, manifest = corpus
    cfg_file = tmp_path / "base.json"
    cfg_file.write_text(json.dumps({
        "model": {k.replace("-", "_"): v for k, v in zip(
            ["d_model", "heads", "d_ff", "dropout", "layers_text", "layers_cross",
             "layers_fusion", "num_classes"], [16, 2, 32, 0.0, 1, 1, 1, 2])},
        "harness": {"lr": 1e-5, "batch_size": 5, "max_epochs": 1,
                    "patience": 5, "seeds": [0]},
        "manifest": str(manifest),
    }))
    out = tmp_path / "run"
    rc = main(["train", "--config", str(cfg_file), "--lr", "0.002",
               "--out-dir", str(out)])
    assert rc == 0
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["harness"]["lr"] == pytest.approx(0.002)   # flag wins
    assert echoed["harness"]["batch_size"] == 5              # file value kept


def test_unknown_config_key_is_rejected(corpus, tmp_path, capsys):
    cfg_file = tmp_path / "bad.json"
    cfg_file.write_text(json.dumps({"harness": {"learning_rate": 1e-3}}))
    assert main(["train", "--config", str(cfg_file)]) == 1
    assert "unknown config key 'learning_rate'" in capsys.readouterr().err


def test_eval_and_predict_roundtrip(corpus, tmp_path, capsys):
    root, raw, manifest = corpus
    out = tmp_path / "run"
    assert main(["train", "--manifest", str(manifest), "--out-dir", str(out)]
                + TINY_MODEL + TINY_RUN) == 0
    ckpt = str(out / "seed0-fold0-best.ckpt")
    capsys.readouterr()

    assert main(["eval", "--checkpoint", ckpt, "--manifest", str(manifest)]) == 0
    eval_out = capsys.readouterr().out
    assert "WA " in eval_out and "recall[angry]" in eval_out and "confusion" in eval_out

    wav = str(raw / "angry-000.wav")
    assert main(["predict", "--checkpoint", ckpt, "--wav", wav,
                 "--transcript", "stop shouting right now"]) == 0
    pred_out = capsys.readouterr().out
    assert "predicted: " in pred_out
    probs = [float(line.split()[1]) for line in pred_out.splitlines()[:2]]
    assert all(0.0 <= p <= 1.0 for p in probs)


def test_multi_granularity_with_embedding_file(corpus, tmp_path):
    root, raw, manifest = corpus
    out = tmp_path / "multi"
    rc = main(["train", "--manifest", str(manifest), "--out-dir", str(out),
               "--granularity", "multi", "--utt-embeddings", str(raw / "uemb.txt")]
              + TINY_MODEL + TINY_RUN)
    assert rc == 0
    assert (out / "results.json").exists()


def test_multi_granularity_missing_coverage(corpus, tmp_path, capsys):
    _, _, manifest = corpus
    empty = tmp_path / "empty.txt"
    empty.write_text("UEMB 4\n")
    rc = main(["train", "--manifest", str(manifest), "--out-dir", str(tmp_path / "x"),
               "--granularity", "multi", "--utt-embeddings", str(empty)]
              + TINY_MODEL + TINY_RUN)
    assert rc == 1
    assert "no embedding" in capsys.readouterr().err


def test_sweep_rows_keep_grid_order(corpus, tmp_path, capsys):
    _, _, manifest = corpus
    out = tmp_path / "sweep"
    rc = main(["sweep", "--manifest", str(manifest), "--out-dir", str(out),
               "--layers", "text=1", "cross=1", "fusion=1,2"]
              + TINY_MODEL + TINY_RUN)
    assert rc == 0
    table = (out / "table.txt").read_text().splitlines()
    assert "fusion=1" in table[1] and "fusion=2" in table[2]
    doc = json.loads((out / "sweep.json").read_text())
    assert [d["layers"]["fusion"] for d in doc] == [1, 2]
    assert (out / "text1-cross1-fusion2" / "results.json").exists()


def test_gradcheck_command_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "transformer end to end" in out
    assert "FAIL" not in out
