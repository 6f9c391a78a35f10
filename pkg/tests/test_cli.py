import json

import pytest

from signctx.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main, preset_names, resolve_config
from signctx.errors import ConfigError

SMALL = [
    "--set", "generator.train_episodes=3",
    "--set", "generator.dev_episodes=1",
    "--set", "generator.sentences_per_episode=3",
    "--set", "generator.feature_dim=6",
]
TINY_MODEL = [
    "--set", "model.d_model=8",
    "--set", "model.d_ff=16",
    "--set", "model.layers=1",
    "--set", "model.heads=2",
    "--set", "train.max_epochs=2",
    "--set", "train.batch_size=4",
]


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--out", str(out), "--seed", "5", *SMALL]) == EXIT_OK
    return out


def test_synth_is_bitwise_reproducible(tmp_path, corpus):
    assert main(["synth", "--out", str(tmp_path / "b"), "--seed", "5", *SMALL]) == EXIT_OK
    assert _files(corpus) == _files(tmp_path / "b")
    assert (corpus / "train.jsonl").exists() and (corpus / "dev.jsonl").exists()


def test_spot_is_bitwise_reproducible(tmp_path, corpus, capsys):
    for name in ("a", "b"):
        assert main(["spot", "--data", str(corpus), "--out", str(tmp_path / f"{name}.tsv"), "--seed", "1"]) == EXIT_OK
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    assert "spottings written" in capsys.readouterr().out


def test_train_is_bitwise_reproducible(tmp_path, corpus):
    for name in ("a", "b"):
        assert main(["train", "--data", str(corpus), "--run", str(tmp_path / name), *TINY_MODEL]) == EXIT_OK
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "best.ckpt.npz").read_bytes() == (b / "best.ckpt.npz").read_bytes()
    strip = lambda p: [{k: v for k, v in json.loads(x).items() if k != "seconds"} for x in p.read_text().splitlines()]  # noqa: E731
    assert strip(a / "log.jsonl") == strip(b / "log.jsonl")
    assert len(strip(a / "log.jsonl")) == 2
    for f in ("vocab.json", "config.json", "summary.json", "dev_translations.tsv", "dev_metrics.json"):
        assert (a / f).exists()


def test_translate_and_evaluate(tmp_path, corpus, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", str(corpus), "--run", str(run), *TINY_MODEL]) == EXIT_OK
    capsys.readouterr()
    out = tmp_path / "t.tsv"
    ck = str(run / "best.ckpt.npz")
    assert main(["translate", "--checkpoint", ck, "--data", str(corpus), "--out", str(out)]) == EXIT_OK
    assert out.read_text().splitlines()[0] == "video_id\thypothesis\treference"
    capsys.readouterr()
    assert main(["evaluate", "--translations", str(out), "--pairs-out", str(tmp_path / "p.tsv")]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert {"bleu1", "bleu4", "rougeL", "chrf", "n_pairs"} <= set(doc)
    assert doc["n_pairs"] == 3
    feature = next((corpus / "features").rglob("*.fmat"))
    args = ["translate", "--checkpoint", ck, "--features", str(feature), "--context", "hello", "--spottings", "x"]
    assert main(args) == EXIT_OK
    assert main(args + ["--beam", "3"]) == EXIT_OK


def test_evaluate_perfect_file(tmp_path, capsys):
    (tmp_path / "t.tsv").write_text("video_id\thypothesis\treference\nv\tthe cat sat on the mat\tthe cat sat on the mat\n")
    assert main(["evaluate", "--translations", str(tmp_path / "t.tsv"), "--out", str(tmp_path / "m.json")]) == EXIT_OK
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["bleu4"] == doc["chrf"] == doc["rougeL"] == 100.0


def test_exit_codes(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["synth"]) == EXIT_USAGE
    assert main(["evaluate", "--translations", str(tmp_path / "missing.tsv")]) == EXIT_FAILURE
    assert main(["synth", "--out", str(tmp_path / "x"), "--set", "nonsense.key=1"]) == EXIT_FAILURE
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(err)["error"]
    assert main(["synth", "--out", str(tmp_path / "x"), "--preset", "no-such-preset"]) == EXIT_FAILURE


def test_config_layering(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"train.lr0": 0.5, "seed": 3}))
    cfg = resolve_config("srf-like", str(tmp_path / "c.json"), ["seed=9"])
    assert cfg["train.lr0"] == 0.5 and cfg["seed"] == 9 and cfg["preset"] == "srf-like"
    with pytest.raises(ConfigError):
        resolve_config(sets=["noequals"])


def test_presets_resolve():
    assert {"srf-like", "bobsl-like", "overfit-32", "homonym-small"} <= set(preset_names())
    for name in preset_names():
        resolve_config(name)


def test_ablate_writes_table(tmp_path, corpus, capsys):
    run = tmp_path / "abl"
    assert main(["ablate", "--data", str(corpus), "--run", str(run), "--rows", "V,C+V", *TINY_MODEL]) == EXIT_OK
    rows = json.loads((run / "ablation.json").read_text())
    assert [r["streams"] for r in rows] == ["V", "C+V"]
    assert rows[0].get("self_bleu4") is None and "self_bleu4" in rows[1]
    table = (run / "ablation.md").read_text().splitlines()
    assert table[0].startswith("| streams | BLEU-1 | BLEU-4")
    assert len(table) == 4
