import json

import pytest

from jointser.cli import DEFAULTS, env_overrides, run


def error_line(capsys):
    lines = [l for l in capsys.readouterr().err.splitlines() if l.strip()]
    return json.loads(lines[-1])


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_corpus(tmp_path, capsys):
    out = tmp_path / "d"
    assert run(["synth-corpus", "--speakers", "2", "--per-speaker", "4", "--seed", "7", "--out", str(out)], {}) == 0
    assert len(list((out / "wav").glob("*.wav"))) == 8
    assert len((out / "manifest.jsonl").read_text().splitlines()) == 8
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["seed"] == 7 and len(cfg["config_hash"]) == 16
    event = json.loads(capsys.readouterr().err.splitlines()[-1])
    assert event["event"] == "synth-corpus" and event["utterances"] == 8


def test_rerun_is_byte_identical(tmp_path):
    args = ["--seed", "3", "--out", str(tmp_path / "run")]
    assert run(["synth-corpus", "--out", str(tmp_path / "run" / "corpus"), "--seed", "3"], {}) == 0
    assert run(["mix", *args], {}) == 0
    first = tree_bytes(tmp_path / "run")
    assert run(["mix", *args], {}) == 0
    assert tree_bytes(tmp_path / "run") == first
    assert len(list((tmp_path / "run" / "mix" / "scenarios").glob("*/manifest.jsonl"))) == 7


def test_fold_out_of_range(tmp_path, capsys):
    corpus = tmp_path / "run" / "corpus"
    run(["synth-corpus", "--out", str(corpus)], {})
    (tmp_path / "c.json").write_text(json.dumps({"out": str(tmp_path / "run")}))
    code = run(["train", "--config", str(tmp_path / "c.json"), "--fold", "3"], {})
    assert code != 0
    err = error_line(capsys)
    assert err["code"] == "invalid_config" and "out of range" in err["message"]


def test_unknown_subcommand(capsys):
    assert run(["frobnicate"], {}) != 0
    assert error_line(capsys)["level"] == "error"


def test_missing_subcommand(capsys):
    assert run([], {}) != 0
    assert "subcommand" in error_line(capsys)["message"]


def test_invalid_config_names_fields(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"learning_rate": -1}, "trained_on": "both", "colour": 1}))
    assert run(["gradcheck", "--config", str(path), "--out", str(tmp_path)], {}) == 2
    msg = error_line(capsys)["message"]
    assert "learning_rate" in msg and "trained_on" in msg and "colour" in msg


def test_env_overrides():
    env = {"JOINTSER_SEED": "4", "JOINTSER_TRAIN__EPOCHS": "12", "JOINTSER_OUT": "x/y", "HOME": "/root"}
    assert env_overrides(env) == {"seed": 4, "train": {"epochs": 12}, "out": "x/y"}


def test_precedence(tmp_path):
    cfg_path = tmp_path / "c.json"
    out = tmp_path / "corpus"
    cfg_path.write_text(json.dumps({"seed": 1, "synth": {"speakers": 3, "per_speaker": 1}}))
    env = {"JOINTSER_SEED": "2", "JOINTSER_SYNTH__PER_SPEAKER": "2"}
    assert run(["synth-corpus", "--config", str(cfg_path), "--seed", "5", "--out", str(out)], env) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["seed"] == 5 and cfg["train"]["seed"] == 5
    assert cfg["synth"] == {"speakers": 3, "per_speaker": 2}
    assert len((out / "manifest.jsonl").read_text().splitlines()) == 6


def test_missing_manifest(tmp_path, capsys):
    assert run(["mix", "--out", str(tmp_path / "nothing")], {}) != 0
    assert "manifest" in error_line(capsys)["message"]


def test_gradcheck(tmp_path):
    assert run(["gradcheck", "--out", str(tmp_path)], {}) == 0
    results = json.loads((tmp_path / "gradcheck.json").read_text())
    assert set(results) == {"asr_baseline", "ser_baseline", "joint"}
    assert all(r["passed"] and r["worst"] < 1e-4 for r in results.values())


def test_defaults_are_valid():
    from jointser.cli import validate_config

    validate_config(json.loads(json.dumps(DEFAULTS)))
