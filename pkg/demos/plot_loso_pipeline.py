"""
Leave-one-speaker-out pipeline from the command line
====================================================

synth-corpus, mix, train (every fold, every architecture, clean and noisy
training), evaluate and report, all driven through the CLI entry point.
Epochs are cut to 20 so this runs in a few minutes; numbers are not
meaningful at that budget.
"""

import tempfile
from pathlib import Path

from jointser.cli import run

out = Path(tempfile.mkdtemp()) / "run"
env = {"JOINTSER_TRAIN__EPOCHS": "20"}

assert run(["synth-corpus", "--speakers", "2", "--per-speaker", "4", "--out", str(out / "corpus")], env) == 0
assert run(["mix", "--out", str(out)], env) == 0
for trained_on in ("clean", "noise"):
    for arch in ("asr_baseline", "ser_baseline", "joint"):
        assert run(["train", "--all-folds", "--arch", arch, "--trained-on", trained_on, "--out", str(out)], env) == 0
assert run(["evaluate", "--out", str(out)], env) == 0
assert run(["report", "--out", str(out)], env) == 0

print((out / "report" / "report.md").read_text())
