"""Pooled WER/accuracy scoring, relative improvement and the scenario result matrix."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .audio import MelConfig, load_wav
from .corpus import SCENARIOS, FoldPlan, ScenarioSet, normalize_transcript
from .model import EMOTIONS, Checkpoint, load_checkpoint
from .training import Example, predict

TASKS = ("asr", "ser")
CELL_ARCHITECTURES = ("baseline", "joint")
TRAINED_ON = ("clean", "noise")
SCHEMA_VERSION = 1

SCENARIO_LABELS = {
    "clean": "Clean",
    "noise_snr15": "SNR 15 Noise",
    "noise_snr5": "SNR 5 Noise",
    "music_snr15": "SNR 15 Music",
    "music_snr5": "SNR 5 Music",
    "speech_snr15": "SNR 15 Speech",
    "speech_snr5": "SNR 5 Speech",
}

# Which trained model supplies each (cell architecture, task).
MODEL_FOR_CELL = {
    ("baseline", "asr"): "asr_baseline",
    ("baseline", "ser"): "ser_baseline",
    ("joint", "asr"): "joint",
    ("joint", "ser"): "joint",
}


class EvalError(ValueError):
    code = "eval_error"


class LeakageError(EvalError):
    code = "speaker_leakage"


class IncompleteReportError(EvalError):
    code = "incomplete_report"


# --------------------------------------------------------------------------
# Word error rate


@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.errors / self.ref_words


def word_edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> WerBreakdown:
    """Levenshtein alignment over words with a deterministic backtrace.

    On equal cost the backtrace prefers match/substitution, then deletion,
    then insertion.
    """
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise EvalError("empty reference")
    n, m = len(ref), len(hyp)
    # plain lists: the tables are tiny and numpy scalar indexing dominates otherwise
    cost = [list(range(m + 1))]
    for i in range(1, n + 1):
        row = [i] + [0] * m
        prev = cost[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (ref[i - 1] != hyp[j - 1]), prev[j] + 1, row[j - 1] + 1)
        cost.append(row)
    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i][j] == cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and cost[i][j] == cost[i - 1][j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerBreakdown(int(s), d, ins, n)


def wer_pair(ref: str, hyp: str) -> WerBreakdown:
    return word_edit_distance(normalize_transcript(ref).split(), normalize_transcript(hyp or "").split())


def corpus_wer(pairs: Sequence[tuple[str, str]]) -> float:
    """Pooled WER in percent: total edits over total reference words."""
    if not pairs:
        raise EvalError("no (reference, hypothesis) pairs to score")
    errors = words = 0
    for ref, hyp in pairs:
        b = wer_pair(ref, hyp)
        errors += b.errors
        words += b.ref_words
    return 100.0 * errors / words


# --------------------------------------------------------------------------
# Emotion accuracy


def _check_labels(labels, preds):
    if len(labels) != len(preds):
        raise EvalError(f"{len(labels)} labels vs {len(preds)} predictions")
    for x in list(labels) + list(preds):
        if x not in EMOTIONS:
            raise EvalError(f"unknown emotion label {x!r}")


def ser_accuracy(labels: Sequence[str], preds: Sequence[str]) -> float:
    _check_labels(labels, preds)
    if not labels:
        raise EvalError("no predictions to score")
    return 100.0 * sum(a == b for a, b in zip(labels, preds)) / len(labels)


def confusion(labels: Sequence[str], preds: Sequence[str]) -> np.ndarray:
    """Rows are true classes, columns predictions, both in EMOTIONS order."""
    _check_labels(labels, preds)
    mat = np.zeros((len(EMOTIONS), len(EMOTIONS)), dtype=np.int64)
    for a, b in zip(labels, preds):
        mat[EMOTIONS.index(a), EMOTIONS.index(b)] += 1
    return mat


def unweighted_recall(mat: np.ndarray) -> float:
    """Mean per-class recall over classes present in the labels, in percent."""
    totals = mat.sum(axis=1)
    present = totals > 0
    return float(100.0 * np.mean(np.diag(mat)[present] / totals[present]))


# --------------------------------------------------------------------------
# Relative improvement


def relative_improvement(baseline: float, joint: float, task: str) -> float:
    """Improvement of joint over baseline, positive when joint is better.

    ASR uses the relative WER reduction 100 * (baseline - joint) / baseline.
    SER uses the plain accuracy difference in percentage points, which is
    what the published comparison tables do for accuracy.
    """
    if task == "asr":
        if baseline == 0:
            raise EvalError("relative WER improvement undefined for a zero baseline WER")
        return 100.0 * (baseline - joint) / baseline
    if task == "ser":
        return joint - baseline
    raise EvalError(f"unknown task {task!r}")


# --------------------------------------------------------------------------
# Report


def cell_key(*parts) -> str:
    return "|".join(parts)


@dataclass(frozen=True)
class ScenarioResult:
    scenario: str
    architecture: str
    trained_on: str
    task: str
    value: float


@dataclass
class EvalReport:
    cells: list = field(default_factory=list)
    rel_imp: dict = field(default_factory=dict)  # "scenario|trained_on|task" -> value
    confusion: dict = field(default_factory=dict)  # "scenario|architecture|trained_on" -> 4x4 list
    uar: dict = field(default_factory=dict)  # same keys as confusion
    per_fold: dict = field(default_factory=dict)  # "scenario|architecture|trained_on|task" -> [per-fold values]
    meta: dict = field(default_factory=dict)
    schema: int = SCHEMA_VERSION

    def value(self, scenario, architecture, trained_on, task) -> float:
        for c in self.cells:
            if (c.scenario, c.architecture, c.trained_on, c.task) == (scenario, architecture, trained_on, task):
                return c.value
        raise KeyError((scenario, architecture, trained_on, task))

    def missing_cells(self) -> list[str]:
        have = {(c.scenario, c.architecture, c.trained_on, c.task) for c in self.cells}
        missing = []
        for sc in SCENARIOS:
            for task in TASKS:
                for on in TRAINED_ON:
                    for arch in CELL_ARCHITECTURES:
                        if (sc, arch, on, task) not in have:
                            missing.append(cell_key(sc, arch, on, task))
        return missing

    def compute_rel_imp(self):
        self.rel_imp = {}
        for sc in SCENARIOS:
            for on in TRAINED_ON:
                for task in TASKS:
                    try:
                        base = self.value(sc, "baseline", on, task)
                        joint = self.value(sc, "joint", on, task)
                    except KeyError:
                        continue
                    try:
                        self.rel_imp[cell_key(sc, on, task)] = relative_improvement(base, joint, task)
                    except EvalError:
                        self.rel_imp[cell_key(sc, on, task)] = None
        return self.rel_imp

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cells"] = [asdict(c) for c in self.cells]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        if d.get("schema") != SCHEMA_VERSION:
            raise EvalError(f"unsupported report schema {d.get('schema')!r}")
        return cls(
            cells=[ScenarioResult(**c) for c in d["cells"]],
            rel_imp=dict(d["rel_imp"]),
            confusion={k: [list(r) for r in v] for k, v in d["confusion"].items()},
            uar=dict(d["uar"]),
            per_fold={k: list(v) for k, v in d["per_fold"].items()},
            meta=dict(d.get("meta", {})),
            schema=d["schema"],
        )


def check_no_leakage(ckpt: Checkpoint, fold, where: str = ""):
    meta = ckpt.meta
    if fold.test_speaker in meta.get("train_speakers", []):
        raise LeakageError(f"{where}: checkpoint was trained on test speaker {fold.test_speaker!r}")
    overlap = set(meta.get("train_ids", [])) & set(fold.test_ids)
    if overlap:
        raise LeakageError(f"{where}: checkpoint saw {len(overlap)} test utterances, e.g. {sorted(overlap)[0]!r}")
    if "test_speaker" in meta and meta["test_speaker"] != fold.test_speaker:
        raise LeakageError(
            f"{where}: checkpoint is for fold {meta['test_speaker']!r}, not {fold.test_speaker!r}"
        )


def _scenario_examples(sc: ScenarioSet, ids, mel):
    out = []
    for rec in sc.records:
        if rec.id in ids:
            audio = sc.audio.get(rec.id) if sc.audio else None
            if audio is None:
                audio = load_wav(rec.wav)
            out.append(Example(rec.id, rec.transcript, rec.emotion, rec.speaker, audio, mel=mel))
    return out


def evaluate_scenarios(
    checkpoints: Mapping,
    scenarios: Sequence[ScenarioSet],
    fold_plan: FoldPlan,
    mel=None,
) -> EvalReport:
    """Score every (architecture, training condition) model on every scenario.

    ``checkpoints[(trained_on, model_architecture)][test_speaker]`` holds a
    :class:`Checkpoint` (or a path to one) trained without that speaker, for
    model architectures ``asr_baseline``, ``ser_baseline`` and ``joint``.
    Predictions of all folds are pooled before scoring.
    """
    mel = mel or MelConfig()
    names = [sc.name for sc in scenarios]
    if sorted(names) != sorted(SCENARIOS):
        raise EvalError(f"expected the seven scenarios {SCENARIOS}, got {names}")
    report = EvalReport()
    # pooled[(scenario, model_arch, trained_on)] = (refs, hyps, labels, preds, per-fold tuples)
    for on in TRAINED_ON:
        for model_arch in ("asr_baseline", "ser_baseline", "joint"):
            per_speaker = checkpoints.get((on, model_arch))
            if per_speaker is None:
                raise EvalError(f"missing checkpoints for {model_arch} trained on {on}")
            models = {}
            for fold in fold_plan:
                if fold.test_speaker not in per_speaker:
                    raise EvalError(f"no {model_arch}/{on} checkpoint for fold {fold.test_speaker!r}")
                ckpt = per_speaker[fold.test_speaker]
                if not isinstance(ckpt, Checkpoint):
                    ckpt = load_checkpoint(ckpt)
                check_no_leakage(ckpt, fold, f"{model_arch}/{on}")
                if ckpt.architecture != model_arch:
                    raise EvalError(f"expected a {model_arch} checkpoint, got {ckpt.architecture}")
                models[fold.test_speaker] = ckpt.build()
            for sc in scenarios:
                pairs, labels, preds, fold_vals = [], [], [], {"asr": [], "ser": []}
                for fold in fold_plan:
                    examples = _scenario_examples(sc, fold.test_ids, mel)
                    if not examples:
                        continue
                    hyps, emos = predict(models[fold.test_speaker], examples)
                    if model_arch != "ser_baseline":
                        fp = [(ex.transcript, h) for ex, h in zip(examples, hyps)]
                        pairs += fp
                        fold_vals["asr"].append(corpus_wer(fp))
                    if model_arch != "asr_baseline":
                        fl = [ex.emotion for ex in examples]
                        labels += fl
                        preds += emos
                        fold_vals["ser"].append(ser_accuracy(fl, emos))
                arch = "baseline" if model_arch != "joint" else "joint"
                if pairs:
                    report.cells.append(ScenarioResult(sc.name, arch, on, "asr", corpus_wer(pairs)))
                    report.per_fold[cell_key(sc.name, arch, on, "asr")] = fold_vals["asr"]
                if labels:
                    report.cells.append(ScenarioResult(sc.name, arch, on, "ser", ser_accuracy(labels, preds)))
                    report.per_fold[cell_key(sc.name, arch, on, "ser")] = fold_vals["ser"]
                    mat = confusion(labels, preds)
                    report.confusion[cell_key(sc.name, arch, on)] = mat.tolist()
                    report.uar[cell_key(sc.name, arch, on)] = unweighted_recall(mat)
    report.cells.sort(key=lambda c: (SCENARIOS.index(c.scenario), c.task, c.trained_on, c.architecture))
    report.compute_rel_imp()
    report.meta["folds"] = fold_plan.speakers()
    return report


# --------------------------------------------------------------------------
# Rendering

REL_IMP_NOTE = (
    "Rel Imp: ASR is the relative WER reduction 100*(baseline-joint)/baseline; "
    "SER is the accuracy difference joint-baseline in percentage points. "
    "Both are positive when the joint model is better."
)


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.1f}"


def render_markdown(report: EvalReport) -> str:
    missing = report.missing_cells()
    if missing:
        raise IncompleteReportError(f"report is missing cells: {', '.join(missing)}")
    lines = []
    titles = {"asr": "ASR performance: word error rate (%)", "ser": "SER performance: accuracy (%)"}
    for task in TASKS:
        lines += [f"## {titles[task]}", ""]
        header = ["Test set"]
        for on in TRAINED_ON:
            label = "Clean" if on == "clean" else "Noise"
            header += [f"Trained on {label}: Baseline", f"Trained on {label}: Joint", f"Trained on {label}: Rel Imp"]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" + "---:|" * (len(header) - 1))
        for sc in SCENARIOS:
            row = [SCENARIO_LABELS[sc]]
            for on in TRAINED_ON:
                row += [
                    _fmt(report.value(sc, "baseline", on, task)),
                    _fmt(report.value(sc, "joint", on, task)),
                    _fmt(report.rel_imp.get(cell_key(sc, on, task))),
                ]
            lines.append("| " + " | ".join(row) + " |")
        lines.append("")
    lines += [f"_{REL_IMP_NOTE} Scores pool the predictions of all folds._", ""]
    return "\n".join(lines)


def plot_report(report: EvalReport, out_dir) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    paths = []
    x = np.arange(len(SCENARIOS))
    series = [(arch, on) for on in TRAINED_ON for arch in CELL_ARCHITECTURES]
    width = 0.8 / len(series)
    for task in TASKS:
        fig, ax = plt.subplots(figsize=(9, 4))
        for k, (arch, on) in enumerate(series):
            vals = [report.value(sc, arch, on, task) for sc in SCENARIOS]
            ax.bar(x + (k - 1.5) * width, vals, width, label=f"{arch} / trained on {on}")
        ax.set_xticks(x, [SCENARIO_LABELS[s] for s in SCENARIOS], rotation=20)
        ax.set_ylabel("WER (%)" if task == "asr" else "accuracy (%)")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / f"{task}.png"
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths


def emit_report(report: EvalReport, out_dir, formats=("json", "md", "png")) -> list[Path]:
    missing = report.missing_cells()
    if missing:
        raise IncompleteReportError(f"report is missing cells: {', '.join(missing)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        path = out / "report.json"
        path.write_text(report.to_json())
        written.append(path)
    if "md" in formats:
        path = out / "report.md"
        path.write_text(render_markdown(report))
        written.append(path)
    if "png" in formats:
        written += plot_report(report, out)
    return written


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))
