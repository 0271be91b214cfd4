"""Command-line driver: synth-corpus, mix, train, evaluate, gradcheck, report.

Configuration is a JSON file (``--config``). Precedence, lowest first:
built-in defaults, the config file, ``JOINTSER_*`` environment variables,
command-line flags. Environment variables name a top-level key
(``JOINTSER_SEED=3``) or a nested one with a double underscore
(``JOINTSER_TRAIN__EPOCHS=50``); values are parsed as JSON when possible.
The effective configuration is written next to every output.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .audio import AudioError, MelConfig, load_wav
from .corpus import (
    CorpusError,
    build_test_scenarios,
    corrupt_training_set,
    load_manifest,
    load_noise_pool,
    load_scenarios,
    make_loso_folds,
    save_noise_pool,
    synth_noise_pool,
    synth_toy_corpus,
    write_manifest,
    write_provenance,
    write_scenarios,
)
from .ctc import CTCInfeasibleError
from .evaluation import EvalError, emit_report, evaluate_scenarios, load_report
from .model import ARCHITECTURES, ModelDims, ModelError, SpeechModel, config_hash, load_checkpoint
from .training import Example, TrainConfig, TrainingError, fit, grad_check

ENV_PREFIX = "JOINTSER_"
TRAINED_ON = ("clean", "noise")

DEFAULTS = {
    "seed": 0,
    "out": "run",
    "corpus_manifest": None,
    "noise_pool": None,
    "disjoint_noise": True,
    "synth": {"speakers": 2, "per_speaker": 4},
    "mel": asdict(MelConfig()),
    "train": TrainConfig().to_dict(),
    "trained_on": "clean",
    "fold": None,
    "all_folds": False,
    "jobs": 1,
    "gradcheck": {"eps": 1e-5, "tol": 1e-4},
}


class ConfigError(ValueError):
    code = "invalid_config"


log = logging.getLogger("jointser")


class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        payload = {"level": record.levelname.lower(), "event": record.getMessage()}
        payload.update(getattr(record, "fields", {}))
        return json.dumps(payload, sort_keys=True)


def setup_logging(level=logging.INFO):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger("jointser")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def info(event, **fields):
    log.info(event, extra={"fields": fields})


# --------------------------------------------------------------------------
# Configuration


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    over: dict = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX) :].lower().split("__")
        node = over
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = _parse_env_value(raw)
    return over


def validate_config(cfg: dict) -> dict:
    errors = []
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        errors.append(f"unknown fields: {sorted(unknown)}")
    try:
        MelConfig(**cfg["mel"])
    except (TypeError, ValueError) as exc:
        errors.append(f"mel: {exc}")
    try:
        TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as exc:
        errors.append(f"train: {exc}")
    if cfg["trained_on"] not in TRAINED_ON:
        errors.append(f"trained_on: must be one of {TRAINED_ON}")
    if not isinstance(cfg["jobs"], int) or cfg["jobs"] < 1:
        errors.append("jobs: must be a positive integer")
    if not isinstance(cfg["seed"], int):
        errors.append("seed: must be an integer")
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def resolve_config(args, environ=None) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            cfg = _merge(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
    cfg = _merge(cfg, env_overrides(environ))
    flag_map = {
        "seed": ("seed",),
        "out": ("out",),
        "fold": ("fold",),
        "all_folds": ("all_folds",),
        "jobs": ("jobs",),
        "arch": ("train", "architecture"),
        "trained_on": ("trained_on",),
        "epochs": ("train", "epochs"),
        "alpha": ("train", "alpha"),
        "speakers": ("synth", "speakers"),
        "per_speaker": ("synth", "per_speaker"),
        "manifest": ("corpus_manifest",),
        "noise_pool": ("noise_pool",),
    }
    for attr, path in flag_map.items():
        value = getattr(args, attr, None)
        if value is None or value is False:
            continue
        node = cfg
        for part in path[:-1]:
            node = node[part]
        node[path[-1]] = value
    # One global seed drives corpus, mixing and training.
    cfg["train"]["seed"] = cfg["seed"]
    return validate_config(cfg)


def write_config(cfg: dict, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    snapshot = {**cfg, "config_hash": config_hash(cfg)}
    path = directory / "config.json"
    path.write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    return path


def _require_path(path, what):
    if path is None or not Path(path).exists():
        raise ConfigError(f"{what} not found: {path}")
    return Path(path)


def _corpus_manifest(cfg) -> Path:
    path = cfg["corpus_manifest"] or Path(cfg["out"]) / "corpus" / "manifest.jsonl"
    return _require_path(path, "corpus manifest")


# --------------------------------------------------------------------------
# Subcommands


def cmd_synth_corpus(cfg):
    out = Path(cfg["out"])
    records = synth_toy_corpus(cfg["synth"]["speakers"], cfg["synth"]["per_speaker"], cfg["seed"], out)
    write_config(cfg, out)
    info("synth-corpus", utterances=len(records), out=str(out))


def _noise_pools(cfg, run: Path):
    if cfg["noise_pool"]:
        pool = load_noise_pool(_require_path(cfg["noise_pool"], "noise pool"))
    else:
        # Round-trip through WAV so provenance replays against the stored clips.
        root = save_noise_pool(synth_noise_pool(cfg["seed"]), run / "noise_pool")
        pool = load_noise_pool(root)
    pool.require_all()
    if cfg["disjoint_noise"]:
        return pool.split()
    return pool, pool


def cmd_mix(cfg):
    run = Path(cfg["out"])
    manifest = _corpus_manifest(cfg)
    records = load_manifest(manifest)
    train_pool, test_pool = _noise_pools(cfg, run)
    mix_dir = run / "mix"
    noisy = corrupt_training_set(records, train_pool, cfg["seed"], out_dir=mix_dir / "train_noise" / "wav")
    write_manifest(mix_dir / "train_noise" / "manifest.jsonl", noisy.records, relative_to=mix_dir / "train_noise")
    write_provenance(mix_dir / "train_noise" / "provenance.jsonl", noisy.records, noisy.provenance)
    scenarios = build_test_scenarios(records, test_pool, cfg["seed"], out_dir=mix_dir / "scenarios" / "wav")
    write_scenarios(scenarios, mix_dir / "scenarios")
    write_config(cfg, mix_dir)
    info("mix", train_noisy=len(noisy.records), scenarios=len(scenarios), out=str(mix_dir))


def _training_records(cfg, run: Path):
    clean = load_manifest(_corpus_manifest(cfg))
    if cfg["trained_on"] == "clean":
        return clean, clean
    noisy_manifest = _require_path(run / "mix" / "train_noise" / "manifest.jsonl", "noisy training manifest (run `mix` first)")
    return clean, load_manifest(noisy_manifest)


def fold_dir(run: Path, trained_on: str, arch: str, fold_index: int, speaker: str) -> Path:
    return run / "train" / trained_on / arch / f"fold{fold_index:02d}_{speaker}"


def train_one_fold(cfg: dict, fold_index: int) -> str:
    run = Path(cfg["out"])
    clean, records = _training_records(cfg, run)
    plan = make_loso_folds(clean)
    if not 0 <= fold_index < len(plan):
        raise ConfigError(f"fold {fold_index} out of range: corpus has {len(plan)} speakers (folds 0..{len(plan) - 1})")
    fold = plan[fold_index]
    mel = MelConfig(**cfg["mel"])
    tcfg = TrainConfig.from_dict(cfg["train"])
    train = [
        Example(r.id, r.transcript, r.emotion, r.speaker, load_wav(r.wav), mel=mel)
        for r in records
        if r.id in fold.train_ids
    ]
    out = fold_dir(run, cfg["trained_on"], tcfg.architecture, fold_index, fold.test_speaker)
    meta = {
        "config": {"train": tcfg.to_dict(), "mel": cfg["mel"], "seed": cfg["seed"]},
        "fold": fold_index,
        "test_speaker": fold.test_speaker,
        "trained_on": cfg["trained_on"],
    }
    result = fit(train, tcfg, out_dir=out, meta=meta)
    write_config({**cfg, "fold": fold_index, "all_folds": False}, out)
    last = result.stats[-1].mean_l_joint if result.stats else None
    info("train", arch=tcfg.architecture, trained_on=cfg["trained_on"], fold=fold_index, speaker=fold.test_speaker, final_loss=last, out=str(out))
    return str(out)


def cmd_train(cfg):
    if cfg["all_folds"]:
        plan = make_loso_folds(load_manifest(_corpus_manifest(cfg)))
        indices = list(range(len(plan)))
        if cfg["jobs"] > 1:
            with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
                list(pool.map(train_one_fold, [cfg] * len(indices), indices))
        else:
            for k in indices:
                train_one_fold(cfg, k)
    elif cfg["fold"] is not None:
        train_one_fold(cfg, int(cfg["fold"]))
    else:
        raise ConfigError("train needs --fold INT or --all-folds")


def collect_checkpoints(run: Path) -> dict:
    found = {}
    for on in TRAINED_ON:
        for arch in ARCHITECTURES:
            base = run / "train" / on / arch
            if not base.exists():
                continue
            for d in sorted(base.iterdir()):
                ckpt_path = d / "final.ckpt"
                if ckpt_path.exists():
                    ckpt = load_checkpoint(ckpt_path)
                    found.setdefault((on, arch), {})[ckpt.meta["test_speaker"]] = ckpt
    return found


def cmd_evaluate(cfg):
    run = Path(cfg["out"])
    plan = make_loso_folds(load_manifest(_corpus_manifest(cfg)))
    scenarios = load_scenarios(_require_path(run / "mix" / "scenarios", "scenario directory (run `mix` first)"))
    report = evaluate_scenarios(collect_checkpoints(run), scenarios, plan, MelConfig(**cfg["mel"]))
    report.meta["config_hash"] = config_hash(cfg)
    out = run / "eval"
    emit_report(report, out, formats=("json",))
    write_config(cfg, out)
    info("evaluate", cells=len(report.cells), out=str(out))


def cmd_report(cfg):
    run = Path(cfg["out"])
    report = load_report(_require_path(run / "eval" / "report.json", "evaluation report (run `evaluate` first)"))
    out = run / "report"
    paths = emit_report(report, out)
    write_config(cfg, out)
    info("report", files=[str(p) for p in paths])


def gradcheck_batch(seed: int, n_mels: int, n_utts: int = 2):
    rng = np.random.default_rng(seed)
    texts = ["ab", "b a"]
    emotions = ["happy", "sad"]
    out = []
    for i in range(n_utts):
        n_frames = 16 + 4 * i
        feats = rng.standard_normal((n_frames, n_mels))
        out.append(Example(f"gc{i}", texts[i % 2], emotions[i % 2], "spk", features=feats))
    return out


GRADCHECK_DIMS = ModelDims(n_mels=6, conv_channels=4, enc_hidden=3, enc_layers=2, text_embed=3, text_hidden=2)


def run_gradcheck(seed=0, eps=1e-5, tol=1e-4, dims=GRADCHECK_DIMS) -> dict:
    import torch

    batch = gradcheck_batch(seed, dims.n_mels)
    results = {}
    for arch in ARCHITECTURES:
        torch.manual_seed(seed)
        model = SpeechModel(arch, dims)
        report = grad_check(model, batch, eps=eps, tol=tol)
        results[arch] = {"passed": report.passed, "max_rel_err": report.max_rel_err, "worst": report.worst}
    return results


def cmd_gradcheck(cfg):
    out = Path(cfg["out"])
    results = run_gradcheck(cfg["seed"], cfg["gradcheck"]["eps"], cfg["gradcheck"]["tol"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    write_config(cfg, out)
    for arch, r in results.items():
        info("gradcheck", arch=arch, passed=r["passed"], worst=r["worst"])
    if not all(r["passed"] for r in results.values()):
        raise TrainingError("gradient check failed: " + ", ".join(a for a, r in results.items() if not r["passed"]))


COMMANDS = {
    "synth-corpus": cmd_synth_corpus,
    "mix": cmd_mix,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="run (or corpus) directory")

    parser = _Parser(prog="jointser", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-corpus", parents=[common], help="write a synthetic toy corpus")
    p.add_argument("--speakers", type=int)
    p.add_argument("--per-speaker", dest="per_speaker", type=int)

    p = sub.add_parser("mix", parents=[common], help="noisy training set and the seven test scenarios")
    p.add_argument("--manifest", help="clean corpus manifest")
    p.add_argument("--noise-pool", dest="noise_pool", help="directory with noise/ music/ speech/ WAVs")

    p = sub.add_parser("train", parents=[common], help="train one architecture per LOSO fold")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--fold", type=int)
    group.add_argument("--all-folds", dest="all_folds", action="store_true")
    p.add_argument("--jobs", type=int)
    p.add_argument("--arch", choices=ARCHITECTURES)
    p.add_argument("--trained-on", dest="trained_on", choices=TRAINED_ON)
    p.add_argument("--manifest", help="clean corpus manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha", type=float)

    p = sub.add_parser("evaluate", parents=[common], help="score all checkpoints on all scenarios")
    p.add_argument("--manifest", help="clean corpus manifest")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all architectures")
    sub.add_parser("report", parents=[common], help="render Markdown, JSON and plots")
    return parser


def run(argv=None, environ=None) -> int:
    setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise ConfigError(f"missing subcommand; choose one of {sorted(COMMANDS)}")
        cfg = resolve_config(args, environ)
        COMMANDS[args.command](cfg)
    except (ConfigError, CorpusError, AudioError, ModelError, EvalError, TrainingError, CTCInfeasibleError, FileNotFoundError) as exc:
        code = getattr(exc, "code", type(exc).__name__)
        print(json.dumps({"level": "error", "code": code, "message": str(exc)}, sort_keys=True), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
