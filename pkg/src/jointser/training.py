"""Multitask loss, optimization loop and finite-difference gradient checks."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .audio import SPEED_FACTORS, AudioBuffer, FeatureCache, MelConfig
from .ctc import ctc_loss_torch, min_frames
from .model import (
    ARCHITECTURES,
    EMOTIONS,
    LINGUISTIC_SOURCES,
    ModelDims,
    SpeechModel,
    checkpoint_bytes,
    subsampled_length,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    code = "training_error"


class NonFiniteLossError(TrainingError):
    code = "non_finite_loss"


@dataclass(frozen=True)
class JointLossConfig:
    alpha: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def joint_loss(l_ser, l_asr, cfg: JointLossConfig = JointLossConfig()):
    """alpha * l_ser + (1 - alpha) * l_asr; works on floats and tensors alike."""
    if not 0.0 <= cfg.alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {cfg.alpha}")
    if cfg.alpha == 0.0:
        return l_asr
    if cfg.alpha == 1.0:
        return l_ser
    return cfg.alpha * l_ser + (1.0 - cfg.alpha) * l_asr


@dataclass(frozen=True)
class LossBreakdown:
    l_ser: float
    l_asr: float
    l_joint: float
    alpha: float  # effective weight: 1.0 for ser_baseline, 0.0 for asr_baseline
    grad_norm: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 300
    batch_size: int = 4
    learning_rate: float = 1e-3
    # Adam: m = b1 m + (1-b1) g; v = b2 v + (1-b2) g^2;
    # p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip_norm: float = 5.0
    augment_speeds: bool = True
    architecture: str = "joint"
    linguistic_source: str = "decoded"
    alpha: float = 0.1
    freeze_frontend: bool = False
    freeze_text: bool = False
    dims: ModelDims = ModelDims()

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")
        if self.linguistic_source not in LINGUISTIC_SOURCES:
            raise ValueError(f"linguistic_source must be one of {LINGUISTIC_SOURCES}")
        JointLossConfig(self.alpha)

    @property
    def loss_config(self) -> JointLossConfig:
        return JointLossConfig(self.alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        d = dict(d)
        if "dims" in d and isinstance(d["dims"], dict):
            d["dims"] = ModelDims(**d["dims"])
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


@dataclass
class Example:
    """One training/evaluation utterance: audio (or precomputed features) plus labels."""

    id: str
    transcript: str | None
    emotion: str | None
    speaker: str = ""
    audio: AudioBuffer | None = None
    features: np.ndarray | None = None
    mel: MelConfig = MelConfig()
    _cache: FeatureCache | None = field(default=None, repr=False)

    def feats(self, factor: int = 100) -> np.ndarray:
        if self.audio is None:
            if factor != 100:
                raise TrainingError(f"{self.id}: speed augmentation needs audio, only features given")
            return self.features
        if self._cache is None:
            self._cache = FeatureCache(self.audio, self.mel)
        return self._cache.get(factor)


def normalize_features(feats: np.ndarray) -> np.ndarray:
    """Per-utterance mean/variance normalization with one scalar mean and std.

    Per-channel statistics would blow the noise floor of silent mel bands up
    to unit variance; a single scale keeps the spectral shape intact.
    """
    return (feats - feats.mean()) / (feats.std() + 1e-5)


def collate(examples: Sequence[Example], factors: Sequence[int] | None = None, dtype=torch.float32):
    """Pad features to the batch maximum; returns (feats, lengths)."""
    factors = factors or [100] * len(examples)
    mats = [normalize_features(ex.feats(f)) for ex, f in zip(examples, factors)]
    lengths = torch.tensor([m.shape[0] for m in mats])
    out = torch.zeros(len(mats), int(lengths.max()), mats[0].shape[1], dtype=dtype)
    for i, m in enumerate(mats):
        out[i, : m.shape[0]] = torch.from_numpy(m)
    return out, lengths


def emotion_index(label: str) -> int:
    try:
        return EMOTIONS.index(label)
    except ValueError:
        raise TrainingError(f"unknown emotion label {label!r}") from None


def batch_losses(model: SpeechModel, examples, feats, lengths, transcripts=None):
    """Per-utterance (ser, asr) loss tensors plus the forward output."""
    references = [ex.transcript for ex in examples]
    out = model(feats, lengths, references=references, mode="train", transcripts=transcripts)
    asr, ser = [], []
    if model.has_asr:
        for i, ex in enumerate(examples):
            target = model.vocab.encode(ex.transcript)
            asr.append(ctc_loss_torch(out.logits[i, : int(out.lengths[i])], target))
    if model.has_ser:
        labels = torch.tensor([emotion_index(ex.emotion) for ex in examples])
        ser = list(F.cross_entropy(out.emotion_logits, labels, reduction="none"))
    return ser, asr, out


def combine(model: SpeechModel, ser, asr, alpha: float):
    """Architecture loss and its effective alpha."""
    l_ser = torch.stack(ser).mean() if ser else None
    l_asr = torch.stack(asr).mean() if asr else None
    if model.architecture == "asr_baseline":
        return l_asr, l_ser, l_asr, 0.0
    if model.architecture == "ser_baseline":
        return l_ser, l_ser, l_asr, 1.0
    return joint_loss(l_ser, l_asr, JointLossConfig(alpha)), l_ser, l_asr, alpha


def check_feasible(model: SpeechModel, ex: Example, n_frames: int):
    if model.has_asr:
        need = min_frames(model.vocab.encode(ex.transcript))
        have = subsampled_length(n_frames)
        if have < need:
            raise TrainingError(f"{ex.id}: {have} encoder frames cannot emit {need}-frame CTC target")


def build_model(cfg: TrainConfig) -> SpeechModel:
    torch.manual_seed(cfg.seed)
    return SpeechModel(
        cfg.architecture,
        cfg.dims,
        linguistic_source=cfg.linguistic_source,
        freeze_frontend=cfg.freeze_frontend,
        freeze_text=cfg.freeze_text,
    )


class Trainer:
    """Holds a model, its Adam state and the augmentation RNG for one run."""

    def __init__(self, cfg: TrainConfig, model: SpeechModel | None = None):
        self.cfg = cfg
        self.model = model if model is not None else build_model(cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.optimizer = torch.optim.Adam(
            [p for p in self.model.parameters() if p.requires_grad],
            lr=cfg.learning_rate,
            betas=tuple(cfg.adam_betas),
            eps=cfg.adam_eps,
        )

    def train_step(self, batch: Sequence[Example]) -> LossBreakdown:
        cfg = self.cfg
        if cfg.augment_speeds:
            factors = [int(f) for f in self.rng.choice(SPEED_FACTORS, size=len(batch))]
        else:
            factors = [100] * len(batch)
        feats, lengths = collate(batch, factors)
        for ex, n in zip(batch, lengths.tolist()):
            check_feasible(self.model, ex, n)
        self.model.train()
        ser, asr, _ = batch_losses(self.model, batch, feats, lengths)
        for i, ex in enumerate(batch):
            for name, losses in (("ser", ser), ("asr", asr)):
                if losses and not torch.isfinite(losses[i]):
                    raise NonFiniteLossError(f"non-finite {name} loss for utterance {ex.id!r}")
        total, l_ser, l_asr, alpha = combine(self.model, ser, asr, cfg.alpha)
        self.optimizer.zero_grad()
        total.backward()
        params = [p for p in self.model.parameters() if p.requires_grad]
        grad_norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm))
        self.optimizer.step()
        return LossBreakdown(
            l_ser=l_ser.item() if l_ser is not None else 0.0,
            l_asr=l_asr.item() if l_asr is not None else 0.0,
            l_joint=total.item(),
            alpha=alpha,
            grad_norm=grad_norm,
        )


@dataclass
class EpochStats:
    epoch: int
    mean_l_ser: float
    mean_l_asr: float
    mean_l_joint: float
    wall_s: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class FitResult:
    model: SpeechModel
    stats: list
    final_checkpoint: bytes
    best_checkpoint: bytes
    best_epoch: int


def fit(
    examples: Sequence[Example],
    cfg: TrainConfig,
    out_dir=None,
    meta: dict | None = None,
    callback=None,
) -> FitResult:
    """Train one architecture on ``examples`` for ``cfg.epochs`` epochs.

    Batches are drawn from a seeded shuffle each epoch. When ``out_dir`` is
    given, ``final.ckpt``, ``best.ckpt`` and ``stats.jsonl`` are written there.
    ``callback(epoch, stats, model)`` may return True to stop early.
    """
    if not examples:
        raise TrainingError("empty training split")
    torch.set_num_threads(1)
    trainer = Trainer(cfg)
    meta = dict(meta or {})
    meta.setdefault("config", {"train": cfg.to_dict()})
    meta["train_ids"] = sorted(ex.id for ex in examples)
    meta["train_speakers"] = sorted({ex.speaker for ex in examples})
    order_rng = np.random.default_rng([cfg.seed, 1])

    def snapshot(epoch):
        return checkpoint_bytes(trainer.model, {**meta, "epoch": epoch})

    best = snapshot(0)
    best_loss = np.inf
    best_epoch = 0
    stats = []
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = order_rng.permutation(len(examples))
        sums = np.zeros(3)
        for lo in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[lo : lo + cfg.batch_size]]
            br = trainer.train_step(batch)
            sums += len(batch) * np.array([br.l_ser, br.l_asr, br.l_joint])
        means = sums / len(examples)
        row = EpochStats(epoch, *map(float, means), wall_s=time.perf_counter() - start)
        stats.append(row)
        log.debug("epoch %d joint=%.4f", epoch, row.mean_l_joint)
        if row.mean_l_joint < best_loss:
            best_loss, best_epoch = row.mean_l_joint, epoch
            best = snapshot(epoch)
        if callback is not None and callback(epoch, row, trainer.model):
            break
    final = snapshot(len(stats))
    result = FitResult(trainer.model, stats, final, best, best_epoch)
    if out_dir is not None:
        write_fit(result, out_dir)
    return result


def write_fit(result: FitResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "final.ckpt").write_bytes(result.final_checkpoint)
    (out / "best.ckpt").write_bytes(result.best_checkpoint)
    with open(out / "stats.jsonl", "w") as fh:
        for row in result.stats:
            fh.write(row.to_json() + "\n")
    return out


# --------------------------------------------------------------------------
# Inference


@torch.no_grad()
def predict(model: SpeechModel, examples: Sequence[Example], batch_size: int = 16):
    """Greedy transcripts and emotion argmax per example (None where the branch is absent)."""
    model.eval()
    transcripts, emotions = [], []
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo : lo + batch_size]
        feats, lengths = collate(chunk, dtype=next(model.parameters()).dtype)
        out = model(feats, lengths, mode="infer")
        if model.has_asr:
            transcripts += model.decode(out.logits, out.lengths)
        else:
            transcripts += [None] * len(chunk)
        if model.has_ser:
            emotions += [EMOTIONS[i] for i in out.emotion_logits.argmax(dim=-1).tolist()]
        else:
            emotions += [None] * len(chunk)
    return transcripts, emotions


# --------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradCheckReport:
    max_rel_err: dict  # parameter group -> norm-wise relative error
    tol: float
    eps: float
    elementwise: dict = field(default_factory=dict)  # parameter group -> worst single entry (diagnostic)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    """||a - n|| / max(||a||, ||n||, floor) over one parameter group."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def elementwise_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _loss_fn(model, examples, feats, lengths, transcripts, alpha):
    ser, asr, _ = batch_losses(model, examples, feats, lengths, transcripts)
    return combine(model, ser, asr, alpha)[0]


def analytic_gradients(model, examples, feats, lengths, transcripts, alpha) -> dict:
    model.zero_grad()
    _loss_fn(model, examples, feats, lengths, transcripts, alpha).backward()
    return {
        name: p.grad.detach().numpy().copy()
        for name, p in model.named_parameters()
        if p.requires_grad and p.grad is not None
    }


@torch.no_grad()
def numeric_gradient(model, param, examples, feats, lengths, transcripts, alpha, eps) -> np.ndarray:
    flat = param.data.view(-1)
    grad = np.zeros(flat.numel())
    for k in range(flat.numel()):
        orig = float(flat[k])
        flat[k] = orig + eps
        up = float(_loss_fn(model, examples, feats, lengths, transcripts, alpha))
        flat[k] = orig - eps
        down = float(_loss_fn(model, examples, feats, lengths, transcripts, alpha))
        flat[k] = orig
        grad[k] = (up - down) / (2 * eps)
    return grad.reshape(param.shape)


def grad_check(
    model: SpeechModel,
    batch: Sequence[Example],
    eps: float = 1e-5,
    tol: float = 1e-4,
    alpha: float = 0.1,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients with central differences for every parameter.

    Runs on a float64 copy of ``model``. For the joint model the linguistic
    text is decoded once and then held fixed, mirroring the gradient block at
    the decode step. Each parameter group is scored by the norm-wise
    relative error ||a - n|| / max(||a||, ||n||, floor). Per-entry ratios are
    kept as a diagnostic only: at eps=1e-5 the float64 cancellation in a
    central difference is about |loss| * 1e-11, which swamps entries whose
    gradient is itself near 1e-6.
    """
    model = copy.deepcopy(model).double()
    model.train()
    feats, lengths = collate(batch, dtype=torch.float64)
    transcripts = None
    if model.architecture == "joint":
        with torch.no_grad():
            out = model(feats, lengths, mode="infer")
        transcripts = out.transcripts
    analytic = analytic_gradients(model, batch, feats, lengths, transcripts, alpha)
    errors, worst_entry = {}, {}
    for name, param in model.named_parameters():
        if name not in analytic:
            continue
        numeric = numeric_gradient(model, param, batch, feats, lengths, transcripts, alpha, eps)
        errors[name] = relative_error(analytic[name], numeric, floor)
        worst_entry[name] = elementwise_error(analytic[name], numeric, floor)
    return GradCheckReport(errors, tol, eps, worst_entry)


def count_parameters(model: SpeechModel) -> int:
    return sum(p.numel() for p in model.parameters())
