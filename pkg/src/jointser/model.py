"""Shared encoder, CTC branch, text encoder, skip-connection fusion and emotion heads.

Three architectures are assembled from these parts:

* ``asr_baseline``: encoder -> CTC head
* ``ser_baseline``: encoder -> mean pool -> 2-layer MLP -> 4 emotion logits
* ``joint``: encoder -> CTC head, and encoder -> mean pool, fused with a text
  embedding of the (decoded or reference) transcript -> emotion head
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .ctc import VOCAB, LogitLattice, Vocab, ctc_greedy_decode

EMOTIONS = ("neutral", "happy", "sad", "angry")
ARCHITECTURES = ("asr_baseline", "ser_baseline", "joint")
LINGUISTIC_SOURCES = ("decoded", "reference")


class ModelError(ValueError):
    code = "model_error"


class InputTooShortError(ModelError):
    code = "input_too_short"


class MissingReferenceError(ModelError):
    code = "missing_reference"


@dataclass(frozen=True)
class ModelDims:
    n_mels: int = 80
    conv_channels: int = 128
    enc_hidden: int = 64
    enc_layers: int = 2
    text_embed: int = 32
    text_hidden: int = 32
    n_emotions: int = 4

    @property
    def acoustic_dim(self) -> int:
        return 2 * self.enc_hidden

    @property
    def linguistic_dim(self) -> int:
        return 2 * self.text_hidden


def subsampled_length(n_frames: int) -> int:
    """Two stride-2 convolutions: ceil(ceil(T/2)/2) == ceil(T/4)."""
    return -(-n_frames // 4)


def lengths_to_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


class Encoder(nn.Module):
    """Conv subsampling (x4 in time) followed by a bidirectional GRU stack."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.conv1 = nn.Conv1d(dims.n_mels, dims.conv_channels, 3, stride=2, padding=1)
        self.conv2 = nn.Conv1d(dims.conv_channels, dims.conv_channels, 3, stride=2, padding=1)
        self.act = nn.GELU()
        self.rnn = nn.GRU(
            dims.conv_channels,
            dims.enc_hidden,
            num_layers=dims.enc_layers,
            batch_first=True,
            bidirectional=True,
        )

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor):
        """feats (B, T, n_mels), lengths (B,) -> (B, T', 2*hidden), out lengths (B,)."""
        if feats.shape[1] < 4 or int(lengths.min()) < 4:
            raise InputTooShortError(f"encoder needs at least 4 frames, got {int(lengths.min())}")
        x = feats.transpose(1, 2)
        # Zeroing padded positions after each conv makes a padded batch compute
        # exactly what each utterance would alone.
        len1 = torch.div(lengths + 1, 2, rounding_mode="floor")
        x = self.act(self.conv1(x))
        x = x * lengths_to_mask(len1, x.shape[2])[:, None, :]
        len2 = torch.div(len1 + 1, 2, rounding_mode="floor")
        x = self.act(self.conv2(x))
        x = x * lengths_to_mask(len2, x.shape[2])[:, None, :]
        packed = pack_padded_sequence(x.transpose(1, 2), len2.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.shape[2])
        return out, len2

    def frontend_parameters(self):
        return list(self.conv1.parameters()) + list(self.conv2.parameters())


def mean_pool(enc: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
    """Average over time, ignoring padded frames. enc (B, T', D) -> (B, D)."""
    if enc.shape[-2] == 0:
        raise ModelError("cannot pool an empty sequence")
    if lengths is None:
        return enc.mean(dim=-2)
    mask = lengths_to_mask(lengths, enc.shape[1]).to(enc.dtype)
    return (enc * mask[..., None]).sum(dim=1) / lengths.to(enc.dtype)[:, None]


class TextEncoder(nn.Module):
    """Character embedding -> BiGRU -> mean pool; empty text maps to a learned vector."""

    def __init__(self, dims: ModelDims, vocab: Vocab = VOCAB):
        super().__init__()
        self.vocab = vocab
        self.embed = nn.Embedding(len(vocab), dims.text_embed)
        self.rnn = nn.GRU(dims.text_embed, dims.text_hidden, batch_first=True, bidirectional=True)
        self.default = nn.Parameter(torch.zeros(dims.linguistic_dim))

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        ids = [self.vocab.encode(t) for t in texts]
        out = self.default.unsqueeze(0).repeat(len(texts), 1)
        nonempty = [i for i, seq in enumerate(ids) if seq]
        if not nonempty:
            return out
        lengths = torch.tensor([len(ids[i]) for i in nonempty])
        padded = torch.zeros(len(nonempty), int(lengths.max()), dtype=torch.long)
        for row, i in enumerate(nonempty):
            padded[row, : len(ids[i])] = torch.tensor(ids[i])
        packed = pack_padded_sequence(self.embed(padded), lengths, batch_first=True, enforce_sorted=False)
        hidden, _ = self.rnn(packed)
        hidden, _ = pad_packed_sequence(hidden, batch_first=True)
        pooled = mean_pool(hidden, lengths)
        index = torch.tensor(nonempty)
        return out.index_copy(0, index, pooled)


class SkipMLP(nn.Module):
    """x + W2 tanh(W1 x + b1) + b2."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def branch(self, x):
        return self.fc2(torch.tanh(self.fc1(x)))

    def forward(self, x):
        return x + self.branch(x)


class Fusion(nn.Module):
    def __init__(self, dims: ModelDims):
        super().__init__()
        self.acoustic = SkipMLP(dims.acoustic_dim)
        self.linguistic = SkipMLP(dims.linguistic_dim)

    def forward(self, a: torch.Tensor, l: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.acoustic(a), self.linguistic(l)], dim=-1)


@dataclass
class JointOutput:
    logits: torch.Tensor  # (B, T', V) CTC scores
    lengths: torch.Tensor  # (B,) valid encoder frames
    transcripts: list  # linguistic-branch input text per utterance
    emotion_logits: torch.Tensor  # (B, 4)

    def lattice(self, i: int) -> LogitLattice:
        return LogitLattice(self.logits[i, : int(self.lengths[i])].detach().double().cpu().numpy())


class SpeechModel(nn.Module):
    """One of the three architectures; absent branches are simply not built."""

    def __init__(
        self,
        architecture: str = "joint",
        dims: ModelDims = ModelDims(),
        vocab: Vocab = VOCAB,
        linguistic_source: str = "decoded",
        freeze_frontend: bool = False,
        freeze_text: bool = False,
    ):
        super().__init__()
        if architecture not in ARCHITECTURES:
            raise ModelError(f"unknown architecture {architecture!r}")
        if linguistic_source not in LINGUISTIC_SOURCES:
            raise ModelError(f"unknown linguistic source {linguistic_source!r}")
        self.architecture = architecture
        self.dims = dims
        self.vocab = vocab
        self.linguistic_source = linguistic_source
        self.freeze_frontend = freeze_frontend
        self.freeze_text = freeze_text
        self.encoder = Encoder(dims)
        if architecture in ("asr_baseline", "joint"):
            self.ctc_head = nn.Linear(dims.acoustic_dim, len(vocab))
        if architecture == "ser_baseline":
            self.ser_head = nn.Sequential(
                nn.Linear(dims.acoustic_dim, dims.acoustic_dim),
                nn.Tanh(),
                nn.Linear(dims.acoustic_dim, dims.n_emotions),
            )
        if architecture == "joint":
            self.text_encoder = TextEncoder(dims, vocab)
            self.fusion = Fusion(dims)
            self.emotion_head = nn.Linear(dims.acoustic_dim + dims.linguistic_dim, dims.n_emotions)
        if freeze_frontend:
            for p in self.encoder.frontend_parameters():
                p.requires_grad_(False)
        if freeze_text and architecture == "joint":
            for p in self.text_encoder.parameters():
                p.requires_grad_(False)

    @property
    def has_asr(self) -> bool:
        return self.architecture != "ser_baseline"

    @property
    def has_ser(self) -> bool:
        return self.architecture != "asr_baseline"

    def hyperparameters(self) -> dict:
        return {
            "architecture": self.architecture,
            "dims": asdict(self.dims),
            "vocab": list(self.vocab.tokens),
            "linguistic_source": self.linguistic_source,
            "freeze_frontend": self.freeze_frontend,
            "freeze_text": self.freeze_text,
        }

    def decode(self, logits: torch.Tensor, lengths: torch.Tensor) -> list[str]:
        scores = logits.detach().double().cpu().numpy()
        return [ctc_greedy_decode(scores[i, : int(n)], self.vocab) for i, n in enumerate(lengths)]

    def forward(self, feats, lengths, references=None, mode="infer", transcripts=None):
        """Run the architecture on a padded batch.

        ``transcripts`` overrides the linguistic-branch text outright (used to
        hold decoded text fixed during gradient checks). Otherwise the text is
        the greedy decode in ``infer`` mode, and in ``train`` mode whatever
        ``linguistic_source`` selects. The decode step is discrete, so no
        gradient reaches the CTC branch through it.
        """
        if mode not in ("train", "infer"):
            raise ModelError(f"mode must be 'train' or 'infer', got {mode!r}")
        enc, enc_lengths = self.encoder(feats, lengths)
        logits = self.ctc_head(enc) if self.has_asr else None
        emotion = None
        texts = []
        if self.architecture == "ser_baseline":
            emotion = self.ser_head(mean_pool(enc, enc_lengths))
        elif self.architecture == "joint":
            if transcripts is not None:
                texts = list(transcripts)
            elif mode == "train" and self.linguistic_source == "reference":
                if references is None or any(r is None for r in references):
                    raise MissingReferenceError("reference transcripts required for linguistic_source='reference'")
                texts = list(references)
            else:
                texts = self.decode(logits, enc_lengths)
            fused = self.fusion(mean_pool(enc, enc_lengths), self.text_encoder(texts))
            emotion = self.emotion_head(fused)
        return JointOutput(logits, enc_lengths, texts, emotion)


# --------------------------------------------------------------------------
# Single-utterance functional views


def _single(feats) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.as_tensor(np.asarray(feats))
    return x[None], torch.tensor([x.shape[0]])


def encoder_forward(features, model: SpeechModel) -> np.ndarray:
    x, n = _single(features)
    x = x.to(next(model.parameters()).dtype)
    with torch.no_grad():
        enc, _ = model.encoder(x, n)
    return enc[0].numpy()


def ctc_log_probs(enc, model: SpeechModel) -> LogitLattice:
    with torch.no_grad():
        values = model.ctc_head(torch.as_tensor(np.asarray(enc)).to(model.ctc_head.weight.dtype))
    return LogitLattice(values.double().numpy())


def text_encode(transcript: str, model: SpeechModel) -> np.ndarray:
    with torch.no_grad():
        return model.text_encoder([transcript])[0].numpy()


def fusion_forward(a, l, model: SpeechModel) -> np.ndarray:
    dtype = model.emotion_head.weight.dtype
    with torch.no_grad():
        return model.fusion(torch.as_tensor(np.asarray(a)).to(dtype), torch.as_tensor(np.asarray(l)).to(dtype)).numpy()


def emotion_logits(fused, model: SpeechModel) -> np.ndarray:
    with torch.no_grad():
        return model.emotion_head(torch.as_tensor(np.asarray(fused)).to(model.emotion_head.weight.dtype)).numpy()


def forward_joint(features, reference, model: SpeechModel, mode="infer"):
    """(lattice, linguistic transcript, emotion logits) for one utterance."""
    x, n = _single(features)
    x = x.to(next(model.parameters()).dtype)
    with torch.no_grad():
        out = model(x, n, references=[reference], mode=mode)
    return out.lattice(0), out.transcripts[0], out.emotion_logits[0].numpy()


def forward_asr_baseline(features, model: SpeechModel) -> LogitLattice:
    x, n = _single(features)
    x = x.to(next(model.parameters()).dtype)
    with torch.no_grad():
        return model(x, n).lattice(0)


def forward_ser_baseline(features, model: SpeechModel) -> np.ndarray:
    x, n = _single(features)
    x = x.to(next(model.parameters()).dtype)
    with torch.no_grad():
        return model(x, n).emotion_logits[0].numpy()


# --------------------------------------------------------------------------
# Checkpoints
#
# Layout: b"JSERCKPT" | u32 little-endian header length | UTF-8 JSON header |
# tensor data. The header lists every tensor as {name, shape, offset, count};
# data is row-major little-endian float32 starting right after the header.

MAGIC = b"JSERCKPT"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def checkpoint_bytes(model: SpeechModel, extra: dict | None = None) -> bytes:
    tensors = []
    data = io.BytesIO()
    offset = 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        data.write(np.ascontiguousarray(arr).tobytes())
        offset += arr.size * 4
    hyper = model.hyperparameters()
    header = {
        "format": 1,
        "hyperparameters": hyper,
        "config_hash": config_hash({"model": hyper, "config": (extra or {}).get("config")}),
        "meta": extra or {},
        "tensors": tensors,
    }
    head = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(head)) + head + data.getvalue()


def save_checkpoint(path, model: SpeechModel, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, extra))
    return path


@dataclass
class Checkpoint:
    header: dict
    tensors: dict  # name -> np.ndarray (float32)

    @property
    def meta(self) -> dict:
        return self.header.get("meta", {})

    @property
    def architecture(self) -> str:
        return self.header["hyperparameters"]["architecture"]

    def build(self, architecture: str | None = None, strict: bool | None = None) -> SpeechModel:
        """Instantiate a model from this checkpoint.

        Loading into a different architecture copies the shared submodules
        (encoder, CTC head) and leaves the rest freshly initialized.
        """
        hyper = self.header["hyperparameters"]
        arch = architecture or hyper["architecture"]
        model = SpeechModel(
            arch,
            ModelDims(**hyper["dims"]),
            Vocab(tuple(hyper["vocab"])),
            hyper["linguistic_source"],
            hyper["freeze_frontend"],
            hyper.get("freeze_text", False),
        )
        load_into(model, self, strict=(arch == hyper["architecture"]) if strict is None else strict)
        return model


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if blob[: len(MAGIC)] != MAGIC:
        raise ModelError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<I", blob[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    header = json.loads(blob[start : start + n].decode())
    base = start + n
    tensors = {}
    for entry in header["tensors"]:
        lo = base + entry["offset"]
        arr = np.frombuffer(blob[lo : lo + 4 * entry["count"]], dtype="<f4")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(header, tensors)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def load_into(model: SpeechModel, ckpt: Checkpoint, strict: bool = True) -> list[str]:
    """Copy matching tensors into ``model``; return the names that were loaded."""
    state = model.state_dict()
    missing = [k for k in state if k not in ckpt.tensors]
    if strict and missing:
        raise ModelError(f"checkpoint lacks tensors: {missing}")
    loaded = []
    for name, value in ckpt.tensors.items():
        if name not in state:
            if strict:
                raise ModelError(f"unexpected tensor {name!r} in checkpoint")
            continue
        if tuple(state[name].shape) != value.shape:
            raise ModelError(f"shape mismatch for {name}: {tuple(state[name].shape)} vs {value.shape}")
        state[name] = torch.from_numpy(value).to(state[name].dtype)
        loaded.append(name)
    model.load_state_dict(state)
    return loaded
