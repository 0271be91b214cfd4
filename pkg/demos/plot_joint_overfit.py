"""
Training the joint model on a toy corpus
========================================

Eight synthetic utterances from one speaker. The joint loss is
alpha * CTC + (1 - alpha) * cross-entropy with alpha = 0.1, and emotion is
predicted from acoustic and decoded-text embeddings fused by a skip MLP.
"""

import tempfile
from pathlib import Path

from jointser import TrainConfig, fit, load_wav
from jointser.corpus import synth_toy_corpus
from jointser.training import Example, predict

root = Path(tempfile.mkdtemp())
records = [r for r in synth_toy_corpus(2, 8, 0, root / "corpus") if r.speaker == "spk00"]
examples = [Example(r.id, r.transcript, r.emotion, r.speaker, load_wav(r.wav)) for r in records]


def progress(epoch, stats, model):
    if epoch % 25 == 0:
        print(f"epoch {epoch:3d}  joint {stats.mean_l_joint:.3f}  ctc {stats.mean_l_asr:.3f}  ce {stats.mean_l_ser:.3f}")


# 150 epochs is enough to watch the loss fall; the full recipe uses 300
result = fit(examples, TrainConfig(epochs=150), callback=progress)

######################################################################
# Decode the training set.

texts, emotions = predict(result.model, examples)
for r, text, emo in zip(records, texts, emotions):
    print(f"{r.transcript!r:18s} -> {text!r:18s}  {r.emotion:8s} -> {emo}")
