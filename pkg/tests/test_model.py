import math

import numpy as np
import pytest
import torch

from jointser.ctc import VOCAB, LogitLattice
from jointser.model import (
    ARCHITECTURES,
    InputTooShortError,
    MissingReferenceError,
    ModelDims,
    ModelError,
    SpeechModel,
    checkpoint_bytes,
    ctc_log_probs,
    emotion_logits,
    encoder_forward,
    forward_asr_baseline,
    forward_joint,
    forward_ser_baseline,
    fusion_forward,
    load_checkpoint,
    mean_pool,
    parse_checkpoint,
    save_checkpoint,
    subsampled_length,
    text_encode,
)

SMALL = ModelDims(n_mels=10, conv_channels=8, enc_hidden=6, enc_layers=2, text_embed=5, text_hidden=4)


def make(arch="joint", dims=SMALL, seed=0, **kw):
    torch.manual_seed(seed)
    return SpeechModel(arch, dims, **kw).double()


def feats(n, dims=SMALL, seed=1):
    return np.random.default_rng(seed).normal(size=(n, dims.n_mels))


def zero_(model):
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


class TestEncoder:
    @pytest.mark.parametrize("n,expect", [(98, 25), (4, 1), (5, 2), (8, 2), (9, 3)])
    def test_subsampled_length(self, n, expect):
        assert subsampled_length(n) == expect
        assert encoder_forward(feats(n), make("asr_baseline")).shape == (expect, 2 * SMALL.enc_hidden)

    def test_full_size_dims(self):
        model = SpeechModel("joint").double()
        out = encoder_forward(np.zeros((98, 80)), model)
        assert out.shape == (25, 128)

    def test_zero_params_zero_input(self):
        model = zero_(make("asr_baseline"))
        assert np.all(encoder_forward(np.zeros((20, SMALL.n_mels)), model) == 0.0)

    def test_bit_stable(self):
        x = feats(30)
        a = encoder_forward(x, make("joint", seed=5))
        b = encoder_forward(x, make("joint", seed=5))
        assert a.tobytes() == b.tobytes()

    def test_too_short(self):
        with pytest.raises(InputTooShortError):
            encoder_forward(feats(3), make())

    def test_padding_does_not_leak(self):
        model = make("joint")
        lens = [17, 40, 9]
        xs = [feats(n, seed=i) for i, n in enumerate(lens)]
        batch = torch.zeros(3, 40, SMALL.n_mels, dtype=torch.float64)
        for i, x in enumerate(xs):
            batch[i, : len(x)] = torch.from_numpy(x)
        with torch.no_grad():
            out = model(batch, torch.tensor(lens))
        for i, x in enumerate(xs):
            lat, text, emo = forward_joint(x, None, model)
            n = subsampled_length(lens[i])
            np.testing.assert_allclose(out.logits[i, :n].numpy(), lat.values, atol=1e-12)
            np.testing.assert_allclose(out.emotion_logits[i].numpy(), emo, atol=1e-12)
            assert out.transcripts[i] == text


class TestCTCHead:
    def test_normalized(self):
        model = make("asr_baseline")
        lat = forward_asr_baseline(feats(50), model)
        np.testing.assert_allclose(np.exp(lat.log_probs).sum(axis=1), 1.0, atol=1e-9)

    def test_zero_head_is_uniform(self):
        model = make("asr_baseline")
        with torch.no_grad():
            model.ctc_head.weight.zero_()
            model.ctc_head.bias.zero_()
        lat = ctc_log_probs(np.random.default_rng(0).normal(size=(7, 12)), model)
        np.testing.assert_allclose(lat.log_probs, -math.log(len(VOCAB)), atol=1e-12)

    def test_shift_invariant(self):
        lat = forward_asr_baseline(feats(30), make("asr_baseline"))
        shifted = LogitLattice(lat.values + 3.5)
        np.testing.assert_allclose(shifted.log_probs, lat.log_probs, atol=1e-12)


class TestPoolAndText:
    def test_mean_pool(self):
        v = torch.tensor([[1.0, -2.0, 3.0]])
        assert torch.equal(mean_pool(v), v[0])
        assert torch.equal(mean_pool(torch.cat([v, -v])), torch.zeros(3))
        assert torch.allclose(mean_pool(v.repeat(5, 1)), v[0])
        with pytest.raises(ModelError):
            mean_pool(torch.zeros(0, 3))

    def test_masked_pool(self):
        enc = torch.tensor([[[1.0], [3.0], [100.0]], [[2.0], [4.0], [6.0]]])
        assert mean_pool(enc, torch.tensor([2, 3])).flatten().tolist() == [2.0, 4.0]

    def test_text_encode(self):
        model = make()
        with torch.no_grad():
            model.text_encoder.default.copy_(torch.arange(8.0))
        assert text_encode("", model).tolist() == list(range(8))
        assert text_encode("ab", model).tobytes() == text_encode("ab", model).tobytes()
        assert not np.allclose(text_encode("ab", model), text_encode("ba", model))

    def test_text_rejects_unknown(self):
        with pytest.raises(ValueError):
            text_encode("A!", make())


class TestFusionAndHead:
    def test_zero_branches_are_identity(self):
        model = make()
        with torch.no_grad():
            for p in model.fusion.parameters():
                p.zero_()
        rng = np.random.default_rng(2)
        a, l = rng.normal(size=12), rng.normal(size=8)
        out = fusion_forward(a, l, model)
        assert out.tobytes() == np.concatenate([a, l]).tobytes()

    def test_origin(self):
        model = make()
        with torch.no_grad():
            for m in (model.fusion.acoustic, model.fusion.linguistic):
                m.fc1.bias.zero_()
                m.fc2.bias.zero_()
        assert np.all(fusion_forward(np.zeros(12), np.zeros(8), model) == 0.0)

    def test_decomposition(self):
        model = make()
        a, l = np.random.default_rng(3).normal(size=12), np.zeros(8)
        out = fusion_forward(a, l, model)
        with torch.no_grad():
            branch = model.fusion.acoustic.branch(torch.from_numpy(a)).numpy()
        np.testing.assert_allclose(out[:12] - a, branch, atol=1e-15)

    def test_zero_head_returns_bias(self):
        model = make()
        with torch.no_grad():
            model.emotion_head.weight.zero_()
            model.emotion_head.bias.copy_(torch.tensor([0.5, -1.0, 2.0, 0.0]))
        assert emotion_logits(np.ones(20), model).tolist() == [0.5, -1.0, 2.0, 0.0]

    def test_ce_gradient_at_uniform(self):
        logits = torch.zeros(1, 4, requires_grad=True)
        torch.nn.functional.cross_entropy(logits, torch.tensor([2])).backward()
        np.testing.assert_allclose(logits.grad[0].numpy(), [0.25, 0.25, -0.75, 0.25])

    def test_zero_fusion_matches_head_on_concat(self):
        model = make()
        with torch.no_grad():
            for p in model.fusion.parameters():
                p.zero_()
        x = feats(24)
        _, text, emo = forward_joint(x, None, model)
        pooled = encoder_forward(x, model).mean(axis=0)
        expect = emotion_logits(np.concatenate([pooled, text_encode(text, model)]), model)
        np.testing.assert_allclose(emo, expect, atol=1e-12)


class TestArchitectures:
    def test_outputs_per_architecture(self):
        x = feats(40)
        assert forward_ser_baseline(x, make("ser_baseline")).shape == (4,)
        assert len(forward_asr_baseline(x, make("asr_baseline"))) == 10
        lat, text, emo = forward_joint(x, None, make("joint"))
        assert len(lat) == 10 and emo.shape == (4,) and isinstance(text, str)

    def test_joint_deterministic(self):
        x = feats(40)
        a = forward_joint(x, None, make(seed=9))
        b = forward_joint(x, None, make(seed=9))
        assert a[0].values.tobytes() == b[0].values.tobytes() and a[1] == b[1]
        assert a[2].tobytes() == b[2].tobytes()

    def test_reference_source(self):
        model = make(linguistic_source="reference")
        _, text, _ = forward_joint(feats(40), "hello", model, mode="train")
        assert text == "hello"
        with pytest.raises(MissingReferenceError):
            forward_joint(feats(40), None, model, mode="train")
        # inference never sees the reference
        assert forward_joint(feats(40), "hello", model)[1] == forward_joint(feats(40), None, model)[1]

    def test_unknown_architecture(self):
        with pytest.raises(ModelError):
            SpeechModel("transformer")

    def test_freeze_frontend(self):
        model = SpeechModel("joint", SMALL, freeze_frontend=True)
        assert not any(p.requires_grad for p in model.encoder.frontend_parameters())
        assert all(p.requires_grad for p in model.encoder.rnn.parameters())


class TestCheckpoint:
    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_round_trip(self, tmp_path, arch):
        torch.manual_seed(4)
        model = SpeechModel(arch, SMALL)
        path = save_checkpoint(tmp_path / "m.ckpt", model, {"note": "x"})
        ckpt = load_checkpoint(path)
        assert ckpt.architecture == arch and ckpt.meta == {"note": "x"}
        rebuilt = ckpt.build()
        for (n1, p1), (n2, p2) in zip(model.state_dict().items(), rebuilt.state_dict().items()):
            assert n1 == n2 and torch.equal(p1, p2)
        assert checkpoint_bytes(rebuilt, {"note": "x"}) == path.read_bytes()

    def test_cross_architecture_load(self):
        torch.manual_seed(0)
        joint = SpeechModel("joint", SMALL)
        ckpt = parse_checkpoint(checkpoint_bytes(joint))
        asr = ckpt.build("asr_baseline")
        assert torch.equal(asr.encoder.conv1.weight, joint.encoder.conv1.weight)
        assert torch.equal(asr.ctc_head.weight, joint.ctc_head.weight)
        with pytest.raises(ModelError):
            ckpt.build("ser_baseline", strict=True)

    def test_bad_magic(self):
        with pytest.raises(ModelError):
            parse_checkpoint(b"NOTACKPT" + bytes(8))

    def test_hash_tracks_hyperparameters(self):
        a = parse_checkpoint(checkpoint_bytes(SpeechModel("joint", SMALL)))
        b = parse_checkpoint(checkpoint_bytes(SpeechModel("joint", SMALL, freeze_text=True)))
        assert a.header["config_hash"] != b.header["config_hash"]
