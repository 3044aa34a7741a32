import numpy as np
import pytest

from anonlab.autodiff import Tape, Tensor, backward, ops, precision
from anonlab.losses import combined_loss, cross_entropy_batch, ctc_loss_batch, finite_mean
from anonlab.models import (
    CheckpointError,
    CtcHead,
    DiscriminatorEnsemble,
    Encoder,
    EncoderConfig,
    SpeakerClassifier,
    Stage1Model,
    SynthGenerator,
    load_checkpoint,
    load_params_into,
    save_checkpoint,
)

SMALL = EncoderConfig(n_blocks=4, model_dim=16, n_heads=2, conv_kernel=3, n_mels=8)


def rand_features(b=2, t=12, m=8, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(b, t, m)).astype(np.float32))


class TestEncoder:
    def test_tap_outputs_shapes(self):
        enc = Encoder(SMALL, seed=1)
        out, taps = enc.forward(rand_features(), taps={2, 4})
        assert out.shape == (2, 6, 16)
        assert set(taps) == {2, 4}
        assert all(v.shape == (2, 6, 16) for v in taps.values())

    def test_last_tap_equals_encoder_out(self):
        enc = Encoder(SMALL, seed=1)
        out, taps = enc.forward(rand_features(), taps={4})
        assert np.array_equal(out.data, taps[4].data)

    def test_empty_taps(self):
        enc = Encoder(SMALL, seed=1)
        out, taps = enc.forward(rand_features())
        assert taps == {}

    def test_tap_out_of_range(self):
        enc = Encoder(SMALL, seed=1)
        with pytest.raises(ValueError, match="out of range"):
            enc.forward(rand_features(), taps={0})
        with pytest.raises(ValueError, match="out of range"):
            enc.forward(rand_features(), taps={5})

    def test_deterministic_forward(self):
        enc = Encoder(SMALL, seed=1)
        x = rand_features()
        a, _ = enc.forward(x)
        b, _ = enc.forward(x)
        assert np.array_equal(a.data, b.data)

    def test_subsampling_halves_frames(self):
        enc = Encoder(SMALL, seed=1)
        for t in (9, 10, 31):
            out, _ = enc.forward(rand_features(t=t))
            assert out.shape[1] == t // 2

    def test_partition_moves_blocks_between_groups(self):
        enc = Encoder(SMALL, seed=1)
        g2 = enc.partition(2)
        g3 = enc.partition(3)
        moved = {n for n in g2 if g2[n] != g3[n]}
        assert moved == {n for n in g2 if n.startswith("block3.")}
        assert all(v == "f" for n, v in g2.items() if n.startswith("frontend."))

    def test_block_param_shapes_preserved(self):
        enc = Encoder(SMALL, seed=1)
        for name, p in enc.params.items():
            assert p.requires_grad, name


class TestStage1Model:
    def test_task_forward_invariant_to_branch_bitwise(self):
        x = rand_features(seed=3)
        plain = Stage1Model(SMALL, vocab_size=3, seed=9)
        lp_plain, spk, _ = plain.forward(x)
        assert spk is None
        branched = Stage1Model(SMALL, vocab_size=3, seed=9)
        branched.attach_speaker_branch(2, alpha=0.5, n_speakers=4)
        lp_branched, spk2, _ = branched.forward(x)
        assert np.array_equal(lp_plain.data, lp_branched.data)
        assert spk2.shape == (2, 4)

    def test_second_attachment_rejected(self):
        m = Stage1Model(SMALL, vocab_size=3, seed=0)
        m.attach_speaker_branch(2, 0.5, 4)
        with pytest.raises(ValueError, match="already attached"):
            m.attach_speaker_branch(3, 0.5, 4)

    def test_attach_at_block_zero_rejected(self):
        m = Stage1Model(SMALL, vocab_size=3, seed=0)
        with pytest.raises(ValueError):
            m.attach_speaker_branch(0, 0.5, 4)

    def test_frontend_gradient_composition(self):
        # dual-backward oracle on the frontend weights
        alpha, lam = 0.6, 0.4
        rng = np.random.default_rng(4)
        with precision("float64"):
            m = Stage1Model(SMALL, vocab_size=3, seed=2)
            m.attach_speaker_branch(2, alpha, 4)
            feats = Tensor(rng.normal(size=(2, 12, 8)))
            labels = rng.integers(0, 3, size=(2, 2))
            spk = rng.integers(0, 4, size=2)

            def losses(reverse: bool):
                if reverse:
                    lp, logits, _ = m.forward(feats)
                else:
                    enc_out, taps = m.encoder.forward(feats, {2})
                    lp = m.head.forward(enc_out)
                    logits = m.speaker.forward(taps[2])
                l_y = finite_mean(ctc_loss_batch(lp, labels))
                l_d = ops.mean_over_axis(cross_entropy_batch(logits, spk), axis=0)
                return l_y, l_d

            w = m.encoder.params["frontend.w"]
            with Tape():
                l_y, l_d = losses(True)
                g_comb = backward(combined_loss(l_y, l_d, lam)).wrt(w)
            with Tape():
                g_task = backward(losses(True)[0]).wrt(w)
            with Tape():
                g_spk = backward(losses(False)[1]).wrt(w)
        np.testing.assert_allclose(g_comb, g_task - alpha * lam * g_spk, rtol=1e-10, atol=1e-14)

    def test_param_groups_cover_everything(self):
        m = Stage1Model(SMALL, vocab_size=3, seed=0)
        m.attach_speaker_branch(2, 0.5, 4)
        groups = m.param_groups()
        assert set(groups) == set(m.trainable_params())
        assert {"f", "m", "y", "d"} == set(groups.values())


class TestCtcHead:
    def test_rows_exponentiate_to_one(self):
        head = CtcHead(16, vocab_size=5, seed=0)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 7, 16)).astype(np.float32))
        out = head.forward(x)
        assert out.shape == (2, 7, 6)
        np.testing.assert_allclose(np.exp(out.data).sum(axis=-1), 1.0, atol=1e-6)


class TestSpeakerClassifier:
    def test_statistics_pooling_hand_example(self):
        sc = SpeakerClassifier(2, 3, seed=0)
        pooled = sc.pool(Tensor(np.array([[[1.0, 3.0], [3.0, 5.0]]])))
        np.testing.assert_allclose(pooled.data, [[2.0, 4.0, 1.0, 1.0]], atol=1e-6)

    def test_frame_permutation_invariance(self):
        sc = SpeakerClassifier(6, 4, seed=1)
        rng = np.random.default_rng(2)
        frames = rng.normal(size=(1, 9, 6)).astype(np.float32)
        perm = rng.permutation(9)
        a = sc.forward(Tensor(frames)).data
        b = sc.forward(Tensor(frames[:, perm, :])).data
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_constant_frames_zero_std(self):
        sc = SpeakerClassifier(3, 2, seed=0)
        frames = Tensor(np.ones((1, 5, 3), dtype=np.float32))
        h = ops.relu(
            ops.bias_add(ops.matmul(frames, sc.params["frame1.w"]), sc.params["frame1.b"])
        )
        h = ops.relu(ops.bias_add(ops.matmul(h, sc.params["frame2.w"]), sc.params["frame2.b"]))
        pooled = sc.pool(h)
        hidden = pooled.shape[1] // 2
        np.testing.assert_array_equal(pooled.data[:, hidden:], 0.0)

    def test_single_frame_rejected(self):
        sc = SpeakerClassifier(3, 2, seed=0)
        with pytest.raises(ValueError, match="frames"):
            sc.forward(Tensor(np.ones((1, 1, 3))))

    def test_single_sample_signature(self):
        sc = SpeakerClassifier(3, 5, seed=0)
        out = sc.forward(Tensor(np.ones((4, 3), dtype=np.float32)))
        assert out.shape == (5,)


class TestSynthGenerator:
    def test_output_length_matches_corpus_geometry(self):
        # frames = 4*n_tokens - 1 after subsampling must give 800*n_tokens
        gen = SynthGenerator(16, seed=0)
        for n_tokens in (1, 2, 4):
            frames = 4 * n_tokens - 1
            emb = Tensor(np.zeros((1, frames, 16), dtype=np.float32))
            out = gen.forward(emb)
            assert out.shape == (1, 800 * n_tokens)
            assert SynthGenerator.output_len(frames) == 800 * n_tokens

    def test_zero_embedding_is_finite(self):
        gen = SynthGenerator(16, seed=0)
        out = gen.forward(Tensor(np.zeros((2, 7, 16), dtype=np.float32)))
        assert np.all(np.isfinite(out.data))
        assert np.abs(out.data).max() < 1.0  # tanh output

    def test_same_weights_and_input_bitwise(self):
        gen = SynthGenerator(16, seed=0)
        emb = Tensor(np.random.default_rng(1).normal(size=(1, 7, 16)).astype(np.float32))
        assert np.array_equal(gen.forward(emb).data, gen.forward(emb).data)


class TestDiscriminatorEnsemble:
    def test_two_members_with_judgments_and_features(self):
        ens = DiscriminatorEnsemble(seed=0)
        wave = Tensor(np.random.default_rng(0).uniform(-1, 1, size=(2, 800)).astype(np.float32))
        outs = ens.forward(wave)
        assert len(outs) == ens.n_members == 2
        for judgment, feats in outs:
            assert judgment.ndim == 3
            assert len(feats) == 4  # three conv layers + judgment head
            assert feats[-1] is judgment

    def test_identical_inputs_give_identical_features(self):
        from anonlab.losses import feature_matching

        ens = DiscriminatorEnsemble(seed=0)
        wave = np.random.default_rng(1).uniform(-1, 1, size=(1, 800)).astype(np.float32)
        a = ens.forward(Tensor(wave))
        b = ens.forward(Tensor(wave.copy()))
        fm = feature_matching(
            [f for _, fs in a for f in fs], [f for _, fs in b for f in fs]
        )
        assert fm.item() == 0.0

    def test_odd_length_right_padded_for_period_member(self):
        ens = DiscriminatorEnsemble(seed=0, period=2)
        wave = Tensor(np.random.default_rng(2).uniform(-1, 1, size=(1, 801)).astype(np.float32))
        outs = ens.forward(wave)  # no shape error
        assert len(outs) == 2


class TestCheckpointFormat:
    def test_roundtrip(self, tmp_path):
        params = {
            "a.w": Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True),
            "b": Tensor(np.array([1.5], dtype=np.float32), requires_grad=True),
        }
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"kind": "test", "step": 7}, params)
        manifest, arrays = load_checkpoint(path)
        assert manifest == {"kind": "test", "step": 7}
        assert set(arrays) == {"a.w", "b"}
        np.testing.assert_array_equal(arrays["a.w"], params["a.w"].data)

    def test_rejects_garbage_file(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file_named_error(self, tmp_path):
        with pytest.raises(CheckpointError, match="no checkpoint"):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_load_params_into_validates_names_and_shapes(self, tmp_path):
        params = {"w": Tensor(np.zeros((2, 2), dtype=np.float32), requires_grad=True)}
        with pytest.raises(CheckpointError, match="mismatch"):
            load_params_into(params, {"w_other": np.zeros((2, 2))})
        with pytest.raises(CheckpointError, match="shape"):
            load_params_into(params, {"w": np.zeros((3, 3))})

    def test_byte_identical_rewrites(self, tmp_path):
        params = {"w": Tensor(np.random.default_rng(0).normal(size=(4, 4)).astype(np.float32))}
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, {"seed": 1}, params)
        save_checkpoint(p2, {"seed": 1}, params)
        assert p1.read_bytes() == p2.read_bytes()
