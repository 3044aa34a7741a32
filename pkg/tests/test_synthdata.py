import numpy as np
import pytest

from anonlab.synthdata import (
    Corpus,
    CorpusError,
    FeatureConfig,
    band_center_freq,
    generate_corpus,
    load_corpus,
    log_mel,
    mel_filterbank,
    save_corpus,
    split_corpus,
)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(8, 25, 6, seed=7)


class TestGenerateCorpus:
    def test_default_example_counts(self, corpus):
        assert len(corpus.utterances) == 200
        speakers_train = {u.speaker_id for u in corpus.split_utterances("train")}
        speakers_adv = {u.speaker_id for u in corpus.split_utterances("test_adv")}
        assert speakers_train == speakers_adv == set(range(8))
        assert not set(corpus.splits["train"]) & set(corpus.splits["test_adv"])

    def test_same_seed_is_byte_identical(self, corpus):
        again = generate_corpus(8, 25, 6, seed=7)
        for a, b in zip(corpus.utterances, again.utterances):
            assert a.utt_id == b.utt_id and a.tokens == b.tokens
            assert np.array_equal(a.waveform, b.waveform)

    def test_different_seed_differs(self, corpus):
        other = generate_corpus(8, 25, 6, seed=8)
        assert not np.array_equal(corpus.utterances[0].waveform, other.utterances[0].waveform)

    def test_degenerate_parameters_rejected(self):
        with pytest.raises(CorpusError):
            generate_corpus(8, 25, 1, seed=0)  # vocab_size 1
        with pytest.raises(CorpusError):
            generate_corpus(1, 25, 6, seed=0)
        with pytest.raises(CorpusError):
            generate_corpus(8, 1, 6, seed=0)

    def test_waveform_geometry_and_range(self, corpus):
        for u in corpus.utterances[:10]:
            assert u.waveform.shape == (len(u.tokens) * corpus.segment_len,)
            assert np.abs(u.waveform).max() <= 1.0
            assert u.waveform.dtype == np.float32

    def test_speaker_profile_invariants(self, corpus):
        profiles = corpus.speakers
        for p in profiles:
            assert 80 <= p.f0 <= 300
        for a in profiles:
            for b in profiles:
                if a.speaker_id >= b.speaker_id:
                    continue
                distinct = abs(a.f0 - b.f0) >= 10 or np.linalg.norm(a.formant_gains - b.formant_gains) >= 0.1
                assert distinct


class TestSplitCorpus:
    def test_seventy_thirty(self, corpus):
        train, test = split_corpus(corpus, 0.7, seed=1)
        per_spk_train = {s: 0 for s in range(8)}
        per_spk_test = {s: 0 for s in range(8)}
        for u in train:
            per_spk_train[u.speaker_id] += 1
        for u in test:
            per_spk_test[u.speaker_id] += 1
        for s in range(8):
            assert per_spk_train[s] == round(0.7 * 25)
            assert per_spk_test[s] == 25 - round(0.7 * 25)

    def test_half_split_of_two(self):
        c = generate_corpus(3, 4, 3, seed=0)
        two_each = [u for u in c.utterances if int(u.utt_id[-1]) < 2]
        small = Corpus(c.sample_rate, c.segment_len, c.vocab_size, c.speakers, two_each, {})
        train, test = split_corpus(small, 0.5, seed=0)
        assert len(train) == len(test) == 3
        assert {u.speaker_id for u in train} == {u.speaker_id for u in test} == {0, 1, 2}

    def test_same_seed_identical(self, corpus):
        a = split_corpus(corpus, 0.7, seed=3)
        b = split_corpus(corpus, 0.7, seed=3)
        assert [u.utt_id for u in a[0]] == [u.utt_id for u in b[0]]

    def test_too_few_utterances_rejected(self, corpus):
        lonely = Corpus(
            corpus.sample_rate,
            corpus.segment_len,
            corpus.vocab_size,
            corpus.speakers[:1],
            corpus.utterances[:1],
            {"train": [corpus.utterances[0].utt_id]},
        )
        with pytest.raises(CorpusError):
            split_corpus(lonely, 0.5, seed=0)

    def test_bad_fraction_rejected(self, corpus):
        with pytest.raises(CorpusError):
            split_corpus(corpus, 1.0, seed=0)


class TestLogMel:
    def test_all_zeros_hits_log_floor(self):
        cfg = FeatureConfig()
        feats = log_mel(np.zeros(800), cfg)
        np.testing.assert_allclose(feats, np.log(cfg.log_floor), rtol=1e-6)

    def test_frame_count_formula(self):
        cfg = FeatureConfig(frame_len=200, hop=100)
        feats = log_mel(np.zeros(400), cfg)
        assert feats.shape[0] == 3  # 1 + (400 - 200) // 100

    def test_sine_at_band_center_dominates(self):
        cfg = FeatureConfig()
        band = 12
        freq = band_center_freq(cfg, band)
        t = np.arange(8000) / cfg.sample_rate
        feats = log_mel(0.5 * np.sin(2 * np.pi * freq * t), cfg)
        assert (np.argmax(feats, axis=1) == band).all()

    def test_too_short_waveform_rejected(self):
        with pytest.raises(ValueError):
            log_mel(np.zeros(100), FeatureConfig(frame_len=200))

    def test_pure_function_of_input(self, corpus):
        cfg = FeatureConfig()
        wave = corpus.utterances[0].waveform
        assert np.array_equal(log_mel(wave, cfg), log_mel(wave, cfg))


class TestMelFilterbank:
    def test_rows_nonnegative_with_positive_sums(self):
        fb = mel_filterbank(FeatureConfig())
        assert (fb >= 0).all()
        assert (fb.sum(axis=1) > 0).all()

    def test_adjacent_triangles_overlap(self):
        fb = mel_filterbank(FeatureConfig())
        for m in range(fb.shape[0] - 1):
            assert (np.minimum(fb[m], fb[m + 1]) > 0).any(), f"filters {m},{m + 1} do not overlap"

    def test_config_invariants_enforced(self):
        with pytest.raises(ValueError):
            FeatureConfig(hop=300, frame_len=200)
        with pytest.raises(ValueError):
            FeatureConfig(n_mels=200, n_fft=256)


class TestPersistence:
    def test_roundtrip_is_byte_identical(self, corpus, tmp_path):
        save_corpus(corpus, tmp_path / "c")
        loaded = load_corpus(tmp_path / "c")
        assert loaded.splits == corpus.splits
        assert loaded.vocab_size == corpus.vocab_size
        for a, b in zip(corpus.utterances, loaded.utterances):
            assert a.utt_id == b.utt_id and a.speaker_id == b.speaker_id and a.tokens == b.tokens
            assert np.array_equal(a.waveform, b.waveform)

    def test_missing_manifest_is_named_error(self, tmp_path):
        with pytest.raises(CorpusError, match="corpus.json"):
            load_corpus(tmp_path)

    def test_waveform_files_are_little_endian_f32(self, corpus, tmp_path):
        save_corpus(corpus, tmp_path / "c")
        u = corpus.utterances[0]
        raw = np.fromfile(tmp_path / "c" / f"{u.utt_id}.f32", dtype="<f4")
        assert np.array_equal(raw, u.waveform)
