import numpy as np
import pytest

from anonlab.evaluation import (
    MiConfig,
    greedy_ctc_decode,
    levenshtein,
    make_report,
    mi_difference_report,
    mutual_information,
    quantized_entropy,
    speaker_accuracy,
    token_error_rate,
)


def one_hot_frames(path, n_cls):
    out = np.full((len(path), n_cls), -10.0)
    for t, sym in enumerate(path):
        out[t, sym] = 0.0
    return out


class TestGreedyDecode:
    # class indices: vocabulary 0..n-2, blank = n-1
    def test_collapse_repeats(self):
        lp = one_hot_frames([0, 0, 2, 1], 3)  # a a - b
        assert greedy_ctc_decode(lp) == [0, 1]

    def test_all_blank_gives_empty(self):
        lp = one_hot_frames([2, 2, 2], 3)
        assert greedy_ctc_decode(lp) == []

    def test_blank_separates_repeats(self):
        lp = one_hot_frames([0, 2, 0], 3)
        assert greedy_ctc_decode(lp) == [0, 0]

    def test_ties_take_lowest_index(self):
        lp = np.zeros((2, 3))
        assert greedy_ctc_decode(lp) == [0]

    def test_roundtrip_with_one_hot_encoding(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n_cls = int(rng.integers(2, 5))
            length = int(rng.integers(1, 6))
            seq = [int(rng.integers(0, n_cls - 1))]
            while len(seq) < length:
                nxt = int(rng.integers(0, n_cls - 1))
                if nxt != seq[-1]:  # no repeats: one-hot then decode is identity
                    seq.append(nxt)
            assert greedy_ctc_decode(one_hot_frames(seq, n_cls)) == seq


class TestTokenErrorRate:
    def test_identity_is_zero(self):
        assert token_error_rate([1, 2, 3], [1, 2, 3]) == 0.0

    def test_empty_hypothesis_all_deletions(self):
        assert token_error_rate([], [1, 2, 3, 4]) == 1.0

    def test_single_substitution(self):
        assert token_error_rate([0, 9, 2], [0, 1, 2]) == pytest.approx(1 / 3)

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError):
            token_error_rate([1], [])

    def test_edit_distance_triangle_bound(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            a, b, c = (list(rng.integers(0, 3, size=rng.integers(1, 6))) for _ in range(3))
            assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


class TestSpeakerAccuracy:
    def test_perfect(self):
        assert speaker_accuracy([0, 1, 2], [0, 1, 2]) == 1.0

    def test_macro_ignores_class_sizes(self):
        # class 0: 9 right of 9; class 1: 0 right of 1 -> macro 0.5
        preds = [0] * 9 + [0]
        labels = [0] * 9 + [1]
        assert speaker_accuracy(preds, labels) == pytest.approx(0.5)

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 4, size=40)
        preds = rng.integers(0, 4, size=40)
        relabel = rng.permutation(4)
        a = speaker_accuracy(preds, labels)
        b = speaker_accuracy(relabel[preds], relabel[labels])
        assert a == pytest.approx(b)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            speaker_accuracy([], [])


class TestMutualInformation:
    def test_self_information_equals_entropy(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, size=5000)
        cfg = MiConfig(n_bins=32)
        assert mutual_information(x, x, cfg) == pytest.approx(quantized_entropy(x, cfg), abs=1e-12)

    def test_independent_signals_near_zero(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, size=100_000)
        y = rng.uniform(-1, 1, size=100_000)
        assert mutual_information(x, y, MiConfig(n_bins=64)) < 0.05

    def test_negation_is_invertible_map(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, size=50_000)
        cfg = MiConfig(n_bins=64)
        h = quantized_entropy(x, cfg)
        assert abs(mutual_information(x, -x, cfg) - h) < 0.01

    def test_symmetry_and_nonnegativity_and_bound(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(-1, 1, size=20_000)
        y = np.clip(0.7 * x + 0.3 * rng.uniform(-1, 1, size=20_000), -1, 1)
        cfg = MiConfig(n_bins=16)
        ixy = mutual_information(x, y, cfg)
        iyx = mutual_information(y, x, cfg)
        assert abs(ixy - iyx) < 1e-12
        assert ixy >= -1e-12
        assert ixy <= min(quantized_entropy(x, cfg), quantized_entropy(y, cfg)) + 1e-12

    def test_validation(self):
        with pytest.raises(ValueError, match="1000"):
            mutual_information(np.zeros(10), np.zeros(10))
        with pytest.raises(ValueError, match="equal-length"):
            mutual_information(np.zeros(2000), np.zeros(3000))
        with pytest.raises(ValueError, match=r"\[-1, 1\]"):
            mutual_information(np.full(2000, 2.0), np.zeros(2000))
        with pytest.raises(ValueError):
            MiConfig(n_bins=1)


class TestMiDifferenceReport:
    def pairs(self, seed, scale=1.0):
        rng = np.random.default_rng(seed)
        out = []
        for i in range(6):
            x = rng.uniform(-1, 1, size=2000)
            out.append((f"utt{i}", x, np.clip(scale * x, -1, 1)))
        return out

    def test_identical_models_give_zero_differences(self):
        base = self.pairs(7)
        report = mi_difference_report(base, [(u, x.copy(), y.copy()) for u, x, y in base])
        np.testing.assert_allclose(report.differences, 0.0, atol=1e-12)
        assert report.hist_counts.sum() == 6

    def test_degraded_model_gives_positive_mean(self):
        rng = np.random.default_rng(8)
        base, anon = [], []
        for i in range(6):
            x = rng.uniform(-1, 1, size=4000)
            base.append((f"utt{i}", x, np.clip(x + 0.05 * rng.uniform(-1, 1, 4000), -1, 1)))
            anon.append((f"utt{i}", x, rng.uniform(-1, 1, size=4000)))
        report = mi_difference_report(base, anon)
        assert report.mean_difference > 0

    def test_id_mismatch_rejected(self):
        base = self.pairs(9)
        anon = self.pairs(9)[:-1] + [("other", base[0][1], base[0][2])]
        with pytest.raises(ValueError, match="ids differ"):
            mi_difference_report(base, anon)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            mi_difference_report([], [])

    def test_csv_outputs(self, tmp_path):
        report = mi_difference_report(self.pairs(10), self.pairs(10, scale=0.9))
        report.curves_csv(tmp_path / "curves.csv")
        report.histogram_csv(tmp_path / "hist.csv")
        assert (tmp_path / "curves.csv").read_text().startswith("rank,mi_baseline,mi_anon")
        hist_rows = (tmp_path / "hist.csv").read_text().splitlines()
        assert hist_rows[0] == "bin_left,bin_right,count"
        assert sum(int(r.rsplit(",", 1)[1]) for r in hist_rows[1:]) == 6


class TestReports:
    ROWS_TER = [
        {"model": "baseline", "grl": "-", "alpha/lambda": "-", "ter_train": "0.01",
         "ter_dev": "0.02", "ter_test_adv": "0.03"},
    ]
    ROWS_PROBE = [
        {"model": "adv_t3", "grl": "CE3", "alpha/lambda": "0.5/0.5", "ae_tap": "CE3",
         "spk_acc": "0.4167"},
    ]

    def test_single_run_tables(self, tmp_path):
        ter_text, probe_text = make_report(self.ROWS_TER, self.ROWS_PROBE, tmp_path)
        assert "baseline" in ter_text and "ter_dev" in ter_text
        assert "CE3" in probe_text and "spk_acc" in probe_text
        assert (tmp_path / "task_error.csv").exists()
        assert (tmp_path / "probe_accuracy.txt").exists()

    def test_grid_has_row_per_combination(self, tmp_path):
        rows = []
        for tap in (1, 3, 5):
            for al in ("0.1/0.3", "0.5/0.5"):
                rows.append({"model": f"adv_t{tap}", "grl": f"CE{tap}", "alpha/lambda": al,
                             "ae_tap": f"CE{tap}", "spk_acc": "0.5"})
        _, probe_text = make_report([], rows, tmp_path)
        assert probe_text.count("\n") == 2 + 6  # header + rule + six rows

    def test_empty_report_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            make_report([], [], tmp_path)
