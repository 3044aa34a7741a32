"""Metrics and analyses: greedy CTC decoding, token error rate, unweighted
speaker accuracy, plug-in mutual information, and report tables.

The MI estimator quantizes both waveforms onto uniform amplitude bins over
[-1, 1], forms a joint histogram over time-aligned sample pairs, and takes
the plug-in estimate in bits (I = H(X) + H(Y) - H(X, Y)), so I(X, X) equals
H(X) exactly on the quantized data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .models import CtcHead, Encoder
from .synthdata import Corpus, FeatureConfig, log_mel


# ---------------------------------------------------------------------------
# decoding and error rates


def greedy_ctc_decode(log_probs: np.ndarray) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks (last class).

    Ties resolve to the lowest class index.
    """
    log_probs = np.asarray(log_probs)
    if log_probs.ndim != 2:
        raise ValueError(f"expected (frames, classes), got {log_probs.shape}")
    blank = log_probs.shape[1] - 1
    path = np.argmax(log_probs, axis=1)
    out: list[int] = []
    prev = -1
    for sym in path:
        if sym != prev and sym != blank:
            out.append(int(sym))
        prev = sym
    return out


def levenshtein(a, b) -> int:
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, xa in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, xb in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (xa != xb))
        prev = cur
    return prev[len(b)]


def token_error_rate(hyp, ref) -> float:
    """Edit distance normalized by reference length."""
    ref = list(ref)
    if not ref:
        raise ValueError("token_error_rate needs a nonempty reference")
    return levenshtein(hyp, ref) / len(ref)


def speaker_accuracy(preds, labels, return_per_class: bool = False):
    """Unweighted accuracy: macro average of per-class accuracies."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError(f"need equal nonempty predictions/labels, got {preds.shape} vs {labels.shape}")
    per_class = {}
    for cls in np.unique(labels):
        mask = labels == cls
        per_class[int(cls)] = float(np.mean(preds[mask] == cls))
    acc = float(np.mean(list(per_class.values())))
    return (acc, per_class) if return_per_class else acc


def dataset_token_error_rate(
    encoder: Encoder, head: CtcHead, corpus: Corpus, split: str, feat_cfg: FeatureConfig, batch: int = 32
) -> float:
    """Corpus-level TER on a split: total edits over total reference tokens."""
    utts = corpus.split_utterances(split)
    feats = np.stack([log_mel(u.waveform, feat_cfg) for u in utts]).astype(np.float32)
    edits = 0
    ref_len = 0
    for lo in range(0, len(utts), batch):
        out, _ = encoder.forward(Tensor(feats[lo : lo + batch]))
        log_probs = head.forward(out)
        for row, utt in zip(log_probs.data, utts[lo : lo + batch]):
            hyp = greedy_ctc_decode(row)
            edits += levenshtein(hyp, utt.tokens)
            ref_len += len(utt.tokens)
    return edits / ref_len


# ---------------------------------------------------------------------------
# mutual information


@dataclass(frozen=True)
class MiConfig:
    n_bins: int = 64  # uniform amplitude bins over [-1, 1]
    hist_bins: int = 20  # bins of the difference histogram

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError(f"n_bins must be >= 2, got {self.n_bins}")


def _entropy_bits(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())


def mutual_information(x: np.ndarray, y: np.ndarray, cfg: MiConfig = MiConfig()) -> float:
    """Plug-in MI in bits between two equal-length waveforms in [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"need equal-length 1-d signals, got {x.shape} vs {y.shape}")
    if x.size < 1000:
        raise ValueError(f"need >= 1000 samples for a usable histogram, got {x.size}")
    if np.abs(x).max() > 1.0 + 1e-6 or np.abs(y).max() > 1.0 + 1e-6:
        raise ValueError("samples must lie in [-1, 1]")
    edges = np.linspace(-1.0, 1.0, cfg.n_bins + 1)
    joint, _, _ = np.histogram2d(np.clip(x, -1, 1), np.clip(y, -1, 1), bins=[edges, edges])
    h_x = _entropy_bits(joint.sum(axis=1))
    h_y = _entropy_bits(joint.sum(axis=0))
    h_xy = _entropy_bits(joint.reshape(-1))
    return h_x + h_y - h_xy


def quantized_entropy(x: np.ndarray, cfg: MiConfig = MiConfig()) -> float:
    """H(X) in bits under the same amplitude quantization as the MI estimate."""
    edges = np.linspace(-1.0, 1.0, cfg.n_bins + 1)
    counts, _ = np.histogram(np.clip(np.asarray(x, dtype=np.float64), -1, 1), bins=edges)
    return _entropy_bits(counts)


@dataclass
class MiReport:
    utt_ids: list[str]
    mi_baseline: np.ndarray  # I(x, resynth from baseline embeddings)
    mi_anon: np.ndarray  # I(x, resynth from adversarial embeddings)
    differences: np.ndarray  # baseline minus anonymized, per utterance
    hist_edges: np.ndarray
    hist_counts: np.ndarray

    @property
    def mean_difference(self) -> float:
        return float(self.differences.mean())

    def curves_csv(self, path: str | Path) -> None:
        """Sorted per-utterance MI values for curve plotting."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        order_b = np.sort(self.mi_baseline)[::-1]
        order_a = np.sort(self.mi_anon)[::-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "mi_baseline", "mi_anon"])
            for i, (b, a) in enumerate(zip(order_b, order_a)):
                w.writerow([i, f"{b:.6f}", f"{a:.6f}"])

    def histogram_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "count"])
            for lo, hi, c in zip(self.hist_edges[:-1], self.hist_edges[1:], self.hist_counts):
                w.writerow([f"{lo:.6f}", f"{hi:.6f}", int(c)])


def mi_difference_report(
    baseline_pairs: list[tuple[str, np.ndarray, np.ndarray]],
    anon_pairs: list[tuple[str, np.ndarray, np.ndarray]],
    cfg: MiConfig = MiConfig(),
) -> MiReport:
    """Per-utterance MI under both models and the difference histogram.

    Each pair is (utt_id, original waveform, resynthesized waveform); both
    lists must cover the same utterance ids.
    """
    if not baseline_pairs or not anon_pairs:
        raise ValueError("mi_difference_report needs nonempty pair lists")
    base = {uid: (x, xh) for uid, x, xh in baseline_pairs}
    anon = {uid: (x, xh) for uid, x, xh in anon_pairs}
    if set(base) != set(anon):
        raise ValueError(
            f"utterance ids differ: {sorted(set(base) ^ set(anon))[:4]} ..."
        )
    ids = sorted(base)
    mi_b = np.array([mutual_information(*base[u], cfg) for u in ids])
    mi_a = np.array([mutual_information(*anon[u], cfg) for u in ids])
    diffs = mi_b - mi_a
    counts, edges = np.histogram(diffs, bins=cfg.hist_bins)
    return MiReport(ids, mi_b, mi_a, diffs, edges, counts)


# ---------------------------------------------------------------------------
# report tables


TER_COLUMNS = ["model", "grl", "alpha/lambda", "ter_train", "ter_dev", "ter_test_adv"]
PROBE_COLUMNS = ["model", "grl", "alpha/lambda", "ae_tap", "spk_acc"]


def format_table(rows: list[dict], columns: list[str]) -> str:
    """Aligned plain-text grid; values are rendered with str()."""
    if not rows:
        raise ValueError("cannot format an empty table")
    cells = [[str(r.get(c, "-")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = [
        "  ".join(c.ljust(w) for c, w in zip(columns, widths)),
        "  ".join("-" * w for w in widths),
    ]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def write_csv(rows: list[dict], columns: list[str], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in columns})


def make_report(
    ter_rows: list[dict], probe_rows: list[dict], out_dir: str | Path
) -> tuple[str, str]:
    """Emit the two result grids (task error and probe accuracy) as CSV plus
    aligned text; returns the text renderings."""
    if not ter_rows and not probe_rows:
        raise ValueError("make_report needs at least one run")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ter_text = probe_text = ""
    if ter_rows:
        write_csv(ter_rows, TER_COLUMNS, out / "task_error.csv")
        ter_text = format_table(ter_rows, TER_COLUMNS)
        (out / "task_error.txt").write_text(ter_text)
    if probe_rows:
        write_csv(probe_rows, PROBE_COLUMNS, out / "probe_accuracy.csv")
        probe_text = format_table(probe_rows, PROBE_COLUMNS)
        (out / "probe_accuracy.txt").write_text(probe_text)
    return ter_text, probe_text
