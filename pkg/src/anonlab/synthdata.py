"""Deterministic multi-speaker synthetic corpus and log-mel features.

Speaker identity is carried by the excitation (fundamental frequency) and a
per-speaker spectral tilt; token identity by amplitude and harmonic
modulation patterns. The two are separable in principle but mixed in the
raw spectrum, so low encoder layers see them entangled.

Utterances are fixed-length: every token renders to one ``segment_len``
slice, which keeps the whole pipeline free of padding and masking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, ops


class CorpusError(ValueError):
    """Degenerate corpus parameters or malformed persisted corpus."""


@dataclass(frozen=True)
class SpeakerProfile:
    """Source-filter voice description: pitch plus per-band spectral tilt."""

    speaker_id: int
    f0: float  # Hz, in [80, 300]
    formant_gains: np.ndarray  # linear gain per log-spaced band
    jitter: float  # relative f0 perturbation per utterance


@dataclass
class Utterance:
    utt_id: str
    speaker_id: int
    tokens: list[int]
    waveform: np.ndarray  # float32 samples in [-1, 1]


@dataclass
class Corpus:
    sample_rate: int
    segment_len: int
    vocab_size: int
    speakers: list[SpeakerProfile]
    utterances: list[Utterance]
    splits: dict[str, list[str]]  # split name -> utt ids

    def split_utterances(self, name: str) -> list[Utterance]:
        wanted = set(self.splits[name])
        return [u for u in self.utterances if u.utt_id in wanted]

    def by_id(self, utt_id: str) -> Utterance:
        for u in self.utterances:
            if u.utt_id == utt_id:
                return u
        raise KeyError(utt_id)


@dataclass(frozen=True)
class FeatureConfig:
    """Short-time log-mel analysis parameters (the spectrogram map)."""

    sample_rate: int = 8000
    frame_len: int = 200
    hop: int = 100
    n_fft: int = 256
    n_mels: int = 40
    log_floor: float = 1e-10

    def __post_init__(self):
        if not (self.hop <= self.frame_len <= self.n_fft):
            raise ValueError(f"need hop <= frame_len <= n_fft, got {self.hop}/{self.frame_len}/{self.n_fft}")
        if not (self.n_mels < self.n_fft / 2):
            raise ValueError(f"need n_mels < n_fft/2, got {self.n_mels} vs {self.n_fft}")

    def frame_count(self, n_samples: int) -> int:
        return 1 + (n_samples - self.frame_len) // self.hop


# default waveform geometry; segment_len must stay in sync with the
# generator upsampling schedule in models.py
SAMPLE_RATE = 8000
SEGMENT_LEN = 800

_N_TILT_BANDS = 6
_F0_MIN, _F0_MAX = 80.0, 300.0


# ---------------------------------------------------------------------------
# speaker and token rendering


def _speaker_profiles(n_speakers: int, rng: np.random.Generator) -> list[SpeakerProfile]:
    """Distinct profiles: f0 spaced >= 10 Hz, tilts >= 0.25 apart in L2.

    The tilt range is deliberately wide so speaker identity is a strong,
    low-level, linearly-removable cue in log-mel space.
    """
    span = _F0_MAX - 40.0 - (_F0_MIN + 10.0)
    step = span / max(n_speakers - 1, 1)
    if step < 10.0:
        raise CorpusError(f"cannot space {n_speakers} speakers >= 10 Hz apart in f0")
    profiles = []
    for sid in range(n_speakers):
        f0 = _F0_MIN + 10.0 + step * sid + rng.uniform(-2.0, 2.0)
        while True:
            gains = rng.uniform(0.2, 1.6, size=_N_TILT_BANDS)
            if all(np.linalg.norm(gains - p.formant_gains) >= 0.25 for p in profiles):
                break
        profiles.append(SpeakerProfile(sid, float(f0), gains, jitter=0.02))
    return profiles


def _hadamard(n: int) -> np.ndarray:
    h = np.array([[1.0]])
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h


def _token_patterns(vocab_size: int, rng: np.random.Generator):
    """Per-token amplitude-modulation rate/phase and harmonic emphasis.

    Harmonic combs are Hadamard rows (binary high/low emphasis over eight
    harmonic groups), so any two tokens differ on half the groups.
    """
    am_rates = 2.0 + 3.0 * np.arange(vocab_size)  # cycles per segment
    am_phases = rng.uniform(0, 2 * np.pi, size=vocab_size)
    n_groups = 8
    rows = _hadamard(max(n_groups, 1 << (vocab_size - 1).bit_length()))
    harmonic_weights = 0.7 + 0.6 * rows[:vocab_size, :n_groups]  # in {0.1, 1.3}
    return am_rates, am_phases, harmonic_weights


def _tilt_gain(profile: SpeakerProfile, freqs: np.ndarray, nyquist: float) -> np.ndarray:
    """Interpolate the speaker's band gains at the given frequencies."""
    band_edges = np.geomspace(60.0, nyquist, _N_TILT_BANDS)
    return np.interp(freqs, band_edges, profile.formant_gains)


def _render_utterance(
    tokens: list[int],
    profile: SpeakerProfile,
    patterns,
    segment_len: int,
    sample_rate: int,
    rng: np.random.Generator,
) -> np.ndarray:
    am_rates, am_phases, harmonic_weights = patterns
    nyquist = sample_rate / 2
    f0 = profile.f0 * (1.0 + profile.jitter * rng.uniform(-1.0, 1.0))
    n_harm = int(0.95 * nyquist / f0)
    h = np.arange(1, n_harm + 1)
    freqs = h * f0
    phases = rng.uniform(0, 2 * np.pi, size=n_harm)
    base_amp = _tilt_gain(profile, freqs, nyquist) / np.sqrt(h)

    t = np.arange(segment_len) / sample_rate
    segs = []
    for tok in tokens:
        tok_w = harmonic_weights[tok][(h - 1) % harmonic_weights.shape[1]]
        env = 0.55 + 0.5 * np.cos(
            2 * np.pi * am_rates[tok] * np.arange(segment_len) / segment_len + am_phases[tok]
        )
        harm = np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])
        segs.append(env * ((base_amp * tok_w) @ harm))
    wave = np.concatenate(segs)
    wave += 0.003 * rng.standard_normal(wave.size)  # -50 dB noise floor
    wave *= 0.85 / max(np.abs(wave).max(), 1e-9)
    return wave.astype(np.float32)


# ---------------------------------------------------------------------------
# corpus generation


def generate_corpus(
    n_speakers: int,
    utts_per_speaker: int,
    vocab_size: int,
    seed: int,
    tokens_per_utt: int = 4,
    test_adv_fraction: float = 0.1,
    dev_fraction: float = 0.1,
    sample_rate: int = SAMPLE_RATE,
    segment_len: int = SEGMENT_LEN,
) -> Corpus:
    """Build a deterministic corpus; same arguments give a byte-identical one.

    The ``test_adv`` split holds out utterances of training speakers, so
    every speaker appears in both ``train`` and ``test_adv``.
    """
    if n_speakers < 2:
        raise CorpusError(f"need >= 2 speakers, got {n_speakers}")
    if utts_per_speaker < 2:
        raise CorpusError(f"need >= 2 utterances per speaker, got {utts_per_speaker}")
    if vocab_size < 2:
        raise CorpusError(f"need vocab_size >= 2, got {vocab_size}")
    if tokens_per_utt < 1:
        raise CorpusError(f"need tokens_per_utt >= 1, got {tokens_per_utt}")

    root = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
    profiles = _speaker_profiles(n_speakers, root)
    patterns = _token_patterns(vocab_size, root)

    utterances = []
    splits: dict[str, list[str]] = {"train": [], "test_adv": [], "dev": []}
    n_adv = max(1, round(test_adv_fraction * utts_per_speaker))
    n_dev = max(1, round(dev_fraction * utts_per_speaker))
    if n_adv + n_dev >= utts_per_speaker:
        raise CorpusError("test_adv/dev fractions leave no training utterances")

    for sid in range(n_speakers):
        for k in range(utts_per_speaker):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 1, sid, k]))
            tokens = rng.integers(0, vocab_size, size=tokens_per_utt).tolist()
            wave = _render_utterance(
                tokens, profiles[sid], patterns, segment_len, sample_rate, rng
            )
            utt_id = f"spk{sid:03d}_utt{k:04d}"
            utterances.append(Utterance(utt_id, sid, tokens, wave))
        order = np.random.default_rng(np.random.SeedSequence([seed, 2, sid])).permutation(
            utts_per_speaker
        )
        ids = [f"spk{sid:03d}_utt{k:04d}" for k in order]
        splits["test_adv"] += ids[:n_adv]
        splits["dev"] += ids[n_adv : n_adv + n_dev]
        splits["train"] += ids[n_adv + n_dev :]

    return Corpus(sample_rate, segment_len, vocab_size, profiles, utterances, splits)


def split_corpus(
    corpus: Corpus,
    probe_fraction: float,
    seed: int,
    from_split: str | None = None,
) -> tuple[list[Utterance], list[Utterance]]:
    """Per-speaker stratified split for probe training/evaluation.

    Every speaker lands on both sides. ``from_split`` restricts the pool to
    one named corpus split (default: all utterances).
    """
    if not 0 < probe_fraction < 1:
        raise CorpusError(f"probe_fraction must be in (0, 1), got {probe_fraction}")
    pool = corpus.utterances if from_split is None else corpus.split_utterances(from_split)
    by_speaker: dict[int, list[Utterance]] = {}
    for u in pool:
        by_speaker.setdefault(u.speaker_id, []).append(u)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B]))
    train, test = [], []
    for sid in sorted(by_speaker):
        utts = by_speaker[sid]
        if len(utts) < 2:
            raise CorpusError(f"speaker {sid} has {len(utts)} utterance(s); need >= 2 to split")
        order = rng.permutation(len(utts))
        n_train = int(np.clip(round(probe_fraction * len(utts)), 1, len(utts) - 1))
        train += [utts[i] for i in order[:n_train]]
        test += [utts[i] for i in order[n_train:]]
    return train, test


# ---------------------------------------------------------------------------
# features


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, n_fft//2 + 1)."""
    n_bins = cfg.n_fft // 2 + 1
    bin_freqs = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft

    def to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    nyquist = cfg.sample_rate / 2
    mel_pts = np.linspace(to_mel(0.0), to_mel(nyquist), cfg.n_mels + 2)
    hz_pts = from_mel(mel_pts)
    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (bin_freqs - lo) / max(ctr - lo, 1e-9)
        falling = (hi - bin_freqs) / max(hi - ctr, 1e-9)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def band_center_freq(cfg: FeatureConfig, band: int) -> float:
    """Center frequency in Hz of one mel filter."""
    nyquist = cfg.sample_rate / 2
    to_mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
    mel_pts = np.linspace(0.0, to_mel(nyquist), cfg.n_mels + 2)
    return float(700.0 * (10.0 ** (mel_pts[band + 1] / 2595.0) - 1.0))


_DFT_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _analysis_bases(cfg: FeatureConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(cos basis, sin basis, mel filterbank transpose), cached per config."""
    key = (cfg.sample_rate, cfg.frame_len, cfg.hop, cfg.n_fft, cfg.n_mels)
    if key not in _DFT_CACHE:
        n_bins = cfg.n_fft // 2 + 1
        t = np.arange(cfg.frame_len)
        k = np.arange(n_bins)
        window = 0.5 - 0.5 * np.cos(2 * np.pi * t / cfg.frame_len)  # Hann
        angle = 2 * np.pi * np.outer(t, k) / cfg.n_fft
        _DFT_CACHE[key] = (
            window[:, None] * np.cos(angle),
            window[:, None] * -np.sin(angle),
            mel_filterbank(cfg).T.copy(),
        )
    return _DFT_CACHE[key]


def log_mel_tensor(waveforms: Tensor, cfg: FeatureConfig) -> Tensor:
    """Differentiable log-mel: (batch, samples) -> (batch, frames, n_mels).

    Magnitude short-time spectrum through a triangular mel filterbank, then
    log(max(., log_floor)). Built from tape primitives so synthesis losses
    can propagate gradients into generated waveforms.
    """
    if waveforms.ndim != 2:
        raise ValueError(f"log_mel_tensor expects (batch, samples), got {waveforms.shape}")
    if waveforms.shape[1] < cfg.frame_len:
        raise ValueError(
            f"waveform of {waveforms.shape[1]} samples is shorter than one frame ({cfg.frame_len})"
        )
    cos_b, sin_b, fb_t = _analysis_bases(cfg)
    frames = ops.frame_signal(waveforms, cfg.frame_len, cfg.hop)
    re = ops.matmul(frames, Tensor(cos_b))
    im = ops.matmul(frames, Tensor(sin_b))
    mag = ops.sqrt(ops.square(re) + ops.square(im))
    mel = ops.matmul(mag, Tensor(fb_t))
    # max(mel, floor) == relu(mel - floor) + floor, exact for the all-zero case
    floored = ops.relu(mel - cfg.log_floor) + cfg.log_floor
    return ops.log(floored)


def log_mel(waveform: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Log-mel features of one waveform: (samples,) -> (frames, n_mels)."""
    waveform = np.asarray(waveform)
    if waveform.ndim != 1:
        raise ValueError(f"log_mel expects a 1-d waveform, got shape {waveform.shape}")
    out = log_mel_tensor(Tensor(waveform[None, :]), cfg)
    return out.data[0]


def corpus_features(corpus: Corpus, cfg: FeatureConfig) -> dict[str, np.ndarray]:
    """Log-mel features for every utterance, keyed by utt id."""
    return {u.utt_id: log_mel(u.waveform, cfg) for u in corpus.utterances}


# ---------------------------------------------------------------------------
# persistence


def save_corpus(corpus: Corpus, out_dir: str | Path) -> None:
    """Persist as corpus.json + one little-endian float32 raw file per utterance."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": 1,
        "sample_rate": corpus.sample_rate,
        "segment_len": corpus.segment_len,
        "vocab_size": corpus.vocab_size,
        "speakers": [
            {
                "speaker_id": p.speaker_id,
                "f0": p.f0,
                "formant_gains": p.formant_gains.tolist(),
                "jitter": p.jitter,
            }
            for p in corpus.speakers
        ],
        "utterances": [
            {"utt_id": u.utt_id, "speaker_id": u.speaker_id, "tokens": u.tokens}
            for u in corpus.utterances
        ],
        "splits": corpus.splits,
    }
    (out / "corpus.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    for u in corpus.utterances:
        u.waveform.astype("<f4").tofile(out / f"{u.utt_id}.f32")


def load_corpus(in_dir: str | Path) -> Corpus:
    path = Path(in_dir) / "corpus.json"
    if not path.exists():
        raise CorpusError(f"no corpus manifest at {path}")
    manifest = json.loads(path.read_text())
    speakers = [
        SpeakerProfile(
            s["speaker_id"], s["f0"], np.asarray(s["formant_gains"]), s["jitter"]
        )
        for s in manifest["speakers"]
    ]
    utterances = []
    for rec in manifest["utterances"]:
        wave = np.fromfile(Path(in_dir) / f"{rec['utt_id']}.f32", dtype="<f4")
        utterances.append(Utterance(rec["utt_id"], rec["speaker_id"], rec["tokens"], wave))
    return Corpus(
        manifest["sample_rate"],
        manifest["segment_len"],
        manifest["vocab_size"],
        speakers,
        utterances,
        manifest["splits"],
    )
