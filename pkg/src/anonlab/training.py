"""Training loops: Adam, stage-1 joint adversarial training, probe training
on frozen embeddings, and the toy synthesis GAN.

Every loop is deterministic for a fixed seed in single-threaded mode; batch
sampling, parameter init, and optimizer arithmetic all derive from explicit
seed sequences. Speaker-classifier parameters are dropped from stage-1
checkpoints: the saved model carries only the feature extractor, the
speaker-invariant encoder, and the task head.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import GradientMap, Tape, Tensor, backward, ops
from .losses import (
    SynthLossConfig,
    combined_loss,
    count_infeasible,
    cross_entropy_batch,
    ctc_loss_batch,
    feature_matching,
    finite_mean,
    gan_losses,
    mel_l1,
)
from .models import (
    DiscriminatorEnsemble,
    Encoder,
    EncoderConfig,
    CheckpointError,
    CtcHead,
    SpeakerClassifier,
    Stage1Model,
    SynthGenerator,
    load_checkpoint,
    load_params_into,
    save_checkpoint,
)
from .synthdata import Corpus, FeatureConfig, Utterance, log_mel, split_corpus


class DivergenceError(RuntimeError):
    """The divergence guard aborted training.

    Raised when the task loss goes non-finite, rises past ``guard_factor``
    times its end-of-warmup value, or has not fallen below
    ``guard_converge_ratio`` of its initial level by ``guard_converge_step``
    (the model is being prevented from converging). Usually means the
    reversal scaling alpha*lambda is too aggressive.
    """

    def __init__(self, step: int, value: float, reference: float, rule: str):
        super().__init__(
            f"divergence guard ({rule}) tripped at step {step}: task loss {value:.4g} "
            f"vs reference {reference:.4g}"
        )
        self.step = step
        self.value = value
        self.reference = reference
        self.rule = rule


@dataclass(frozen=True)
class GrlConfig:
    """Reversal placement and scaling: tap layer, gradient scale, loss weight."""

    tap_layer: int = 3
    alpha: float = 0.5
    lam: float = 0.5

    def __post_init__(self):
        if self.tap_layer < 1:
            raise ValueError(f"tap_layer must be >= 1, got {self.tap_layer}")
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lam must be finite and >= 0, got {self.lam}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    steps: int = 3000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip: float = 5.0
    seed: int = 0
    guard_warmup: int = 100
    guard_factor: float = 10.0
    # non-convergence arm of the guard: at guard_converge_step, recent task
    # loss must have fallen below guard_converge_ratio of its initial level
    guard_converge_step: int = 500
    guard_converge_ratio: float = 0.25

    def __post_init__(self):
        for name in ("batch_size", "steps", "lr", "beta1", "beta2", "eps", "clip"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 600
    batch_size: int = 32
    lr: float = 2e-3
    fraction: float = 0.7
    split: str = "train"
    seed: int = 0


@dataclass(frozen=True)
class SynthTrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 2e-4
    beta1: float = 0.8
    beta2: float = 0.99
    eps: float = 1e-8
    clip: float = 50.0
    n_utterances: int = 20
    holdout: int = 4
    eval_interval: int = 50
    seed: int = 0
    guard_warmup: int = 100
    guard_factor: float = 10.0
    losses: SynthLossConfig = field(default_factory=SynthLossConfig)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with global-norm clipping first; NaN gradients reject the step."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-9, clip: float = 5.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0
        self.rejected = 0

    def step(self, grads: dict[str, np.ndarray]) -> bool:
        """Apply one update; returns False (and counts) on non-finite grads."""
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            self.rejected += 1
            return False
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = self.clip / total if total > self.clip else 1.0
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads.get(name)
            g = np.zeros_like(p.data) if g is None else g * scale
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            # rebind, never write in place: arrays saved on old tapes stay valid
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
        return True


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: Adam) -> bool:
    """Functional alias for one optimizer update on an existing Adam state."""
    assert state.params is params
    return state.step(grads)


# ---------------------------------------------------------------------------
# metrics trace


@dataclass
class TraceRecord:
    step: int
    l_y: float
    l_d: float
    l_total: float
    gnorm_f: float
    gnorm_m: float
    gnorm_y: float
    gnorm_d: float


class MetricsTrace:
    """Append-only per-step training record with monotone step index."""

    FIELDS = ("step", "l_y", "l_d", "l_total", "gnorm_f", "gnorm_m", "gnorm_y", "gnorm_d")

    def __init__(self):
        self.records: list[TraceRecord] = []

    def append(self, rec: TraceRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError(f"non-monotone step {rec.step} after {self.records[-1].step}")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.FIELDS)
            for r in self.records:
                writer.writerow([getattr(r, f) for f in self.FIELDS])

    def __len__(self) -> int:
        return len(self.records)


# ---------------------------------------------------------------------------
# batching


class _BatchSampler:
    """Uniform with-replacement sampling over precomputed utterance features."""

    def __init__(self, corpus: Corpus, utterances: list[Utterance], feat_cfg: FeatureConfig, seed: int):
        self.features = np.stack([log_mel(u.waveform, feat_cfg) for u in utterances]).astype(np.float32)
        self.labels = np.stack([np.asarray(u.tokens, dtype=np.int64) for u in utterances])
        self.speakers = np.array([u.speaker_id for u in utterances], dtype=np.int64)
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C4]))

    def draw(self, batch_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = self.rng.integers(0, len(self.speakers), size=batch_size)
        return self.features[idx], self.labels[idx], self.speakers[idx]


def _grad_norms(grads: GradientMap, params: dict[str, Tensor], groups: dict[str, str]) -> dict[str, float]:
    sq = {"f": 0.0, "m": 0.0, "y": 0.0, "d": 0.0}
    for name, p in params.items():
        g = grads.get(p)
        if g is not None:
            sq[groups[name]] += float(np.sum(g.astype(np.float64) ** 2))
    return {k: float(np.sqrt(v)) for k, v in sq.items()}


# ---------------------------------------------------------------------------
# stage 1


def train_stage1(
    corpus: Corpus,
    enc_cfg: EncoderConfig,
    grl: Optional[GrlConfig],
    cfg: TrainConfig,
    feat_cfg: FeatureConfig,
    ckpt_path: Optional[str | Path] = None,
    metrics_path: Optional[str | Path] = None,
) -> tuple[Stage1Model, MetricsTrace]:
    """Joint CTC + reversed-speaker training (baseline when ``grl`` is None).

    One backward pass per batch drives a single Adam update over all
    parameter groups. The divergence guard aborts when the task loss goes
    non-finite or exceeds ``guard_factor`` times its value at step
    ``guard_warmup``.
    """
    n_speakers = len(corpus.speakers)
    if grl is not None and grl.tap_layer > enc_cfg.n_blocks:
        raise ValueError(f"tap_layer {grl.tap_layer} exceeds n_blocks {enc_cfg.n_blocks}")

    model = Stage1Model(enc_cfg, corpus.vocab_size, seed=cfg.seed)
    if grl is not None:
        model.attach_speaker_branch(grl.tap_layer, grl.alpha, n_speakers)
    params = model.trainable_params()
    groups = model.param_groups()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip)
    sampler = _BatchSampler(corpus, corpus.split_utterances("train"), feat_cfg, cfg.seed)
    trace = MetricsTrace()
    lam = grl.lam if grl is not None else 0.0

    guard_ref: Optional[float] = None
    infeasible_total = 0
    l_y_history: list[float] = []
    for step in range(1, cfg.steps + 1):
        feats, labels, speakers = sampler.draw(cfg.batch_size)
        with Tape():
            log_probs, spk_logits, _ = model.forward(Tensor(feats))
            per_utt = ctc_loss_batch(log_probs, labels)
            infeasible_total += count_infeasible(per_utt)
            l_y = finite_mean(per_utt)
            if spk_logits is not None:
                l_d = ops.mean_over_axis(cross_entropy_batch(spk_logits, speakers), axis=0)
            else:
                l_d = Tensor(0.0)
            loss = combined_loss(l_y, l_d, lam)
            grads = backward(loss)

        norms = _grad_norms(grads, params, groups)
        trace.append(
            TraceRecord(step, l_y.item(), l_d.item(), loss.item(), norms["f"], norms["m"], norms["y"], norms["d"])
        )
        opt.step({name: grads.get(p) for name, p in params.items()})

        l_y_val = l_y.item()
        l_y_history.append(l_y_val)
        if not np.isfinite(l_y_val):
            raise DivergenceError(step, l_y_val, guard_ref or 0.0, "non-finite loss")
        if step == cfg.guard_warmup:
            guard_ref = l_y_val
        elif guard_ref is not None and l_y_val > cfg.guard_factor * guard_ref:
            raise DivergenceError(step, l_y_val, guard_ref, "loss rose past guard_factor x warmup value")
        if step == cfg.guard_converge_step:
            initial = float(np.mean(l_y_history[:10]))
            recent = float(np.mean(l_y_history[-10:]))
            if recent > cfg.guard_converge_ratio * initial:
                raise DivergenceError(step, recent, initial, "failed to converge")

    if metrics_path is not None:
        trace.to_csv(metrics_path)
    if ckpt_path is not None:
        save_stage1_checkpoint(ckpt_path, model, corpus, grl, cfg, feat_cfg, infeasible_total)
    return model, trace


def save_stage1_checkpoint(
    path: str | Path,
    model: Stage1Model,
    corpus: Corpus,
    grl: Optional[GrlConfig],
    cfg: TrainConfig,
    feat_cfg: FeatureConfig,
    infeasible_total: int = 0,
) -> None:
    """Persist encoder + head only; speaker-branch parameters are dropped."""
    manifest = {
        "kind": "stage1",
        "encoder": model.encoder.cfg.to_dict(),
        "vocab_size": model.head.vocab_size,
        "n_speakers": len(corpus.speakers),
        "grl": None if grl is None else {"tap_layer": grl.tap_layer, "alpha": grl.alpha, "lambda": grl.lam},
        "seed": cfg.seed,
        "step": cfg.steps,
        "infeasible_ctc_batid": infeasible_total,
        "features": {
            "sample_rate": feat_cfg.sample_rate,
            "frame_len": feat_cfg.frame_len,
            "hop": feat_cfg.hop,
            "n_fft": feat_cfg.n_fft,
            "n_mels": feat_cfg.n_mels,
            "log_floor": feat_cfg.log_floor,
        },
    }
    kept = {f"encoder.{k}": v for k, v in model.encoder.params.items()}
    kept |= {f"head.{k}": v for k, v in model.head.params.items()}
    save_checkpoint(path, manifest, kept)


def load_stage1_checkpoint(path: str | Path) -> tuple[dict, Encoder, CtcHead]:
    """Rebuild the frozen encoder and head from a stage-1 checkpoint."""
    manifest, arrays = load_checkpoint(path)
    if manifest.get("kind") != "stage1":
        raise CheckpointError(f"expected a stage1 checkpoint, got kind={manifest.get('kind')}")
    enc_cfg = EncoderConfig(**manifest["encoder"])
    encoder = Encoder(enc_cfg, seed=manifest["seed"])
    head = CtcHead(enc_cfg.model_dim, manifest["vocab_size"], seed=manifest["seed"])
    enc_arrays = {k.removeprefix("encoder."): v for k, v in arrays.items() if k.startswith("encoder.")}
    head_arrays = {k.removeprefix("head."): v for k, v in arrays.items() if k.startswith("head.")}
    load_params_into(encoder.params, enc_arrays)
    load_params_into(head.params, head_arrays)
    return manifest, encoder, head


# ---------------------------------------------------------------------------
# probe training on frozen embeddings


def extract_tap_embeddings(
    encoder: Encoder, utterances: list[Utterance], tap: int, feat_cfg: FeatureConfig, batch: int = 32
) -> np.ndarray:
    """Frozen-encoder tap outputs, stacked (n_utts, frames, model_dim)."""
    feats = np.stack([log_mel(u.waveform, feat_cfg) for u in utterances]).astype(np.float32)
    chunks = []
    for lo in range(0, len(feats), batch):
        _, taps = encoder.forward(Tensor(feats[lo : lo + batch]), taps={tap})
        chunks.append(taps[tap].data)
    return np.concatenate(chunks, axis=0)


@dataclass
class ProbeResult:
    accuracy: float
    per_class: dict[int, float]
    n_train: int
    n_test: int
    tap: int


def train_probe(
    ckpt_path: str | Path,
    tap: int,
    corpus: Corpus,
    cfg: ProbeConfig,
    feat_cfg: FeatureConfig,
) -> ProbeResult:
    """Train a fresh speaker classifier on frozen tap embeddings.

    The encoder receives no gradient (its parameters are not in the
    optimizer and the probe input is a constant tensor). Returns unweighted
    (macro-averaged) accuracy on the held-out probe split.
    """
    from .evaluation import speaker_accuracy  # local import avoids a cycle

    manifest, encoder, _head = load_stage1_checkpoint(ckpt_path)
    if tap > encoder.cfg.n_blocks:
        raise ValueError(f"tap {tap} not available in checkpoint architecture ({encoder.cfg.n_blocks} blocks)")

    probe_train, probe_test = split_corpus(corpus, cfg.fraction, cfg.seed, from_split=cfg.split)
    emb_train = extract_tap_embeddings(encoder, probe_train, tap, feat_cfg)
    emb_test = extract_tap_embeddings(encoder, probe_test, tap, feat_cfg)
    y_train = np.array([u.speaker_id for u in probe_train], dtype=np.int64)
    y_test = np.array([u.speaker_id for u in probe_test], dtype=np.int64)

    n_speakers = len(corpus.speakers)
    probe = SpeakerClassifier(encoder.cfg.model_dim, n_speakers, seed=cfg.seed)
    opt = Adam(probe.params, cfg.lr, clip=5.0)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x9B0BE]))

    for _step in range(cfg.steps):
        idx = rng.integers(0, len(y_train), size=cfg.batch_size)
        with Tape():
            logits = probe.forward(Tensor(emb_train[idx]))
            loss = ops.mean_over_axis(cross_entropy_batch(logits, y_train[idx]), axis=0)
            grads = backward(loss)
        opt.step({name: grads.get(p) for name, p in probe.params.items()})

    preds = np.argmax(probe.forward(Tensor(emb_test)).data, axis=1)
    acc, per_class = speaker_accuracy(preds, y_test, return_per_class=True)
    return ProbeResult(acc, per_class, len(y_train), len(y_test), tap)


# ---------------------------------------------------------------------------
# synthesis GAN


@dataclass
class SynthResult:
    generator: SynthGenerator
    ensemble: DiscriminatorEnsemble
    gen_loss: list[float]
    dis_loss: list[float]
    holdout_mel: list[tuple[int, float]]  # (step, held-out mel L1)


def train_synth(
    ckpt_path: str | Path,
    tap: int,
    corpus: Corpus,
    cfg: SynthTrainConfig,
    feat_cfg: FeatureConfig,
) -> SynthResult:
    """Alternating generator/discriminator training on frozen tap embeddings.

    The discriminator sees detached generator output; the generator step
    combines least-squares adversarial, feature-matching, and mel terms.
    Held-out mel L1 is recorded every ``eval_interval`` steps.
    """
    manifest, encoder, _head = load_stage1_checkpoint(ckpt_path)
    if tap > encoder.cfg.n_blocks:
        raise ValueError(f"tap {tap} not available in checkpoint architecture")

    pool = corpus.split_utterances("train")
    if cfg.n_utterances + cfg.holdout > len(pool):
        raise ValueError(
            f"requested {cfg.n_utterances}+{cfg.holdout} utterances, split has {len(pool)}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5F17]))
    order = rng.permutation(len(pool))
    train_utts = [pool[i] for i in order[: cfg.n_utterances]]
    hold_utts = [pool[i] for i in order[cfg.n_utterances : cfg.n_utterances + cfg.holdout]]

    emb_train = extract_tap_embeddings(encoder, train_utts, tap, feat_cfg)
    emb_hold = extract_tap_embeddings(encoder, hold_utts, tap, feat_cfg)
    wav_train = np.stack([u.waveform for u in train_utts])
    wav_hold = np.stack([u.waveform for u in hold_utts])

    expect = SynthGenerator.output_len(emb_train.shape[1])
    if expect != wav_train.shape[1]:
        raise ValueError(
            f"upsampling mismatch: generator yields {expect} samples for "
            f"{emb_train.shape[1]} frames, corpus utterances have {wav_train.shape[1]}"
        )

    gen = SynthGenerator(encoder.cfg.model_dim, seed=cfg.seed)
    ens = DiscriminatorEnsemble(seed=cfg.seed)
    opt_g = Adam(gen.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip)
    opt_d = Adam(ens.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip)

    def holdout_mel() -> float:
        fake = gen.forward(Tensor(emb_hold))
        return mel_l1(Tensor(wav_hold), fake, cfg.losses.features).item()

    gen_losses_trace: list[float] = []
    dis_losses_trace: list[float] = []
    holdout: list[tuple[int, float]] = []
    guard_ref: Optional[float] = None
    zero = Tensor(0.0)

    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(train_utts), size=cfg.batch_size)
        emb = Tensor(emb_train[idx])
        real = Tensor(wav_train[idx])

        # discriminator step: generator detached
        fake_const = Tensor(gen.forward(emb).data)
        with Tape():
            d_real = ens.forward(real)
            d_fake = ens.forward(fake_const)
            _, l_dis = gan_losses(
                [j for j, _ in d_real], [j for j, _ in d_fake], zero, zero, cfg.losses
            )
            grads_d = backward(l_dis)
        opt_d.step({name: grads_d.get(p) for name, p in ens.params.items()})

        # generator step: discriminator features of real audio are constants
        real_out = ens.forward(real)
        with Tape():
            fake = gen.forward(emb)
            fake_out = ens.forward(fake)
            l_fm = feature_matching(
                [Tensor(f.data) for _, fs in real_out for f in fs],
                [f for _, fs in fake_out for f in fs],
            )
            l_mel = mel_l1(real, fake, cfg.losses.features)
            l_gen, _ = gan_losses(
                [Tensor(j.data) for j, _ in real_out], [j for j, _ in fake_out], l_fm, l_mel, cfg.losses
            )
            grads_g = backward(l_gen)
        opt_g.step({name: grads_g.get(p) for name, p in gen.params.items()})

        g_val, d_val = l_gen.item(), l_dis.item()
        gen_losses_trace.append(g_val)
        dis_losses_trace.append(d_val)
        if not np.isfinite(g_val):
            raise DivergenceError(step, g_val, guard_ref or 0.0)
        if step == cfg.guard_warmup:
            guard_ref = g_val
        elif guard_ref is not None and g_val > cfg.guard_factor * guard_ref:
            raise DivergenceError(step, g_val, guard_ref)
        if step % cfg.eval_interval == 0 or step == 1:
            holdout.append((step, holdout_mel()))

    return SynthResult(gen, ens, gen_losses_trace, dis_losses_trace, holdout)
