"""Training objectives: CTC, speaker cross-entropy, adversarial combination,
and the synthesis losses (mel L1, feature matching, least-squares GAN).

Per-sample losses are inspectable; batch averaging (the 1/K) lives in the
training loop. CTC is a custom tape primitive whose gradient comes from the
forward-backward occupancy posterior; its values are pinned against an
exhaustive alignment-enumeration oracle in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor, ops, register_primitive
from .synthdata import FeatureConfig, log_mel_tensor

NEG_INF = -np.inf


@dataclass(frozen=True)
class AdvLossConfig:
    """Adversarial weighting: loss regularizer and reversal scale."""

    lam: float = 0.5
    alpha: float = 0.5

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lam must be finite and >= 0, got {self.lam}")
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")

    @property
    def speaker_gradient_scale(self) -> float:
        return self.alpha * self.lam


@dataclass(frozen=True)
class SynthLossConfig:
    """Synthesis loss weights; defaults follow common vocoder practice."""

    lambda_fm: float = 2.0
    lambda_mel: float = 45.0
    features: FeatureConfig = field(default_factory=lambda: FeatureConfig(log_floor=1e-5))
    # inverts the least-squares role assignment (generator fits the real/fake
    # separation, discriminator chases fake==real); kept only for experiments,
    # a discriminator trained this way has no real-data term and cannot learn
    swapped_objectives: bool = False

    def __post_init__(self):
        if self.lambda_fm < 0 or self.lambda_mel < 0:
            raise ValueError("loss weights must be >= 0")


# ---------------------------------------------------------------------------
# CTC primitive


def _extend_labels(labels: np.ndarray, blank: int) -> np.ndarray:
    """Interleave blanks: (B, L) -> (B, 2L+1)."""
    b, l = labels.shape
    ext = np.full((b, 2 * l + 1), blank, dtype=np.int64)
    ext[:, 1::2] = labels
    return ext


def _ctc_fwd(ins, attrs):
    (u,) = ins
    labels = np.asarray(attrs["labels"], dtype=np.int64)
    if u.ndim != 3:
        raise ShapeError(f"ctc expects log_probs (B, T, C), got {u.shape}")
    b, t_len, n_cls = u.shape
    if labels.ndim != 2 or labels.shape[0] != b:
        raise ShapeError(f"ctc labels must be (B, L), got {labels.shape}")
    blank = n_cls - 1
    if labels.size and (labels.min() < 0 or labels.max() >= blank):
        raise ShapeError("ctc labels must lie in [0, C-2]; blank is the last class")

    ext = _extend_labels(labels, blank)
    s_len = ext.shape[1]

    # transition masks: standard CTC topology
    can_skip = np.zeros((b, s_len), dtype=bool)
    can_skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])

    emit_ext = np.take_along_axis(
        u, ext[:, None, :].repeat(t_len, axis=1), axis=2
    )  # (B, T, S): log prob of the extended symbol at each time

    alpha = np.full((b, t_len, s_len), NEG_INF)
    alpha[:, 0, 0] = emit_ext[:, 0, 0]
    if s_len > 1:
        alpha[:, 0, 1] = emit_ext[:, 0, 1]

    def logaddexp_many(*xs):
        out = xs[0]
        for x in xs[1:]:
            out = np.logaddexp(out, x)
        return out

    for t in range(1, t_len):
        prev = alpha[:, t - 1]
        stay = prev
        step = np.full_like(prev, NEG_INF)
        step[:, 1:] = prev[:, :-1]
        skip = np.full_like(prev, NEG_INF)
        skip[:, 2:] = np.where(can_skip[:, 2:], prev[:, :-2], NEG_INF)
        alpha[:, t] = emit_ext[:, t] + logaddexp_many(stay, step, skip)

    if s_len > 1:
        log_z = np.logaddexp(alpha[:, -1, -1], alpha[:, -1, -2])
    else:
        log_z = alpha[:, -1, -1]

    beta = np.full((b, t_len, s_len), NEG_INF)
    beta[:, -1, -1] = 0.0
    if s_len > 1:
        beta[:, -1, -2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[:, t + 1] + emit_ext[:, t + 1]
        stay = nxt
        step = np.full_like(nxt, NEG_INF)
        step[:, :-1] = nxt[:, 1:]
        skip = np.full_like(nxt, NEG_INF)
        skip[:, :-2] = np.where(can_skip[:, 2:], nxt[:, 2:], NEG_INF)
        beta[:, t] = logaddexp_many(stay, step, skip)

    loss = -log_z
    stash = (alpha, beta, log_z, ext)
    return loss, stash


def _ctc_bwd(g, ins, out, attrs, stash):
    (u,) = ins
    alpha, beta, log_z, ext = stash
    b, t_len, n_cls = u.shape
    feasible = np.isfinite(log_z)

    with np.errstate(invalid="ignore"):
        occupancy = alpha + beta - log_z[:, None, None]  # log P(path through (t, s))
    occupancy = np.where(np.isfinite(occupancy), occupancy, NEG_INF)
    post = np.exp(occupancy)  # (B, T, S)

    gu = np.zeros_like(u)
    s_len = ext.shape[1]
    for s in range(s_len):
        cls = ext[:, s]  # (B,)
        np.add.at(gu, (np.arange(b)[:, None], np.arange(t_len)[None, :], cls[:, None]), post[:, :, s])
    gu = -gu
    gu[~feasible] = 0.0  # infeasible rows carry +inf loss and zero gradient
    return [gu * g[:, None, None]]


register_primitive("ctc_loss", _ctc_fwd, _ctc_bwd)


def _finite_mean_fwd(ins, attrs):
    (x,) = ins
    if x.ndim != 1:
        raise ShapeError(f"finite_mean expects a vector, got {x.shape}")
    mask = np.isfinite(x)
    n = int(mask.sum())
    out = np.asarray(x[mask].mean() if n else np.inf, dtype=x.dtype)
    return out, (mask, n)


def _finite_mean_bwd(g, ins, out, attrs, stash):
    (x,) = ins
    mask, n = stash
    gx = np.zeros_like(x)
    if n:
        gx[mask] = float(g) / n
    return [gx]


register_primitive("finite_mean", _finite_mean_fwd, _finite_mean_bwd)


def ctc_loss_batch(log_probs: Tensor, labels: np.ndarray) -> Tensor:
    """Per-sample CTC losses, shape (B,); blank is the last class.

    Infeasible rows (too few frames for the label plus required blanks)
    come back as +inf and contribute zero gradient.
    """
    return ops.apply_primitive("ctc_loss", [log_probs], {"labels": np.asarray(labels)})


def ctc_loss(log_probs: Tensor, labels) -> Tensor:
    """CTC loss of a single utterance: log_probs (T, C), labels a token list."""
    if log_probs.ndim != 2:
        raise ShapeError(f"ctc_loss expects (T, C), got {log_probs.shape}")
    t_len, n_cls = log_probs.shape
    batched = ops.reshape(log_probs, (1, t_len, n_cls))
    losses = ctc_loss_batch(batched, np.asarray(labels, dtype=np.int64)[None, :])
    return ops.sum_over_axis(losses)


def finite_mean(x: Tensor) -> Tensor:
    """Mean over finite entries; +inf entries are skipped, not propagated."""
    return ops.apply_primitive("finite_mean", [x])


def count_infeasible(per_sample_losses: Tensor) -> int:
    return int(np.sum(~np.isfinite(per_sample_losses.data)))


# ---------------------------------------------------------------------------
# classification and adversarial combination


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log-softmax at the target class; logits shape (n_classes,)."""
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy expects (n_classes,), got {logits.shape}")
    return ops.take_index(ops.softmax_log(logits), np.asarray(int(label))) * -1.0


def cross_entropy_batch(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-sample cross-entropies: logits (B, n), labels (B,) -> (B,)."""
    return ops.take_index(ops.softmax_log(logits), np.asarray(labels, dtype=np.int64)) * -1.0


def combined_loss(l_task: Tensor, l_speaker: Tensor, lam: float) -> Tensor:
    """Joint objective l_task + lam * l_speaker.

    The adversarial sign never appears here; it is owned entirely by the
    gradient-reversal op on the speaker branch.
    """
    return l_task + l_speaker * float(lam)


# ---------------------------------------------------------------------------
# synthesis losses


def mel_l1(x: Tensor, x_hat: Tensor, cfg: FeatureConfig) -> Tensor:
    """Mean absolute log-mel difference between two equal-length waveforms."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"mel_l1 length mismatch: {x.shape} vs {x_hat.shape}")
    if x.ndim == 1:
        x = ops.reshape(x, (1, -1))
        x_hat = ops.reshape(x_hat, (1, -1))
    ma = log_mel_tensor(x, cfg)
    mb = log_mel_tensor(x_hat, cfg)
    diff = ops.absolute(ma - mb)
    return ops.mean_over_axis(ops.reshape(diff, (-1,)), axis=0)


def feature_matching(real_feats: list[Tensor], fake_feats: list[Tensor]) -> Tensor:
    """Sum over layers of mean |D_i(real) - D_i(fake)|."""
    if len(real_feats) != len(fake_feats):
        raise ShapeError(
            f"feature lists differ in depth: {len(real_feats)} vs {len(fake_feats)}"
        )
    total = None
    for fr, ff in zip(real_feats, fake_feats):
        if fr.shape != ff.shape:
            raise ShapeError(f"feature shape mismatch: {fr.shape} vs {ff.shape}")
        term = ops.mean_over_axis(ops.reshape(ops.absolute(fr - ff), (-1,)), axis=0)
        total = term if total is None else total + term
    if total is None:
        raise ShapeError("feature_matching needs at least one layer")
    return total


def _mean_all(x: Tensor) -> Tensor:
    return ops.mean_over_axis(ops.reshape(x, (-1,)), axis=0)


def gan_losses(
    d_real: list[Tensor],
    d_fake: list[Tensor],
    l_fm: Tensor,
    l_mel: Tensor,
    cfg: SynthLossConfig,
) -> tuple[Tensor, Tensor]:
    """Least-squares adversarial objectives over Q sub-discriminators.

    Returns (generator loss, discriminator loss). The generator loss folds
    in the weighted feature-matching and mel terms.
    """
    if len(d_real) != len(d_fake):
        raise ShapeError(f"judgment lists differ: {len(d_real)} vs {len(d_fake)}")
    if not d_real:
        raise ShapeError("gan_losses needs at least one sub-discriminator")

    gen_adv = None
    dis_adv = None
    for jr, jf in zip(d_real, d_fake):
        real_to_one = _mean_all(ops.square(jr - 1.0))
        fake_to_zero = _mean_all(ops.square(jf))
        fake_to_one = _mean_all(ops.square(jf - 1.0))
        if cfg.swapped_objectives:
            g_term = real_to_one + fake_to_zero
            d_term = fake_to_one
        else:
            g_term = fake_to_one
            d_term = real_to_one + fake_to_zero
        gen_adv = g_term if gen_adv is None else gen_adv + g_term
        dis_adv = d_term if dis_adv is None else dis_adv + d_term

    l_g = gen_adv + l_fm * cfg.lambda_fm + l_mel * cfg.lambda_mel
    return l_g, dis_adv
