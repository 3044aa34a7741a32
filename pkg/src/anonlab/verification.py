"""Independent oracles and gradient-check suites.

Everything here recomputes a quantity by a route independent of the
implementation it checks: CTC by exhaustive alignment enumeration, engine
gradients by central finite differences, the adversarial composition by two
separate backward passes combined manually. The ``grad-check`` CLI
subcommand and the acceptance tests both run these.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tape, Tensor, backward, ops, precision, finite_difference_check
from .losses import combined_loss, cross_entropy_batch, ctc_loss, ctc_loss_batch, finite_mean


# ---------------------------------------------------------------------------
# CTC enumeration oracle


def collapse_alignment(path: tuple[int, ...], blank: int) -> tuple[int, ...]:
    """CTC collapse: merge repeats, then drop blanks."""
    out = []
    prev = None
    for sym in path:
        if sym != prev:
            if sym != blank:
                out.append(sym)
        prev = sym
    return tuple(out)


def ctc_loss_by_enumeration(log_probs: np.ndarray, labels) -> float:
    """-log P(labels) by summing every alignment of length T explicitly.

    Exponential in T; only usable for tiny instances, which is the point:
    it shares no code with the dynamic-programming implementation.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    t_len, n_cls = log_probs.shape
    blank = n_cls - 1
    target = tuple(int(x) for x in labels)
    total = -np.inf
    for path in itertools.product(range(n_cls), repeat=t_len):
        if collapse_alignment(path, blank) == target:
            lp = sum(log_probs[t, sym] for t, sym in enumerate(path))
            total = np.logaddexp(total, lp)
    return float(-total)


def check_ctc_against_enumeration(
    max_frames: int = 6, max_vocab: int = 3, max_label_len: int = 3, seed: int = 0
) -> float:
    """Worst |DP - enumeration| in log space over all instance sizes."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    with precision("float64"):
        for t_len in range(1, max_frames + 1):
            for vocab in range(1, max_vocab + 1):
                n_cls = vocab + 1
                for lab_len in range(0, max_label_len + 1):
                    for labels in itertools.product(range(vocab), repeat=lab_len):
                        raw = rng.normal(size=(t_len, n_cls))
                        lp = raw - np.log(np.exp(raw).sum(axis=1, keepdims=True))
                        got = ctc_loss(Tensor(lp), list(labels)).item()
                        want = ctc_loss_by_enumeration(lp, labels)
                        if np.isinf(want) and np.isinf(got):
                            continue
                        worst = max(worst, abs(got - want))
    return worst


# ---------------------------------------------------------------------------
# finite-difference sweep over the primitive catalog


def _rand(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _rand_pos(rng, *shape):
    return Tensor(rng.uniform(0.3, 1.5, size=shape), requires_grad=True)


def _rand_off_zero(rng, *shape):
    # keeps coordinates away from kinks of relu/abs so FD stays valid
    mag = rng.uniform(0.2, 1.0, size=shape)
    return Tensor(mag * np.where(rng.random(shape) < 0.5, -1.0, 1.0), requires_grad=True)


def _scalar(x: Tensor) -> Tensor:
    return ops.sum_over_axis(ops.reshape(x, (-1,)))


def _case_builders() -> dict[str, Callable]:
    """One random test-case builder per catalog primitive.

    Each builder returns (f, inputs[, fd_f]); f maps the inputs to a scalar.
    """

    def elementwise(op):
        def build(rng):
            a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
            return (lambda x, y: _scalar(op(x, y))), [a, b]

        return build

    def unary(op, maker=_rand):
        def build(rng):
            x = maker(rng, 2, 5)
            return (lambda a: _scalar(op(a))), [x]

        return build

    def build_div(rng):
        a, b = _rand(rng, 3, 4), _rand_pos(rng, 3, 4)
        return (lambda x, y: _scalar(ops.div(x, y))), [a, b]

    def build_matmul(rng):
        a, b = _rand(rng, 2, 3, 4), _rand(rng, 4, 2)
        return (lambda x, y: _scalar(ops.matmul(x, y))), [a, b]

    def build_grad_reverse(rng):
        alpha = float(rng.uniform(0.1, 2.0))
        x = _rand(rng, 6)
        w = Tensor(rng.normal(size=6))
        f = lambda a: _scalar(ops.grad_reverse(a, alpha) * w)
        fd_f = lambda a: _scalar(a * w) * (-alpha)  # the gradient the reversal defines
        return f, [x], fd_f

    def build_expand(rng):
        x = _rand(rng, 1, 4)
        w = Tensor(rng.normal(size=(3, 4)))
        return (lambda a: _scalar(ops.expand(a, (3, 4)) * w)), [x]

    def build_reshape(rng):
        x = _rand(rng, 2, 6)
        w = Tensor(rng.normal(size=(3, 4)))
        return (lambda a: _scalar(ops.reshape(a, (3, 4)) * w)), [x]

    def build_transpose(rng):
        x = _rand(rng, 2, 3, 4)
        w = Tensor(rng.normal(size=(4, 2, 3)))
        return (lambda a: _scalar(ops.transpose(a, (2, 0, 1)) * w)), [x]

    def build_concat(rng):
        a, b = _rand(rng, 2, 3), _rand(rng, 2, 2)
        w = Tensor(rng.normal(size=(2, 5)))
        return (lambda x, y: _scalar(ops.concat([x, y], axis=1) * w)), [a, b]

    def build_slice(rng):
        x = _rand(rng, 3, 8)
        w = Tensor(rng.normal(size=(3, 3)))
        return (lambda a: _scalar(ops.slice_axis(a, 1, 1, 7, 2) * w)), [x]

    def reduction(op):
        def build(rng):
            x = _rand(rng, 3, 5)
            w = Tensor(rng.normal(size=3))
            return (lambda a: _scalar(op(a, axis=1) * w)), [x]

        return build

    def build_sum_all(rng):
        x = _rand(rng, 3, 5)
        return (lambda a: ops.sum_over_axis(a) * 0.5), [x]

    def build_layer_norm(rng):
        x = _rand(rng, 2, 3, 6)
        w = Tensor(rng.normal(size=(2, 3, 6)))
        if rng.random() < 0.5:  # plain normalization
            return (lambda a: _scalar(ops.layer_norm(a, eps=1e-5) * w)), [x]
        g_, b_ = _rand(rng, 6), _rand(rng, 6)
        return (lambda a, gg, bb: _scalar(ops.layer_norm(a, gg, bb, eps=1e-5) * w)), [x, g_, b_]

    def build_bias_add(rng):
        x, b = _rand(rng, 2, 3, 4), _rand(rng, 4)
        w = Tensor(rng.normal(size=(2, 3, 4)))
        return (lambda a, bb: _scalar(ops.bias_add(a, bb) * w)), [x, b]

    def build_softmax_log(rng):
        x = _rand(rng, 3, 5)
        w = Tensor(rng.normal(size=(3, 5)))
        return (lambda a: _scalar(ops.softmax_log(a) * w)), [x]

    def build_embedding(rng):
        table = _rand(rng, 5, 3)
        ids = rng.integers(0, 5, size=(2, 4))
        w = Tensor(rng.normal(size=(2, 4, 3)))
        return (lambda t: _scalar(ops.embedding_lookup(t, ids) * w)), [table]

    def build_take_index(rng):
        x = _rand(rng, 4, 6)
        ids = rng.integers(0, 6, size=4)
        w = Tensor(rng.normal(size=4))
        return (lambda a: _scalar(ops.take_index(a, ids) * w)), [x]

    def build_attention(rng):
        q, k, v = (_rand(rng, 2, 4, 3) for _ in range(3))
        w = Tensor(rng.normal(size=(2, 4, 3)))
        return (lambda a, b, c: _scalar(ops.scaled_dot_attention(a, b, c) * w)), [q, k, v]

    def build_conv1d(rng):
        x = _rand(rng, 2, 8, 3)
        w = _rand(rng, 4, 3, 3)
        ww = Tensor(rng.normal(size=(2, 4, 4)))
        return (lambda a, b: _scalar(ops.conv1d(a, b, stride=2, pad=1) * ww)), [x, w]

    def build_depthwise(rng):
        x = _rand(rng, 2, 7, 3)
        w = _rand(rng, 3, 3)
        ww = Tensor(rng.normal(size=(2, 7, 3)))
        return (lambda a, b: _scalar(ops.depthwise_conv1d(a, b, pad=1) * ww)), [x, w]

    def build_transpose_conv(rng):
        x = _rand(rng, 2, 4, 3)
        w = _rand(rng, 3, 2, 4)
        if rng.random() < 0.5:  # strided scatter path
            stride, pad, t_out = 2, 1, 8
        else:  # vectorized stride-1 path
            stride, pad, t_out = 1, 1, 5
        ww = Tensor(rng.normal(size=(2, t_out, 2)))
        return (
            lambda a, b: _scalar(ops.transpose_conv1d(a, b, stride=stride, pad=pad) * ww)
        ), [x, w]

    def build_avg_pool(rng):
        x = _rand(rng, 2, 9, 3)
        w = Tensor(rng.normal(size=(2, 4, 3)))
        return (lambda a: _scalar(ops.avg_pool1d(a, kernel=3, stride=2) * w)), [x]

    def build_frame_signal(rng):
        x = _rand(rng, 2, 12)
        w = Tensor(rng.normal(size=(2, 3, 4)))
        return (lambda a: _scalar(ops.frame_signal(a, 4, 4) * w)), [x]

    def build_ctc(rng):
        t_len, vocab = 5, 2
        raw = rng.normal(size=(2, t_len, vocab + 1))
        x = Tensor(raw, requires_grad=True)
        labels = rng.integers(0, vocab, size=(2, 2))
        from .losses import ctc_loss_batch, finite_mean

        return (lambda a: finite_mean(ctc_loss_batch(a, labels))), [x]

    def build_finite_mean(rng):
        from .losses import finite_mean

        x = _rand(rng, 6)
        return (lambda a: finite_mean(a)), [x]

    return {
        "add": elementwise(ops.add),
        "sub": elementwise(ops.sub),
        "mul": elementwise(ops.mul),
        "div": build_div,
        "matmul": build_matmul,
        "relu": unary(ops.relu, _rand_off_zero),
        "leaky_relu": unary(lambda x: ops.leaky_relu(x, 0.2), _rand_off_zero),
        "sigmoid": unary(ops.sigmoid),
        "swish": unary(ops.swish),
        "tanh": unary(ops.tanh),
        "exp": unary(ops.exp),
        "log": unary(ops.log, _rand_pos),
        "sqrt": unary(ops.sqrt, _rand_pos),
        "square": unary(ops.square),
        "abs": unary(ops.absolute, _rand_off_zero),
        "grad_reverse": build_grad_reverse,
        "expand": build_expand,
        "reshape": build_reshape,
        "transpose": build_transpose,
        "concat": build_concat,
        "slice": build_slice,
        "mean_over_axis": reduction(ops.mean_over_axis),
        "variance_over_axis": reduction(ops.variance_over_axis),
        "sum_over_axis": build_sum_all,
        "layer_norm": build_layer_norm,
        "bias_add": build_bias_add,
        "softmax_log": build_softmax_log,
        "embedding_lookup": build_embedding,
        "take_index": build_take_index,
        "scaled_dot_attention": build_attention,
        "conv1d": build_conv1d,
        "depthwise_conv1d": build_depthwise,
        "transpose_conv1d": build_transpose_conv,
        "avg_pool1d": build_avg_pool,
        "frame_signal": build_frame_signal,
        "ctc_loss": build_ctc,
        "finite_mean": build_finite_mean,
    }


def check_primitive_gradients(cases_per_primitive: int = 100, seed: int = 0) -> dict[str, float]:
    """Worst finite-difference relative error per catalog primitive."""
    builders = _case_builders()
    missing = set(ops.catalog()) - set(builders)
    if missing:
        raise AssertionError(f"no gradient-check case for primitives: {sorted(missing)}")
    report: dict[str, float] = {}
    with precision("float64"):
        for name, build in builders.items():
            rng = np.random.default_rng(np.random.SeedSequence([seed, hash(name) % (2**31)]))
            worst = 0.0
            for _ in range(cases_per_primitive):
                built = build(rng)
                f, inputs = built[0], built[1]
                fd_f = built[2] if len(built) > 2 else None
                worst = max(worst, finite_difference_check(f, inputs, eps=1e-5, fd_f=fd_f))
            report[name] = worst
    return report


# ---------------------------------------------------------------------------
# adversarial composition on the real training graph


def _tiny_stage1(seed: int, alpha: float, n_speakers: int = 4, vocab: int = 3):
    """Small but real encoder + CTC head + reversed speaker branch."""
    from .models import EncoderConfig, Stage1Model

    enc_cfg = EncoderConfig(n_blocks=2, model_dim=16, n_heads=2, conv_kernel=3, n_mels=8)
    model = Stage1Model(enc_cfg, vocab_size=vocab, seed=seed)
    model.attach_speaker_branch(1, alpha, n_speakers)
    return model


def _stage1_losses(model, feats, labels, speakers, bypass_reversal: bool = False):
    if bypass_reversal:
        # oracle path: speaker branch reads the tap directly, no reversal
        enc_out, taps = model.encoder.forward(feats, {model.grl_tap})
        log_probs = model.head.forward(enc_out)
        spk_logits = model.speaker.forward(taps[model.grl_tap])
    else:
        log_probs, spk_logits, _ = model.forward(feats)
    l_y = finite_mean(ctc_loss_batch(log_probs, labels))
    l_d = ops.mean_over_axis(cross_entropy_batch(spk_logits, speakers), axis=0)
    return l_y, l_d


def check_reversal_composition(n_seeds: int = 20, alpha: float = 0.7, lam: float = 0.6) -> float:
    """Dual-backward oracle on the full stage-1 graph.

    The combined backward through the reversal must equal
    g_task - alpha*lam*g_speaker on every parameter upstream of it, where the
    two terms come from separate backward passes of the task and (unreversed)
    speaker losses. The error is the worst absolute deviation over all
    upstream coordinates, relative to the sup-norm of the oracle gradient:
    parameters with exactly-zero analytic gradient (e.g. attention key bias)
    carry only float dust, so elementwise ratios would be noise-over-noise.
    """
    worst = 0.0
    with precision("float64"):
        for seed in range(n_seeds):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0A1]))
            model = _tiny_stage1(seed, alpha)
            feats = Tensor(rng.normal(size=(2, 12, 8)))
            labels = rng.integers(0, 3, size=(2, 2))
            speakers = rng.integers(0, 4, size=2)
            params = model.trainable_params()
            upstream = [n for n, g in model.param_groups().items() if g == "f"]

            with Tape():
                l_y, l_d = _stage1_losses(model, feats, labels, speakers)
                g_comb = backward(combined_loss(l_y, l_d, lam))
            with Tape():
                l_y, _ = _stage1_losses(model, feats, labels, speakers)
                g_task = backward(l_y)
            with Tape():
                _, l_d = _stage1_losses(model, feats, labels, speakers, bypass_reversal=True)
                g_spk = backward(l_d)

            diff = 0.0
            scale = 0.0
            for name in upstream:
                p = params[name]
                want = g_task.wrt(p) - alpha * lam * g_spk.wrt(p)
                diff = max(diff, float(np.abs(g_comb.wrt(p) - want).max(initial=0.0)))
                scale = max(scale, float(np.abs(want).max(initial=0.0)))
            worst = max(worst, diff / max(scale, 1e-300))
    return worst


def check_composite_adversarial_fd(seed: int = 0, alpha: float = 0.4, lam: float = 0.5) -> float:
    """Finite differences on the full combined loss, one parameter per group.

    The FD reference is the surrogate whose true gradient the reversal is
    defined to produce: task - alpha*lam*speaker for parameters upstream of
    or past the reversal, task + lam*speaker for the classifier's own.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFD]))
    worst = 0.0
    with precision("float64"):
        model = _tiny_stage1(seed, alpha)
        feats = Tensor(rng.normal(size=(2, 12, 8)))
        labels = rng.integers(0, 3, size=(2, 2))
        speakers = rng.integers(0, 4, size=2)
        params = model.trainable_params()

        def composite(*_probe):
            l_y, l_d = _stage1_losses(model, feats, labels, speakers)
            return combined_loss(l_y, l_d, lam)

        def surrogate_encoder(*_probe):
            l_y, l_d = _stage1_losses(model, feats, labels, speakers, bypass_reversal=True)
            return l_y + l_d * (-alpha * lam)

        def surrogate_classifier(*_probe):
            l_y, l_d = _stage1_losses(model, feats, labels, speakers)
            return combined_loss(l_y, l_d, lam)  # reversal does not affect theta_d

        probes = {
            "encoder.frontend.b": surrogate_encoder,  # theta_f
            "encoder.block2.conv.dw": surrogate_encoder,  # theta_m
            "head.head.b": surrogate_encoder,  # theta_y (speaker term constant)
            "speaker.out.b": surrogate_classifier,  # theta_d
        }
        for name, fd_f in probes.items():
            err = finite_difference_check(composite, [params[name]], eps=1e-6, fd_f=fd_f)
            worst = max(worst, err)
    return worst


def check_reversal_forward_identity(n_cases: int = 50, seed: int = 0) -> bool:
    """Forward of grad_reverse must be bitwise equal to its input."""
    rng = np.random.default_rng(seed)
    for _ in range(n_cases):
        x = Tensor(rng.normal(size=rng.integers(1, 6, size=rng.integers(1, 4))).astype(np.float32))
        out = ops.grad_reverse(x, float(rng.uniform(0, 3)))
        if not (out.data is x.data or np.array_equal(out.data, x.data)):
            return False
    return True


# ---------------------------------------------------------------------------
# aggregate runner (grad-check subcommand and acceptance suite)


@dataclass
class CheckLine:
    name: str
    passed: bool
    detail: str

    def render(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


@dataclass
class CheckReport:
    lines: list[CheckLine]

    @property
    def ok(self) -> bool:
        return all(l.passed for l in self.lines)


def run_all_checks(cases_per_primitive: int = 100) -> CheckReport:
    lines = []

    ident = check_reversal_forward_identity()
    lines.append(CheckLine("reversal forward identity", ident, "bitwise over 50 random tensors"))

    rep = check_primitive_gradients(cases_per_primitive=cases_per_primitive)
    worst_prim = max(rep.values())
    bad = sorted(k for k, v in rep.items() if v >= 1e-6)
    lines.append(
        CheckLine(
            "primitive finite differences",
            not bad,
            f"worst rel err {worst_prim:.3e} over {cases_per_primitive} cases x {len(rep)} primitives"
            + (f"; failing: {bad}" if bad else ""),
        )
    )

    comp = check_composite_adversarial_fd()
    lines.append(CheckLine("combined-loss finite differences", comp < 1e-6, f"worst rel err {comp:.3e}"))

    dual = check_reversal_composition()
    lines.append(
        CheckLine("reversal composition vs dual backward", dual < 1e-10, f"worst rel err {dual:.3e} over 20 seeds")
    )

    ctc = check_ctc_against_enumeration()
    lines.append(
        CheckLine("ctc vs exhaustive enumeration", ctc < 1e-10, f"worst abs log-space diff {ctc:.3e}")
    )
    return CheckReport(lines)
