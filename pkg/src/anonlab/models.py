"""Model zoo: conformer-lite encoder with tap points, CTC head, statistics-
pooling speaker classifier, embedding-to-waveform generator, and a two-member
discriminator ensemble (multi-scale + multi-period).

All models hold their parameters in a flat ``params`` dict of named tensors;
forward passes are pure functions of (params, inputs) and run identically
with or without an active tape.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, ops

CKPT_MAGIC = b"ANONCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file or architecture mismatch."""


@dataclass(frozen=True)
class EncoderConfig:
    n_blocks: int = 6
    model_dim: int = 64
    n_heads: int = 2
    conv_kernel: int = 7
    ff_mult: int = 2
    n_mels: int = 40
    subsample_kernel: int = 4  # stride-2 frontend: output frames = floor(T/2)

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.n_heads}")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd for same-length depthwise conv")

    def to_dict(self) -> dict:
        return {
            "n_blocks": self.n_blocks,
            "model_dim": self.model_dim,
            "n_heads": self.n_heads,
            "conv_kernel": self.conv_kernel,
            "ff_mult": self.ff_mult,
            "n_mels": self.n_mels,
            "subsample_kernel": self.subsample_kernel,
        }


# ---------------------------------------------------------------------------
# parameter helpers


def _glorot(rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))


def _dense_params(params: dict, name: str, rng, fan_in: int, fan_out: int) -> None:
    params[f"{name}.w"] = Tensor(_glorot(rng, fan_in, fan_out), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def _ln_params(params: dict, name: str, dim: int) -> None:
    params[f"{name}.g"] = Tensor(np.ones(dim), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(dim), requires_grad=True)


def _add_bias(x: Tensor, b: Tensor) -> Tensor:
    return ops.bias_add(x, b)


def _dense(x: Tensor, params: dict, name: str) -> Tensor:
    return ops.bias_add(ops.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def _affine_ln(x: Tensor, params: dict, name: str) -> Tensor:
    return ops.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def _positional_table(n_frames: int, dim: int) -> np.ndarray:
    pos = np.arange(n_frames)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((n_frames, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


# ---------------------------------------------------------------------------
# encoder


class Encoder:
    """Strided-conv frontend (x2 time reduction) + conformer-lite blocks.

    Block layout: half-weighted feedforward, self-attention, depthwise
    convolution, half-weighted feedforward, each pre-normed with a residual,
    then a final layer norm whose output is the block's tap value.
    """

    def __init__(self, cfg: EncoderConfig, seed: int):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([seed, 10]))
        p: dict[str, Tensor] = {}
        d = cfg.model_dim
        p["frontend.w"] = Tensor(
            _glorot(rng, cfg.n_mels * cfg.subsample_kernel, d, (d, cfg.n_mels, cfg.subsample_kernel)),
            requires_grad=True,
        )
        p["frontend.b"] = Tensor(np.zeros(d), requires_grad=True)
        for i in range(1, cfg.n_blocks + 1):
            blk = f"block{i}"
            for ff in ("ff1", "ff2"):
                _ln_params(p, f"{blk}.ln_{ff}", d)
                _dense_params(p, f"{blk}.{ff}.in", rng, d, cfg.ff_mult * d)
                _dense_params(p, f"{blk}.{ff}.out", rng, cfg.ff_mult * d, d)
            _ln_params(p, f"{blk}.ln_attn", d)
            for proj in ("q", "k", "v", "o"):
                _dense_params(p, f"{blk}.attn.{proj}", rng, d, d)
            _ln_params(p, f"{blk}.ln_conv", d)
            p[f"{blk}.conv.dw"] = Tensor(
                rng.normal(0.0, 1.0 / np.sqrt(cfg.conv_kernel), (d, cfg.conv_kernel)),
                requires_grad=True,
            )
            _dense_params(p, f"{blk}.conv.pw", rng, d, d)
            _ln_params(p, f"{blk}.ln_out", d)
        self.params = p
        self._pos_cache: dict[int, np.ndarray] = {}

    def _positional(self, n_frames: int) -> np.ndarray:
        if n_frames not in self._pos_cache:
            self._pos_cache[n_frames] = _positional_table(n_frames, self.cfg.model_dim)
        return self._pos_cache[n_frames]

    def _attention(self, x: Tensor, blk: str) -> Tensor:
        cfg = self.cfg
        b, t, d = x.shape
        dh = d // cfg.n_heads

        def heads(t_in: Tensor) -> Tensor:
            return ops.transpose(ops.reshape(t_in, (b, t, cfg.n_heads, dh)), (0, 2, 1, 3))

        q = heads(_dense(x, self.params, f"{blk}.attn.q"))
        k = heads(_dense(x, self.params, f"{blk}.attn.k"))
        v = heads(_dense(x, self.params, f"{blk}.attn.v"))
        att = ops.scaled_dot_attention(q, k, v)
        merged = ops.reshape(ops.transpose(att, (0, 2, 1, 3)), (b, t, d))
        return _dense(merged, self.params, f"{blk}.attn.o")

    def _ff(self, x: Tensor, blk: str, which: str) -> Tensor:
        h = ops.swish(_dense(x, self.params, f"{blk}.{which}.in"))
        return _dense(h, self.params, f"{blk}.{which}.out")

    def _conv(self, x: Tensor, blk: str) -> Tensor:
        pad = self.cfg.conv_kernel // 2
        h = ops.depthwise_conv1d(x, self.params[f"{blk}.conv.dw"], pad=pad)
        return _dense(ops.swish(h), self.params, f"{blk}.conv.pw")

    def forward(self, features: Tensor, taps=()) -> tuple[Tensor, dict[int, Tensor]]:
        """Run the encoder; returns (final output, tap index -> block output)."""
        cfg = self.cfg
        taps = frozenset(taps)
        bad = [i for i in taps if not 1 <= i <= cfg.n_blocks]
        if bad:
            raise ValueError(f"tap index {bad} out of range [1, {cfg.n_blocks}]")
        if features.ndim != 3 or features.shape[2] != cfg.n_mels:
            raise ValueError(f"expected features (B, T, {cfg.n_mels}), got {features.shape}")

        x = ops.conv1d(features, self.params["frontend.w"], stride=2, pad=1)
        x = ops.swish(_add_bias(x, self.params["frontend.b"]))
        pos = Tensor(self._positional(x.shape[1]))
        x = x + ops.expand(pos, x.shape)

        tap_outputs: dict[int, Tensor] = {}
        for i in range(1, cfg.n_blocks + 1):
            blk = f"block{i}"
            x = x + self._ff(_affine_ln(x, self.params, f"{blk}.ln_ff1"), blk, "ff1") * 0.5
            x = x + self._attention(_affine_ln(x, self.params, f"{blk}.ln_attn"), blk)
            x = x + self._conv(_affine_ln(x, self.params, f"{blk}.ln_conv"), blk)
            x = x + self._ff(_affine_ln(x, self.params, f"{blk}.ln_ff2"), blk, "ff2") * 0.5
            x = _affine_ln(x, self.params, f"{blk}.ln_out")
            if i in taps:
                tap_outputs[i] = x
        return x, tap_outputs

    def partition(self, tap: int) -> dict[str, str]:
        """Map each encoder parameter to its group given a reversal at ``tap``:
        'f' (frontend + blocks 1..tap) or 'm' (blocks tap+1..n)."""
        if not 1 <= tap <= self.cfg.n_blocks:
            raise ValueError(f"tap {tap} out of range [1, {self.cfg.n_blocks}]")
        groups = {}
        for name in self.params:
            if name.startswith("frontend."):
                groups[name] = "f"
            else:
                block = int(name.split(".")[0].removeprefix("block"))
                groups[name] = "f" if block <= tap else "m"
        return groups


class CtcHead:
    """Linear projection to |V|+1 classes (blank last) + log-softmax."""

    def __init__(self, model_dim: int, vocab_size: int, seed: int):
        self.vocab_size = vocab_size
        rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
        self.params: dict[str, Tensor] = {}
        _dense_params(self.params, "head", rng, model_dim, vocab_size + 1)

    def forward(self, encoder_out: Tensor) -> Tensor:
        return ops.softmax_log(_dense(encoder_out, self.params, "head"))


class SpeakerClassifier:
    """Per-frame dense layers, mean+std statistics pooling, dense classifier."""

    def __init__(self, input_dim: int, n_speakers: int, seed: int, hidden: int = 96):
        self.n_speakers = n_speakers
        rng = np.random.default_rng(np.random.SeedSequence([seed, 12]))
        p: dict[str, Tensor] = {}
        _dense_params(p, "frame1", rng, input_dim, hidden)
        _dense_params(p, "frame2", rng, hidden, hidden)
        _dense_params(p, "seg", rng, 2 * hidden, hidden)
        _dense_params(p, "out", rng, hidden, n_speakers)
        self.params = p

    def pool(self, frames: Tensor) -> Tensor:
        """Statistics pooling: concat(mean, std) over the frame axis."""
        mean = ops.mean_over_axis(frames, axis=1)
        std = ops.sqrt(ops.variance_over_axis(frames, axis=1))
        return ops.concat([mean, std], axis=1)

    def forward(self, embedding: Tensor) -> Tensor:
        """(B, frames, dim) -> (B, n_speakers); also accepts one (frames, dim)."""
        single = embedding.ndim == 2
        if single:
            embedding = ops.reshape(embedding, (1,) + embedding.shape)
        if embedding.ndim != 3:
            raise ValueError(f"expected (B, frames, dim), got {embedding.shape}")
        if embedding.shape[1] < 2:
            raise ValueError("speaker classifier needs >= 2 frames (std undefined)")
        h = ops.relu(_dense(embedding, self.params, "frame1"))
        h = ops.relu(_dense(h, self.params, "frame2"))
        pooled = self.pool(h)
        h = ops.relu(_dense(pooled, self.params, "seg"))
        logits = _dense(h, self.params, "out")
        return ops.reshape(logits, (self.n_speakers,)) if single else logits


# ---------------------------------------------------------------------------
# synthesis generator and discriminators


class SynthGenerator:
    """Transpose-conv upsampling stack: tap embeddings -> waveform.

    The last frame is replicated once, then strides (5, 5, 4, 2) with
    kernel 3s / pad s per layer give an exact x200 resampling, so output
    length is upsample * (frames + 1). That matches the default corpus
    geometry: frames = 4*n_tokens - 1 maps to 800*n_tokens samples.
    """

    CHANNELS = (64, 48, 32, 16, 8)
    STRIDES = (5, 5, 4, 2)
    SMOOTH_KERNEL = 7

    def __init__(self, model_dim: int, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
        p: dict[str, Tensor] = {}
        _dense_params(p, "pre", rng, model_dim, self.CHANNELS[0])
        for li, stride in enumerate(self.STRIDES):
            cin, cout = self.CHANNELS[li], self.CHANNELS[li + 1]
            k = 3 * stride
            p[f"up{li}.w"] = Tensor(
                rng.normal(0.0, np.sqrt(2.0 / (cin * k)), (cin, cout, k)), requires_grad=True
            )
            p[f"up{li}.b"] = Tensor(np.zeros(cout), requires_grad=True)
        k = self.SMOOTH_KERNEL
        p["smooth.w"] = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / (self.CHANNELS[-1] * k)), (1, self.CHANNELS[-1], k)),
            requires_grad=True,
        )
        p["smooth.b"] = Tensor(np.zeros(1), requires_grad=True)
        self.params = p

    @classmethod
    def upsample_factor(cls) -> int:
        return int(np.prod(cls.STRIDES))

    @classmethod
    def output_len(cls, n_frames: int) -> int:
        return cls.upsample_factor() * (n_frames + 1)

    def forward(self, embedding: Tensor) -> Tensor:
        """(B, frames, model_dim) -> (B, samples) in (-1, 1)."""
        if embedding.ndim != 3:
            raise ValueError(f"expected (B, frames, dim), got {embedding.shape}")
        x = _dense(embedding, self.params, "pre")
        last = ops.slice_axis(x, 1, x.shape[1] - 1, x.shape[1])
        x = ops.concat([x, last], axis=1)
        for li, stride in enumerate(self.STRIDES):
            w = self.params[f"up{li}.w"]
            x = ops.transpose_conv1d(x, w, stride=stride, pad=stride)
            x = ops.leaky_relu(_add_bias(x, self.params[f"up{li}.b"]), 0.1)
        x = ops.conv1d(x, self.params["smooth.w"], stride=1, pad=self.SMOOTH_KERNEL // 2)
        x = ops.tanh(_add_bias(x, self.params["smooth.b"]))
        return ops.reshape(x, (x.shape[0], x.shape[1]))


class _ConvStack:
    """Shared conv tower for discriminator members."""

    def __init__(self, prefix: str, rng, in_channels: int):
        spec = [
            (in_channels, 16, 15, 2),
            (16, 32, 15, 2),
            (32, 32, 5, 1),
        ]
        self.spec = spec
        p: dict[str, Tensor] = {}
        for li, (cin, cout, k, _s) in enumerate(spec):
            p[f"{prefix}.conv{li}.w"] = Tensor(
                rng.normal(0.0, np.sqrt(2.0 / (cin * k)), (cout, cin, k)), requires_grad=True
            )
            p[f"{prefix}.conv{li}.b"] = Tensor(np.zeros(cout), requires_grad=True)
        p[f"{prefix}.judge.w"] = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / (32 * 3)), (1, 32, 3)), requires_grad=True
        )
        p[f"{prefix}.judge.b"] = Tensor(np.zeros(1), requires_grad=True)
        self.prefix = prefix
        self.params = p

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        feats = []
        for li, (_cin, _cout, k, s) in enumerate(self.spec):
            w = self.params[f"{self.prefix}.conv{li}.w"]
            x = ops.conv1d(x, w, stride=s, pad=k // 2)
            x = ops.leaky_relu(_add_bias(x, self.params[f"{self.prefix}.conv{li}.b"]), 0.1)
            feats.append(x)
        judge = ops.conv1d(x, self.params[f"{self.prefix}.judge.w"], stride=1, pad=1)
        judge = _add_bias(judge, self.params[f"{self.prefix}.judge.b"])
        feats.append(judge)
        return judge, feats


class DiscriminatorEnsemble:
    """Two sub-discriminators: one multi-scale (avg-pooled input) and one
    multi-period (strided reshape); each returns per-window judgments plus
    its intermediate feature maps ordered frontend to head."""

    def __init__(self, seed: int, period: int = 2):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 14]))
        self.period = period
        self.scale_stack = _ConvStack("scale", rng, in_channels=1)
        self.period_stack = _ConvStack("period", rng, in_channels=period)
        self.params = {**self.scale_stack.params, **self.period_stack.params}

    @property
    def n_members(self) -> int:
        return 2

    def forward(self, waveform: Tensor) -> list[tuple[Tensor, list[Tensor]]]:
        if waveform.ndim != 2:
            raise ValueError(f"expected (B, samples), got {waveform.shape}")
        b, n = waveform.shape

        pooled = ops.avg_pool1d(ops.reshape(waveform, (b, n, 1)), kernel=4, stride=2)
        scale_out = self.scale_stack.forward(pooled)

        rem = (-n) % self.period
        w = waveform
        if rem:
            w = ops.concat([w, Tensor(np.zeros((b, rem), dtype=waveform.data.dtype))], axis=1)
        framed = ops.reshape(w, (b, (n + rem) // self.period, self.period))
        period_out = self.period_stack.forward(framed)
        return [scale_out, period_out]


# ---------------------------------------------------------------------------
# stage-1 training graph


class Stage1Model:
    """Encoder + CTC head, optionally with one gradient-reversed speaker branch.

    The speaker branch reads the tap output through grad_reverse, so the
    task path is numerically untouched by its presence.
    """

    def __init__(self, enc_cfg: EncoderConfig, vocab_size: int, seed: int):
        self.encoder = Encoder(enc_cfg, seed)
        self.head = CtcHead(enc_cfg.model_dim, vocab_size, seed)
        self.seed = seed
        self.grl_tap: int | None = None
        self.grl_alpha: float = 0.0
        self.speaker: SpeakerClassifier | None = None

    def attach_speaker_branch(self, tap: int, alpha: float, n_speakers: int) -> "Stage1Model":
        if self.speaker is not None:
            raise ValueError("a speaker branch is already attached; only one reversal per model")
        if not 1 <= tap <= self.encoder.cfg.n_blocks:
            raise ValueError(f"tap {tap} out of range [1, {self.encoder.cfg.n_blocks}]")
        if not (np.isfinite(alpha) and alpha >= 0):
            raise ValueError(f"alpha must be finite and >= 0, got {alpha}")
        self.grl_tap = tap
        self.grl_alpha = float(alpha)
        self.speaker = SpeakerClassifier(self.encoder.cfg.model_dim, n_speakers, self.seed)
        return self

    def forward(self, features: Tensor, extra_taps=()) -> tuple[Tensor, Tensor | None, dict[int, Tensor]]:
        """Returns (ctc log-probs, speaker logits or None, tap outputs)."""
        taps = set(extra_taps)
        if self.grl_tap is not None:
            taps.add(self.grl_tap)
        enc_out, tap_outputs = self.encoder.forward(features, taps)
        log_probs = self.head.forward(enc_out)
        spk_logits = None
        if self.speaker is not None:
            reversed_tap = ops.grad_reverse(tap_outputs[self.grl_tap], self.grl_alpha)
            spk_logits = self.speaker.forward(reversed_tap)
        return log_probs, spk_logits, tap_outputs

    def trainable_params(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        out |= {f"head.{k}": v for k, v in self.head.params.items()}
        if self.speaker is not None:
            out |= {f"speaker.{k}": v for k, v in self.speaker.params.items()}
        return out

    def param_groups(self) -> dict[str, str]:
        """Full-name -> group in {f, m, y, d}; f/m split at the reversal tap."""
        tap = self.grl_tap if self.grl_tap is not None else self.encoder.cfg.n_blocks
        enc = self.encoder.partition(tap)
        groups = {f"encoder.{k}": g for k, g in enc.items()}
        groups |= {f"head.{k}": "y" for k in self.head.params}
        if self.speaker is not None:
            groups |= {f"speaker.{k}": "d" for k in self.speaker.params}
        return groups


# ---------------------------------------------------------------------------
# checkpoint format


def save_checkpoint(path: str | Path, manifest: dict, params: dict[str, Tensor]) -> None:
    """Manifest + named little-endian float32 arrays in one versioned file."""
    names = sorted(params)
    header = {
        "format_version": CKPT_VERSION,
        "manifest": manifest,
        "dtype": "<f4",
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(blob_len))
        if header.get("format_version") != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
        arrays: dict[str, np.ndarray] = {}
        for rec in header["params"]:
            shape = tuple(rec["shape"])
            count = int(np.prod(shape)) if shape else 1
            arrays[rec["name"]] = np.fromfile(fh, dtype="<f4", count=count).reshape(shape)
    return header["manifest"], arrays


def load_params_into(model_params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Assign checkpoint arrays onto existing parameter tensors by name."""
    missing = set(model_params) - set(arrays)
    extra = set(arrays) - set(model_params)
    if missing or extra:
        raise CheckpointError(f"parameter name mismatch; missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
    for name, t in model_params.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(t.shape):
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
        t.data = np.asarray(arr, dtype=t.data.dtype)
