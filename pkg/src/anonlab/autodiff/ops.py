"""Primitive catalog: forward/backward rules for every differentiable op.

Each primitive is registered with a forward function
``fwd(inputs, attrs) -> out`` (or ``(out, stash)`` when the backward wants
saved intermediates) and a backward function
``bwd(g, inputs, out, attrs, stash) -> [grad_or_None per input]``.
``apply_primitive`` dispatches by name, validates shapes, and records the
node on the active tape.

Broadcasting is restricted to scalar-with-tensor; anything else must go
through an explicit ``expand``. This keeps every backward rule a direct
transcription of the chain rule.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .engine import CatalogError, ShapeError, Tape, Tensor, as_tensor

_FORWARD: dict[str, Callable] = {}
_BACKWARD: dict[str, Callable] = {}


def register_primitive(name: str, fwd: Callable, bwd: Callable) -> None:
    """Add a primitive to the catalog (used by e.g. the CTC loss)."""
    if name in _FORWARD:
        raise CatalogError(f"primitive {name!r} already registered")
    _FORWARD[name] = fwd
    _BACKWARD[name] = bwd


def catalog() -> list[str]:
    return sorted(_FORWARD)


def run_forward(name: str, inputs: list[np.ndarray], attrs: dict) -> np.ndarray:
    """Pure forward evaluation (used by tape replay); drops any stash."""
    result = _FORWARD[name](inputs, attrs)
    return result[0] if isinstance(result, tuple) else result


def run_backward(name, g, inputs, out, attrs, stash):
    return _BACKWARD[name](g, inputs, out, attrs, stash)


def apply_primitive(name: str, inputs: Sequence, attrs: Optional[dict] = None) -> Tensor:
    """Apply a catalog primitive to tensors, recording on the active tape."""
    if name not in _FORWARD:
        raise CatalogError(f"unknown primitive {name!r}; catalog: {catalog()}")
    attrs = attrs or {}
    tensors = [as_tensor(t) for t in inputs]
    arrays = [t.data for t in tensors]
    result = _FORWARD[name](arrays, attrs)
    out_data, stash = result if isinstance(result, tuple) else (result, None)

    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = any(t.requires_grad for t in tensors)
    out.tape = None
    out.node_id = None

    tape = Tape.active()
    if tape is not None:
        ids = tuple(tape.register_leaf(t) for t in tensors)
        out.node_id = tape.record(
            name, ids, attrs, out_data, tuple(arrays), stash, out.requires_grad
        )
        out.tape = tape
    return out


# ---------------------------------------------------------------------------
# helpers


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Collapse a gradient onto a scalar operand's shape."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def _check_elementwise(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(
        f"{name}: shapes {a.shape} and {b.shape} differ and neither is scalar; "
        "use expand() for explicit broadcasting"
    )


def _axis_attr(attrs: dict, ndim: int) -> int:
    axis = attrs["axis"]
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for ndim {ndim}")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _add_fwd(ins, attrs):
    a, b = ins
    _check_elementwise("add", a, b)
    return a + b


def _add_bwd(g, ins, out, attrs, stash):
    a, b = ins
    return [_reduce_to(g, a.shape), _reduce_to(g, b.shape)]


def _sub_fwd(ins, attrs):
    a, b = ins
    _check_elementwise("sub", a, b)
    return a - b


def _sub_bwd(g, ins, out, attrs, stash):
    a, b = ins
    return [_reduce_to(g, a.shape), _reduce_to(-g, b.shape)]


def _mul_fwd(ins, attrs):
    a, b = ins
    _check_elementwise("mul", a, b)
    return a * b


def _mul_bwd(g, ins, out, attrs, stash):
    a, b = ins
    return [_reduce_to(g * b, a.shape), _reduce_to(g * a, b.shape)]


def _div_fwd(ins, attrs):
    a, b = ins
    _check_elementwise("div", a, b)
    return a / b


def _div_bwd(g, ins, out, attrs, stash):
    a, b = ins
    return [_reduce_to(g / b, a.shape), _reduce_to(-g * a / (b * b), b.shape)]


register_primitive("add", _add_fwd, _add_bwd)
register_primitive("sub", _sub_fwd, _sub_bwd)
register_primitive("mul", _mul_fwd, _mul_bwd)
register_primitive("div", _div_fwd, _div_bwd)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def _relu_fwd(ins, attrs):
    return np.maximum(ins[0], 0)


def _relu_bwd(g, ins, out, attrs, stash):
    return [g * (ins[0] > 0)]


def _leaky_relu_fwd(ins, attrs):
    x = ins[0]
    s = attrs["slope"]
    return np.maximum(x, 0) + s * np.minimum(x, 0)


def _leaky_relu_bwd(g, ins, out, attrs, stash):
    x = ins[0]
    s = attrs["slope"]
    pos = x > 0
    return [g * pos + (s * g) * ~pos]


def _sigmoid_fwd(ins, attrs):
    x = ins[0]
    return 0.5 * (1.0 + np.tanh(0.5 * x))  # stable in both tails


def _sigmoid_bwd(g, ins, out, attrs, stash):
    return [g * out * (1.0 - out)]


def _swish_fwd(ins, attrs):
    x = ins[0]
    sig = _sigmoid_fwd(ins, attrs)
    return x * sig, sig


def _swish_bwd(g, ins, out, attrs, stash):
    x = ins[0]
    sig = stash
    return [g * sig * (1.0 + x * (1.0 - sig))]


def _tanh_fwd(ins, attrs):
    return np.tanh(ins[0])


def _tanh_bwd(g, ins, out, attrs, stash):
    return [g * (1.0 - out * out)]


def _exp_fwd(ins, attrs):
    return np.exp(ins[0])


def _exp_bwd(g, ins, out, attrs, stash):
    return [g * out]


def _log_fwd(ins, attrs):
    return np.log(ins[0])


def _log_bwd(g, ins, out, attrs, stash):
    return [g / ins[0]]


def _sqrt_fwd(ins, attrs):
    return np.sqrt(ins[0])


def _sqrt_bwd(g, ins, out, attrs, stash):
    # clamp keeps the gradient finite at 0 (forward stays exact)
    return [g * 0.5 / np.maximum(out, 1e-12)]


def _square_fwd(ins, attrs):
    return ins[0] * ins[0]


def _square_bwd(g, ins, out, attrs, stash):
    return [g * 2.0 * ins[0]]


def _abs_fwd(ins, attrs):
    return np.abs(ins[0])


def _abs_bwd(g, ins, out, attrs, stash):
    return [g * np.sign(ins[0])]


register_primitive("relu", _relu_fwd, _relu_bwd)
register_primitive("leaky_relu", _leaky_relu_fwd, _leaky_relu_bwd)
register_primitive("sigmoid", _sigmoid_fwd, _sigmoid_bwd)
register_primitive("swish", _swish_fwd, _swish_bwd)
register_primitive("tanh", _tanh_fwd, _tanh_bwd)
register_primitive("exp", _exp_fwd, _exp_bwd)
register_primitive("log", _log_fwd, _log_bwd)
register_primitive("sqrt", _sqrt_fwd, _sqrt_bwd)
register_primitive("square", _square_fwd, _square_bwd)
register_primitive("abs", _abs_fwd, _abs_bwd)


# ---------------------------------------------------------------------------
# gradient reversal


def _grad_reverse_fwd(ins, attrs):
    return ins[0]  # identity, same array: forward is bitwise-equal


def _grad_reverse_bwd(g, ins, out, attrs, stash):
    return [-attrs["alpha"] * g]


register_primitive("grad_reverse", _grad_reverse_fwd, _grad_reverse_bwd)


# ---------------------------------------------------------------------------
# matmul


def _matmul_fwd(ins, attrs):
    a, b = ins
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def _matmul_bwd(g, ins, out, attrs, stash):
    a, b = ins
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    if b.ndim == 2 and a.ndim > 2:
        k = a.shape[-1]
        n = g.shape[-1]
        gb = a.reshape(-1, k).T @ g.reshape(-1, n)
    else:
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return [ga, gb]


register_primitive("matmul", _matmul_fwd, _matmul_bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def _expand_fwd(ins, attrs):
    x = ins[0]
    shape = tuple(attrs["shape"])
    try:
        return np.ascontiguousarray(np.broadcast_to(x, shape))
    except ValueError as e:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from e


def _expand_bwd(g, ins, out, attrs, stash):
    x = ins[0]
    shape = tuple(attrs["shape"])
    lead = len(shape) - x.ndim
    axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(x.shape) if d == 1 and shape[lead + i] != 1
    )
    gx = g.sum(axis=axes) if axes else g
    return [gx.reshape(x.shape)]


def _reshape_fwd(ins, attrs):
    x = ins[0]
    shape = tuple(attrs["shape"])
    if np.prod(shape, dtype=int) != x.size and -1 not in shape:
        raise ShapeError(f"reshape: {x.shape} has {x.size} elements, target {shape}")
    return x.reshape(shape)


def _reshape_bwd(g, ins, out, attrs, stash):
    return [g.reshape(ins[0].shape)]


def _transpose_fwd(ins, attrs):
    return np.ascontiguousarray(np.transpose(ins[0], attrs["axes"]))


def _transpose_bwd(g, ins, out, attrs, stash):
    return [np.transpose(g, np.argsort(attrs["axes"]))]


def _concat_fwd(ins, attrs):
    axis = _axis_attr(attrs, ins[0].ndim)
    for x in ins[1:]:
        if x.ndim != ins[0].ndim:
            raise ShapeError("concat: rank mismatch")
        for ax in range(x.ndim):
            if ax != axis and x.shape[ax] != ins[0].shape[ax]:
                raise ShapeError(f"concat: shapes {[i.shape for i in ins]} differ off axis {axis}")
    return np.concatenate(ins, axis=axis)


def _concat_bwd(g, ins, out, attrs, stash):
    axis = _axis_attr(attrs, ins[0].ndim)
    sizes = [x.shape[axis] for x in ins]
    return list(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def _slice_fwd(ins, attrs):
    x = ins[0]
    axis = _axis_attr(attrs, x.ndim)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(attrs["start"], attrs["stop"], attrs.get("step", 1))
    return np.ascontiguousarray(x[tuple(sl)])


def _slice_bwd(g, ins, out, attrs, stash):
    x = ins[0]
    axis = _axis_attr(attrs, x.ndim)
    gx = np.zeros_like(x)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(attrs["start"], attrs["stop"], attrs.get("step", 1))
    gx[tuple(sl)] = g
    return [gx]


register_primitive("expand", _expand_fwd, _expand_bwd)
register_primitive("reshape", _reshape_fwd, _reshape_bwd)
register_primitive("transpose", _transpose_fwd, _transpose_bwd)
register_primitive("concat", _concat_fwd, _concat_bwd)
register_primitive("slice", _slice_fwd, _slice_bwd)


# ---------------------------------------------------------------------------
# reductions


def _mean_fwd(ins, attrs):
    x = ins[0]
    axis = _axis_attr(attrs, x.ndim)
    return x.mean(axis=axis, keepdims=attrs.get("keepdims", False))


def _mean_bwd(g, ins, out, attrs, stash):
    x = ins[0]
    axis = _axis_attr(attrs, x.ndim)
    n = x.shape[axis]
    if not attrs.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g / n, x.shape).copy()]


def _var_mean(x: np.ndarray, axis: int) -> np.ndarray:
    # float64 accumulation rounded back to the input dtype: constant slices
    # then subtract to exactly zero, so their variance (and std) is exact 0
    return x.mean(axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)


def _variance_fwd(ins, attrs):
    x = ins[0]
    axis = _axis_attr(attrs, x.ndim)
    d = x - _var_mean(x, axis)
    return (d * d).mean(axis=axis, keepdims=attrs.get("keepdims", False))


def _variance_bwd(g, ins, out, attrs, stash):
    x = ins[0]
    axis = _axis_attr(attrs, x.ndim)
    n = x.shape[axis]
    mu = _var_mean(x, axis)
    if not attrs.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return [2.0 / n * (x - mu) * g]


def _sum_fwd(ins, attrs):
    x = ins[0]
    axis = attrs.get("axis")
    if axis is None:
        return x.sum(keepdims=attrs.get("keepdims", False))
    return x.sum(axis=_axis_attr(attrs, x.ndim), keepdims=attrs.get("keepdims", False))


def _sum_bwd(g, ins, out, attrs, stash):
    x = ins[0]
    axis = attrs.get("axis")
    if axis is None:
        return [np.broadcast_to(g, x.shape).copy()]
    axis = _axis_attr(attrs, x.ndim)
    if not attrs.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, x.shape).copy()]


register_primitive("mean_over_axis", _mean_fwd, _mean_bwd)
register_primitive("variance_over_axis", _variance_fwd, _variance_bwd)
register_primitive("sum_over_axis", _sum_fwd, _sum_bwd)


# ---------------------------------------------------------------------------
# normalization / softmax


def _layer_norm_fwd(ins, attrs):
    x = ins[0]
    if len(ins) not in (1, 3):
        raise ShapeError("layer_norm takes (x) or (x, gain, bias)")
    eps = attrs.get("eps", 1e-5)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    if len(ins) == 3:
        gain, bias = ins[1], ins[2]
        if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
            raise ShapeError(f"layer_norm affine params must be ({x.shape[-1]},)")
        return y * gain + bias, (inv, y)
    return y, (inv, y)


def _layer_norm_bwd(g, ins, out, attrs, stash):
    inv, y = stash
    lead = tuple(range(y.ndim - 1))
    if len(ins) == 3:
        gain = ins[1]
        g_gain = (g * y).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        g = g * gain
    gm = g.mean(axis=-1, keepdims=True)
    gym = (g * y).mean(axis=-1, keepdims=True)
    gx = inv * (g - gm - y * gym)
    return [gx, g_gain, g_bias] if len(ins) == 3 else [gx]


def _softmax_log_fwd(ins, attrs):
    x = ins[0]
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return z - lse


def _softmax_log_bwd(g, ins, out, attrs, stash):
    p = np.exp(out)
    return [g - p * g.sum(axis=-1, keepdims=True)]


def _bias_add_fwd(ins, attrs):
    x, b = ins
    if b.shape != (x.shape[-1],):
        raise ShapeError(f"bias_add: bias {b.shape} must match trailing dim of {x.shape}")
    return x + b


def _bias_add_bwd(g, ins, out, attrs, stash):
    return [g, g.sum(axis=tuple(range(g.ndim - 1)))]


register_primitive("layer_norm", _layer_norm_fwd, _layer_norm_bwd)
register_primitive("softmax_log", _softmax_log_fwd, _softmax_log_bwd)
register_primitive("bias_add", _bias_add_fwd, _bias_add_bwd)


# ---------------------------------------------------------------------------
# gather-style ops


def _embedding_fwd(ins, attrs):
    table = ins[0]
    ids = np.asarray(attrs["ids"], dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup expects a 2-d table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding_lookup: index out of range")
    return table[ids]


def _embedding_bwd(g, ins, out, attrs, stash):
    table = ins[0]
    ids = np.asarray(attrs["ids"], dtype=np.int64)
    gt = np.zeros_like(table)
    np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
    return [gt]


def _take_index_fwd(ins, attrs):
    x = ins[0]
    ids = np.asarray(attrs["ids"], dtype=np.int64)
    if ids.shape != x.shape[:-1]:
        raise ShapeError(f"take_index: ids shape {ids.shape} must match {x.shape[:-1]}")
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[-1]):
        raise ShapeError("take_index: index out of range")
    return np.take_along_axis(x, ids[..., None], axis=-1)[..., 0]


def _take_index_bwd(g, ins, out, attrs, stash):
    x = ins[0]
    ids = np.asarray(attrs["ids"], dtype=np.int64)
    gx = np.zeros_like(x)
    np.put_along_axis(gx, ids[..., None], g[..., None], axis=-1)
    return [gx]


register_primitive("embedding_lookup", _embedding_fwd, _embedding_bwd)
register_primitive("take_index", _take_index_fwd, _take_index_bwd)


# ---------------------------------------------------------------------------
# attention


def _attention_fwd(ins, attrs):
    q, k, v = ins
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"scaled_dot_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    s = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    return np.matmul(a, v), a


def _attention_bwd(g, ins, out, attrs, stash):
    q, k, v = ins
    a = stash
    scale = 1.0 / np.sqrt(q.shape[-1])
    gv = np.matmul(np.swapaxes(a, -1, -2), g)
    ga = np.matmul(g, np.swapaxes(v, -1, -2))
    gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True))
    gq = np.matmul(gs, k) * scale
    gk = np.matmul(np.swapaxes(gs, -1, -2), q) * scale
    return [gq, gk, gv]


register_primitive("scaled_dot_attention", _attention_fwd, _attention_bwd)


# ---------------------------------------------------------------------------
# convolutions (layout: x is (batch, time, channels))


def _frames_view(xp: np.ndarray, n_out: int, k: int, stride: int) -> np.ndarray:
    """Strided (batch, n_out, k, channels) window view of a padded signal."""
    b, _, c = xp.shape
    sb, st, sc = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(b, n_out, k, c), strides=(sb, st * stride, st, sc), writeable=False
    )


def _conv1d_fwd(ins, attrs):
    x, w = ins
    stride = attrs.get("stride", 1)
    pad = attrs.get("pad", 0)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects x (B,T,Cin), w (Cout,Cin,K); got {x.shape}, {w.shape}")
    cout, cin, k = w.shape
    if x.shape[2] != cin:
        raise ShapeError(f"conv1d channel mismatch: x {x.shape} vs w {w.shape}")
    t_pad = x.shape[1] + 2 * pad
    if t_pad < k:
        raise ShapeError(f"conv1d: padded length {t_pad} < kernel {k}")
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0))) if pad else x
    n_out = (t_pad - k) // stride + 1
    cols = _frames_view(xp, n_out, k, stride)
    out = np.tensordot(cols, w, axes=([2, 3], [2, 1]))
    return np.ascontiguousarray(out)


def _conv1d_bwd(g, ins, out, attrs, stash):
    x, w = ins
    stride = attrs.get("stride", 1)
    pad = attrs.get("pad", 0)
    cout, cin, k = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0))) if pad else x
    n_out = g.shape[1]
    cols = _frames_view(xp, n_out, k, stride)
    gw = np.einsum("btkc,bto->ock", cols, g, optimize=True)
    dcols = np.einsum("bto,ock->btkc", g, w, optimize=True)
    gxp = np.zeros_like(xp)
    for j in range(k):
        gxp[:, j : j + n_out * stride : stride, :] += dcols[:, :, j, :]
    gx = gxp[:, pad : xp.shape[1] - pad, :] if pad else gxp
    return [np.ascontiguousarray(gx), gw]


def _depthwise_fwd(ins, attrs):
    x, w = ins
    pad = attrs.get("pad", 0)
    if x.ndim != 3 or w.ndim != 2:
        raise ShapeError(f"depthwise_conv1d expects x (B,T,C), w (C,K); got {x.shape}, {w.shape}")
    c, k = w.shape
    if x.shape[2] != c:
        raise ShapeError(f"depthwise_conv1d channel mismatch: x {x.shape} vs w {w.shape}")
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0))) if pad else x
    t_pad = xp.shape[1]
    if t_pad < k:
        raise ShapeError(f"depthwise_conv1d: padded length {t_pad} < kernel {k}")
    n_out = t_pad - k + 1
    cols = _frames_view(xp, n_out, k, 1)
    return np.einsum("btkc,ck->btc", cols, w, optimize=True)


def _depthwise_bwd(g, ins, out, attrs, stash):
    x, w = ins
    pad = attrs.get("pad", 0)
    c, k = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0))) if pad else x
    n_out = g.shape[1]
    cols = _frames_view(xp, n_out, k, 1)
    gw = np.einsum("btkc,btc->ck", cols, g, optimize=True)
    gxp = np.zeros_like(xp)
    for j in range(k):
        gxp[:, j : j + n_out, :] += g * w[:, j]
    gx = gxp[:, pad : xp.shape[1] - pad, :] if pad else gxp
    return [np.ascontiguousarray(gx), gw]


def _transpose_conv1d_fwd(ins, attrs):
    x, w = ins
    stride = attrs.get("stride", 1)
    pad = attrs.get("pad", 0)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"transpose_conv1d expects x (B,T,Cin), w (Cin,Cout,K); got {x.shape}, {w.shape}")
    cin, cout, k = w.shape
    if x.shape[2] != cin:
        raise ShapeError(f"transpose_conv1d channel mismatch: x {x.shape} vs w {w.shape}")
    b, t, _ = x.shape
    t_full = (t - 1) * stride + k
    if t_full - 2 * pad < 1:
        raise ShapeError("transpose_conv1d: output length would be empty")
    if stride == 1:
        # full correlation with the flipped kernel, vectorized over taps
        xp = np.pad(x, ((0, 0), (k - 1, k - 1), (0, 0)))
        cols = _frames_view(xp, t_full, k, 1)
        wf = np.ascontiguousarray(w.transpose(1, 0, 2)[:, :, ::-1])  # (Cout, Cin, K)
        y = np.tensordot(cols, wf, axes=([2, 3], [2, 1]))
    else:
        y = np.zeros((b, t_full, cout), dtype=x.dtype)
        for j in range(k):
            y[:, j : j + t * stride : stride, :] += np.matmul(x, w[:, :, j])
    return np.ascontiguousarray(y[:, pad : t_full - pad, :]) if pad else y


def _transpose_conv1d_bwd(g, ins, out, attrs, stash):
    x, w = ins
    stride = attrs.get("stride", 1)
    pad = attrs.get("pad", 0)
    cin, cout, k = w.shape
    b, t, _ = x.shape
    t_full = (t - 1) * stride + k
    gf = np.pad(g, ((0, 0), (pad, pad), (0, 0))) if pad else g
    if stride == 1:
        frames = _frames_view(gf, t, k, 1)  # frames[b,t,j,o] = gf[b,t+j,o]
        gx = np.einsum("btjo,ioj->bti", frames, w, optimize=True)
        gw = np.einsum("bti,btjo->ioj", x, frames, optimize=True)
        return [gx, gw]
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for j in range(k):
        gj = gf[:, j : j + t * stride : stride, :]
        gx += np.matmul(gj, w[:, :, j].T)
        gw[:, :, j] = np.einsum("bti,bto->io", x, gj, optimize=True)
    return [gx, gw]


def _avg_pool1d_fwd(ins, attrs):
    x = ins[0]
    k = attrs["kernel"]
    stride = attrs.get("stride", k)
    if x.ndim != 3:
        raise ShapeError(f"avg_pool1d expects (B,T,C), got {x.shape}")
    if x.shape[1] < k:
        raise ShapeError(f"avg_pool1d: length {x.shape[1]} < kernel {k}")
    n_out = (x.shape[1] - k) // stride + 1
    cols = _frames_view(x, n_out, k, stride)
    return cols.mean(axis=2)


def _avg_pool1d_bwd(g, ins, out, attrs, stash):
    x = ins[0]
    k = attrs["kernel"]
    stride = attrs.get("stride", k)
    n_out = g.shape[1]
    gx = np.zeros_like(x)
    for j in range(k):
        gx[:, j : j + n_out * stride : stride, :] += g / k
    return [gx]


def _frame_signal_fwd(ins, attrs):
    x = ins[0]
    flen, hop = attrs["frame_len"], attrs["hop"]
    if x.ndim != 2:
        raise ShapeError(f"frame_signal expects (B,L), got {x.shape}")
    if x.shape[1] < flen:
        raise ShapeError(f"frame_signal: waveform length {x.shape[1]} < frame_len {flen}")
    n_out = 1 + (x.shape[1] - flen) // hop
    b = x.shape[0]
    sb, st = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(b, n_out, flen), strides=(sb, st * hop, st), writeable=False
    )
    return np.ascontiguousarray(view)


def _frame_signal_bwd(g, ins, out, attrs, stash):
    x = ins[0]
    flen, hop = attrs["frame_len"], attrs["hop"]
    n_out = g.shape[1]
    gx = np.zeros_like(x)
    for j in range(flen):
        gx[:, j : j + n_out * hop : hop] += g[:, :, j]
    return [gx]


register_primitive("conv1d", _conv1d_fwd, _conv1d_bwd)
register_primitive("depthwise_conv1d", _depthwise_fwd, _depthwise_bwd)
register_primitive("transpose_conv1d", _transpose_conv1d_fwd, _transpose_conv1d_bwd)
register_primitive("avg_pool1d", _avg_pool1d_fwd, _avg_pool1d_bwd)
register_primitive("frame_signal", _frame_signal_fwd, _frame_signal_bwd)


# ---------------------------------------------------------------------------
# functional API


def add(a, b) -> Tensor:
    return apply_primitive("add", [a, b])


def sub(a, b) -> Tensor:
    return apply_primitive("sub", [a, b])


def mul(a, b) -> Tensor:
    return apply_primitive("mul", [a, b])


def div(a, b) -> Tensor:
    return apply_primitive("div", [a, b])


def matmul(a, b) -> Tensor:
    return apply_primitive("matmul", [a, b])


def relu(x) -> Tensor:
    return apply_primitive("relu", [x])


def leaky_relu(x, slope: float = 0.1) -> Tensor:
    return apply_primitive("leaky_relu", [x], {"slope": slope})


def sigmoid(x) -> Tensor:
    return apply_primitive("sigmoid", [x])


def swish(x) -> Tensor:
    return apply_primitive("swish", [x])


def tanh(x) -> Tensor:
    return apply_primitive("tanh", [x])


def exp(x) -> Tensor:
    return apply_primitive("exp", [x])


def log(x) -> Tensor:
    return apply_primitive("log", [x])


def sqrt(x) -> Tensor:
    return apply_primitive("sqrt", [x])


def square(x) -> Tensor:
    return apply_primitive("square", [x])


def absolute(x) -> Tensor:
    return apply_primitive("abs", [x])


def grad_reverse(x, alpha: float) -> Tensor:
    """Identity forward; scales the upstream gradient by -alpha in backward.

    The sign is owned by this operation: alpha must be nonnegative.
    """
    alpha = float(alpha)
    if not np.isfinite(alpha) or alpha < 0:
        raise ValueError(f"grad_reverse: alpha must be finite and >= 0, got {alpha}")
    return apply_primitive("grad_reverse", [x], {"alpha": alpha})


def expand(x, shape) -> Tensor:
    return apply_primitive("expand", [x], {"shape": tuple(shape)})


def reshape(x, shape) -> Tensor:
    return apply_primitive("reshape", [x], {"shape": tuple(shape)})


def transpose(x, axes) -> Tensor:
    return apply_primitive("transpose", [x], {"axes": tuple(axes)})


def concat(tensors, axis: int) -> Tensor:
    return apply_primitive("concat", list(tensors), {"axis": axis})


def slice_axis(x, axis: int, start, stop, step: int = 1) -> Tensor:
    return apply_primitive("slice", [x], {"axis": axis, "start": start, "stop": stop, "step": step})


def mean_over_axis(x, axis: int, keepdims: bool = False) -> Tensor:
    return apply_primitive("mean_over_axis", [x], {"axis": axis, "keepdims": keepdims})


def variance_over_axis(x, axis: int, keepdims: bool = False) -> Tensor:
    return apply_primitive("variance_over_axis", [x], {"axis": axis, "keepdims": keepdims})


def sum_over_axis(x, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("sum_over_axis", [x], {"axis": axis, "keepdims": keepdims})


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    if (gain is None) != (bias is None):
        raise ValueError("layer_norm affine form needs both gain and bias")
    if gain is None:
        return apply_primitive("layer_norm", [x], {"eps": eps})
    return apply_primitive("layer_norm", [x, gain, bias], {"eps": eps})


def bias_add(x, b) -> Tensor:
    """Add a trailing-dimension bias vector (fused expand + add)."""
    return apply_primitive("bias_add", [x, b])


def softmax_log(x) -> Tensor:
    return apply_primitive("softmax_log", [x])


def embedding_lookup(table, ids) -> Tensor:
    return apply_primitive("embedding_lookup", [table], {"ids": np.asarray(ids)})


def take_index(x, ids) -> Tensor:
    return apply_primitive("take_index", [x], {"ids": np.asarray(ids)})


def scaled_dot_attention(q, k, v) -> Tensor:
    return apply_primitive("scaled_dot_attention", [q, k, v])


def conv1d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    return apply_primitive("conv1d", [x, w], {"stride": stride, "pad": pad})


def depthwise_conv1d(x, w, pad: int = 0) -> Tensor:
    return apply_primitive("depthwise_conv1d", [x, w], {"pad": pad})


def transpose_conv1d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    return apply_primitive("transpose_conv1d", [x, w], {"stride": stride, "pad": pad})


def avg_pool1d(x, kernel: int, stride: Optional[int] = None) -> Tensor:
    return apply_primitive("avg_pool1d", [x], {"kernel": kernel, "stride": stride or kernel})


def frame_signal(x, frame_len: int, hop: int) -> Tensor:
    return apply_primitive("frame_signal", [x], {"frame_len": frame_len, "hop": hop})


# operators on Tensor
Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = lambda self, other: div(self, other)
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.__neg__ = lambda self: mul(self, -1.0)
