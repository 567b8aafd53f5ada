"""Operator set shared by the teacher and student networks.

Forward kernels, vector-Jacobian products and MAC accounting. All tensors
are NHWC; conv weights are ``(kh, kw, cin, cout)``.

Two convolution kernels exist. ``direct`` accumulates tap by tap and
channel by channel (kh, then kw, then cin) with elementwise float64
arithmetic and rounds once at the end, so every output element is computed
by the same sequence of roundings no matter how large the surrounding array
is. That is what makes tiled and whole-image execution bit-identical. ``gemm`` lowers to im2col plus one
BLAS matmul; it is much faster but BLAS may pick different reduction
kernels for different matrix heights, so it only promises ~1e-6 agreement.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import ShapeError

IMPLS = ("gemm", "direct")
DEFAULT_IMPL = "gemm"


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple[int, int]
    stride: int
    padding: str
    in_channels: int
    out_channels: int
    transposed: bool = False
    has_bias: bool = True

    def __post_init__(self):
        kh, kw = self.kernel
        if kh not in (1, 2, 3) or kw not in (1, 2, 3):
            raise ValueError(f"kernel {self.kernel} outside {{1,2,3}}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride {self.stride} not in {{1,2}}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding {self.padding!r} not in ('same', 'valid')")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (*self.kernel, self.in_channels, self.out_channels)

    @property
    def param_count(self) -> int:
        kh, kw = self.kernel
        return kh * kw * self.in_channels * self.out_channels + (self.out_channels if self.has_bias else 0)

    def out_extent(self, n: int, axis: int = 0) -> int:
        k = self.kernel[axis]
        if self.transposed:
            return n * self.stride
        if self.padding == "same":
            return -(-n // self.stride)
        return (n - k) // self.stride + 1


def _same_pads(k: int) -> tuple[int, int]:
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def _check_channels(x: np.ndarray, cin: int, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what}: input must be rank 4 NHWC, got {x.shape}")
    if x.shape[-1] != cin:
        raise ShapeError(f"{what}: input has {x.shape[-1]} channels, weights expect {cin}")


def _padded(x, kh, kw, stride, padding):
    n, h, w, _ = x.shape
    if padding == "same":
        (t, b), (l, r) = _same_pads(kh), _same_pads(kw)
        oh, ow = -(-h // stride), -(-w // stride)
        xp = np.pad(x, ((0, 0), (t, b), (l, r), (0, 0))) if (t or b or l or r) else x
        return xp, (t, l), oh, ow
    oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"valid {kh}x{kw} conv on {h}x{w} input leaves no output")
    return x, (0, 0), oh, ow


def _tap(xp, i, j, stride, oh, ow):
    return xp[:, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride, :]


def im2col(xp, kh, kw, stride, oh, ow) -> np.ndarray:
    """Patch matrix ``(n*oh*ow, kh*kw*cin)`` with columns ordered kh, kw, cin."""
    taps = [_tap(xp, i, j, stride, oh, ow) for i in range(kh) for j in range(kw)]
    cols = np.stack(taps, axis=3)
    return cols.reshape(-1, kh * kw * xp.shape[-1])


def _shifted_gemm(xp, weight, out_dtype):
    """Stride-1 correlation on a padded input without building a patch matrix.

    On the flattened ``(n*hp*wp, cin)`` view of ``xp`` a kernel tap ``(i, j)``
    is a constant row offset ``i*wp + j``, so each tap is one contiguous
    matmul. Rows past the valid output window are computed and discarded.
    """
    n, hp, wp, cin = xp.shape
    kh, kw, _, cout = weight.shape
    oh, ow = hp - kh + 1, wp - kw + 1
    flat = xp.reshape(-1, cin)
    rows = flat.shape[0] - (kh - 1) * wp - (kw - 1)
    out = np.zeros((flat.shape[0], cout), dtype=out_dtype)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            out[:rows] += flat[off : off + rows] @ weight[i, j]
    return out.reshape(n, hp, wp, cout)[:, :oh, :ow, :]


def _shifted_gemm_wgrad(xp, g, kh, kw):
    n, hp, wp, cin = xp.shape
    _, oh, ow, cout = g.shape
    gfull = np.zeros((n, hp, wp, cout), dtype=g.dtype)
    gfull[:, :oh, :ow, :] = g
    flat, gflat = xp.reshape(-1, cin), gfull.reshape(-1, cout)
    rows = flat.shape[0] - (kh - 1) * wp - (kw - 1)
    gw = np.empty((kh, kw, cin, cout), dtype=np.result_type(xp.dtype, g.dtype))
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            gw[i, j] = flat[off : off + rows].T @ gflat[:rows]
    return gw


def _acc_dtype(dtype):
    # the reference kernel accumulates float32 work in float64
    return np.promote_types(dtype, np.float64) if np.dtype(dtype).kind == "f" else dtype


def _space_to_depth(x, k):
    n, h, w, c = x.shape
    return x.reshape(n, h // k, k, w // k, k, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h // k, w // k, k * k * c)


def conv2d(x, weight, bias, stride: int = 1, padding: str = "same", impl: str = DEFAULT_IMPL):
    kh, kw, cin, cout = weight.shape
    _check_channels(x, cin, "conv2d")
    xp, _, oh, ow = _padded(x, kh, kw, stride, padding)
    n = x.shape[0]
    dtype = np.result_type(x.dtype, weight.dtype)
    if impl == "gemm":
        if stride == 1:
            out = np.ascontiguousarray(_shifted_gemm(xp, weight, dtype))
        elif (kh, kw) == (stride, stride) and padding == "valid" and x.shape[1] % stride == 0 \
                and x.shape[2] % stride == 0:
            out = _space_to_depth(x, stride) @ weight.reshape(-1, cout)
        else:
            out = (im2col(xp, kh, kw, stride, oh, ow) @ weight.reshape(-1, cout)).reshape(n, oh, ow, cout)
    elif impl == "direct":
        out = np.zeros((n, oh, ow, cout), dtype=_acc_dtype(dtype))
        for i in range(kh):
            for j in range(kw):
                xs = _tap(xp, i, j, stride, oh, ow)
                for c in range(cin):
                    out += xs[..., c : c + 1] * weight[i, j, c]
    else:
        raise ValueError(f"unknown conv impl {impl!r}; choose from {IMPLS}")
    if bias is not None:
        out += bias
    return out.astype(dtype, copy=False)


def conv2d_vjp(x, weight, bias, g, stride: int = 1, padding: str = "same"):
    kh, kw, cin, cout = weight.shape
    xp, (t, l), oh, ow = _padded(x, kh, kw, stride, padding)
    if g.shape != (x.shape[0], oh, ow, cout):
        raise ShapeError(f"conv2d vjp: upstream {g.shape} != output {(x.shape[0], oh, ow, cout)}")
    gb = g.sum(axis=(0, 1, 2)) if bias is not None else None
    h, w = x.shape[1:3]
    dtype = np.result_type(g.dtype, weight.dtype)
    if stride == 1:
        gw = _shifted_gemm_wgrad(xp, g, kh, kw)
        gpad = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
        flipped = np.ascontiguousarray(weight[::-1, ::-1].transpose(0, 1, 3, 2))
        gxp = _shifted_gemm(gpad, flipped, dtype)
        return np.ascontiguousarray(gxp[:, t : t + h, l : l + w, :]), gw, gb
    g2 = g.reshape(-1, cout)
    gw = (im2col(xp, kh, kw, stride, oh, ow).T @ g2).reshape(weight.shape)
    gcols = (g2 @ weight.reshape(-1, cout).T).reshape(x.shape[0], oh, ow, kh, kw, cin)
    gxp = np.zeros(xp.shape, dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            _tap(gxp, i, j, stride, oh, ow)[...] += gcols[:, :, :, i, j, :]
    return gxp[:, t : t + h, l : l + w, :], gw, gb


def tconv2d_2x2_s2(x, weight, bias, impl: str = DEFAULT_IMPL):
    """Transposed 2x2 stride-2 convolution: each input pixel stamps a 2x2 block."""
    kh, kw, cin, cout = weight.shape
    if (kh, kw) != (2, 2):
        raise ShapeError(f"tconv2d_2x2_s2 needs 2x2 weights, got {weight.shape}")
    _check_channels(x, cin, "tconv2d_2x2_s2")
    n, h, w, _ = x.shape
    dtype = np.result_type(x.dtype, weight.dtype)
    if impl == "gemm":
        wm = weight.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)
        y = (x.reshape(-1, cin) @ wm).reshape(n, h, w, 2, 2, cout)
    elif impl == "direct":
        y = np.zeros((n, h, w, 2, 2, cout), dtype=_acc_dtype(dtype))
        for c in range(cin):
            y += x[..., c, None, None, None] * weight[:, :, c, :]
    else:
        raise ValueError(f"unknown conv impl {impl!r}; choose from {IMPLS}")
    out = y.transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, cout)
    if bias is not None:
        out = out + bias
    return out.astype(dtype, copy=False)


def tconv2d_vjp(x, weight, bias, g):
    n, h, w, cin = x.shape
    cout = weight.shape[-1]
    if g.shape != (n, 2 * h, 2 * w, cout):
        raise ShapeError(f"tconv vjp: upstream {g.shape} != output {(n, 2 * h, 2 * w, cout)}")
    gr = g.reshape(n, h, 2, w, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * cout)
    wm = weight.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)
    gx = (gr @ wm.T).reshape(x.shape)
    gw = (x.reshape(-1, cin).T @ gr).reshape(cin, 2, 2, cout).transpose(1, 2, 0, 3)
    gb = g.sum(axis=(0, 1, 2)) if bias is not None else None
    return gx, np.ascontiguousarray(gw), gb


def relu(x):
    return np.maximum(x, 0)


def prelu(x, alpha):
    alpha = np.asarray(alpha)
    if alpha.shape != (x.shape[-1],):
        raise ShapeError(f"prelu: {alpha.shape[0] if alpha.ndim else 'scalar'} alphas for {x.shape[-1]} channels")
    return np.where(x >= 0, x, x * alpha)


def nearest_up2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def concat_channels(a, b):
    if a.shape[:3] != b.shape[:3]:
        raise ShapeError(f"concat: spatial dims {a.shape[:3]} vs {b.shape[:3]}")
    return np.concatenate([a, b], axis=-1)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return a + b


def clip01(x):
    return np.clip(x, 0, 1)


# --- uniform dispatch ------------------------------------------------------

class OpGrads(NamedTuple):
    inputs: tuple
    params: tuple


def _conv_fwd(inputs, params, stride=1, padding="same", impl=DEFAULT_IMPL):
    return conv2d(inputs[0], params[0], params[1], stride, padding, impl)


def _conv_bwd(inputs, params, g, stride=1, padding="same", **_):
    gx, gw, gb = conv2d_vjp(inputs[0], params[0], params[1], g, stride, padding)
    return OpGrads((gx,), (gw, gb))


def _tconv_fwd(inputs, params, impl=DEFAULT_IMPL, **_):
    return tconv2d_2x2_s2(inputs[0], params[0], params[1], impl)


def _tconv_bwd(inputs, params, g, **_):
    gx, gw, gb = tconv2d_vjp(inputs[0], params[0], params[1], g)
    return OpGrads((gx,), (gw, gb))


def _prelu_bwd(inputs, params, g, **_):
    x, alpha = inputs[0], params[0]
    neg = x < 0
    gx = np.where(neg, g * alpha, g)
    galpha = np.where(neg, g * x, 0).sum(axis=(0, 1, 2))
    return OpGrads((gx,), (galpha,))


def _up_bwd(inputs, params, g, **_):
    n, h, w, c = inputs[0].shape
    return OpGrads((g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),), ())


def _concat_bwd(inputs, params, g, **_):
    ca = inputs[0].shape[-1]
    return OpGrads((g[..., :ca], g[..., ca:]), ())


FORWARD: dict[str, Callable] = {
    "conv": _conv_fwd,
    "tconv": _tconv_fwd,
    "relu": lambda inputs, params, **_: relu(inputs[0]),
    "prelu": lambda inputs, params, **_: prelu(inputs[0], params[0]),
    "up": lambda inputs, params, **_: nearest_up2(inputs[0]),
    "concat": lambda inputs, params, **_: concat_channels(*inputs),
    "add": lambda inputs, params, **_: add(*inputs),
    "clip": lambda inputs, params, **_: clip01(inputs[0]),
}

BACKWARD: dict[str, Callable] = {
    "conv": _conv_bwd,
    "tconv": _tconv_bwd,
    "relu": lambda inputs, params, g, **_: OpGrads((g * (inputs[0] > 0),), ()),
    "prelu": _prelu_bwd,
    "up": _up_bwd,
    "concat": _concat_bwd,
    "add": lambda inputs, params, g, **_: OpGrads((g, g), ()),
    "clip": lambda inputs, params, g, **_: OpGrads((g * ((inputs[0] > 0) & (inputs[0] < 1)),), ()),
}


def apply(op: str, inputs, params=(), **attrs):
    try:
        fn = FORWARD[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    return fn(tuple(inputs), tuple(params), **attrs)


def vjp(op: str, inputs, params, upstream, **attrs) -> OpGrads:
    """Gradients of ``<upstream, op(inputs, params)>`` w.r.t. inputs and params.

    ``inputs`` are the forward inputs; for ``prelu`` the alpha vector is the
    single parameter. relu'(0) is 0 and clip01 passes gradient only on the
    open interval (0, 1).
    """
    try:
        fn = BACKWARD[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    return fn(tuple(inputs), tuple(params), upstream, **attrs)


def mac_count(spec: ConvSpec, out_h: int, out_w: int) -> int:
    """Multiply-accumulates of one conv layer for a single image.

    Transposed convs are counted per input pixel, since each input pixel
    stamps a full kernel.
    """
    kh, kw = spec.kernel
    per = kh * kw * spec.in_channels * spec.out_channels
    if spec.transposed:
        return per * (out_h // spec.stride) * (out_w // spec.stride)
    return per * out_h * out_w
