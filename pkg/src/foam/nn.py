"""Convolution and normalization primitives shared by the FSTB sub-blocks.

All convolutions are stride 1 with zero "same" padding, so spatial extents
never change. Inputs may be ``C x H x W`` or batched ``B x C x H x W``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from foam import tensor as T
from foam.io import load_params, save_params
from foam.spectral import ComplexSpectrum
from foam.tensor import Tensor

NORM_EPS = 1e-5
DEFAULT_DILATION = 2


@dataclass
class Conv2dParams:
    weight: Tensor  # C_out x C_in x k x k
    bias: Tensor | None  # C_out; None where a following normalization cancels it
    dilation: int = 1

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[-1]


@dataclass
class DDConvParams:
    """Depthwise dilated k x k stage followed by a 1 x 1 pointwise conv."""

    depthwise: Tensor  # C_in x k x k
    pointwise: Conv2dParams
    dilation: int = DEFAULT_DILATION


@dataclass
class SigmaParams:
    conv1: Conv2dParams
    scale: Tensor
    shift: Tensor
    conv2: Conv2dParams


# -- initialization ----------------------------------------------------------
def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def init_params(shape, seed, dtype=np.float64) -> Tensor:
    """Uniform in +-sqrt(6 / fan_in), fan_in = product of all but the first extent."""
    shape = tuple(shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    bound = math.sqrt(6.0 / fan_in)
    data = _rng(seed).uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def make_conv(
    c_in: int, c_out: int, k: int, seed, dilation: int = 1, dtype=np.float64, zero: bool = False, bias: bool = True
) -> Conv2dParams:
    if zero:
        w = Tensor(np.zeros((c_out, c_in, k, k), dtype=dtype), requires_grad=True)
    else:
        w = init_params((c_out, c_in, k, k), seed, dtype)
    b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None
    return Conv2dParams(w, b, dilation)


def make_dd(c_in: int, c_out: int, k: int, seed, dilation: int = DEFAULT_DILATION, dtype=np.float64) -> DDConvParams:
    rng = _rng(seed)
    dw = init_params((c_in, k, k), rng, dtype)
    return DDConvParams(dw, make_conv(c_in, c_out, 1, rng, dtype=dtype), dilation)


def make_sigma(channels: int, seed, dtype=np.float64, zero: bool = False) -> SigmaParams:
    rng = _rng(seed)
    return SigmaParams(
        make_conv(channels, channels, 1, rng, dtype=dtype, zero=zero, bias=False),
        Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        make_conv(channels, channels, 1, rng, dtype=dtype, zero=zero),
    )


# -- convolution kernels -----------------------------------------------------
def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected C x H x W or B x C x H x W input, got {x.shape}")


def _same_pad(k: int, dilation: int) -> int:
    if k % 2 == 0:
        raise ValueError(f"'same' padding needs an odd kernel, got {k}")
    return dilation * (k - 1) // 2


def _im2col(xp: np.ndarray, k: int, d: int, h: int, w: int) -> np.ndarray:
    """B x C x Hp x Wp -> B x C x k*k x H x W stack of shifted views."""
    return np.stack(
        [xp[:, :, i * d : i * d + h, j * d : j * d + w] for i in range(k) for j in range(k)],
        axis=2,
    )


def _col2im(cols: np.ndarray, k: int, d: int, h: int, w: int, pad: int) -> np.ndarray:
    b, c = cols.shape[:2]
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    t = 0
    for i in range(k):
        for j in range(k):
            xp[:, :, i * d : i * d + h, j * d : j * d + w] += cols[:, :, t]
            t += 1
    return xp[:, :, pad : pad + h, pad : pad + w]


def _conv_op(x: Tensor, weight: Tensor, dilation: int) -> Tensor:
    b, c_in, h, w = x.shape
    c_out, wc_in, k, _ = weight.shape
    if wc_in != c_in:
        raise ValueError(f"conv2d expects {wc_in} input channels, got {c_in} (input shape {x.shape})")
    wd = weight.data
    if k == 1:
        flat = x.data.reshape(b, c_in, h * w)
        wm = wd.reshape(c_out, c_in)
        out = np.matmul(wm, flat).reshape(b, c_out, h, w)

        def grad_fn(g):
            g2 = g.reshape(b, c_out, h * w)
            gx = np.matmul(wm.T, g2).reshape(b, c_in, h, w)
            gw = np.tensordot(g2, flat, axes=([0, 2], [0, 2])).reshape(c_out, c_in, 1, 1)
            return gx, gw

        return Tensor._wrap(out, (x, weight), grad_fn, "conv1x1")

    pad = _same_pad(k, dilation)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, k, dilation, h, w).reshape(b, c_in * k * k, h * w)
    wm = wd.reshape(c_out, c_in * k * k)
    out = np.matmul(wm, cols).reshape(b, c_out, h, w)

    def grad_fn(g):
        g2 = g.reshape(b, c_out, h * w)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(wd.shape)
        gcols = np.matmul(wm.T, g2).reshape(b, c_in, k * k, h, w)
        return _col2im(gcols, k, dilation, h, w, pad), gw

    return Tensor._wrap(out, (x, weight), grad_fn, "conv2d")


def _depthwise_op(x: Tensor, weight: Tensor, dilation: int) -> Tensor:
    b, c, h, w = x.shape
    wc, k, _ = weight.shape
    if wc != c:
        raise ValueError(f"depthwise conv expects {wc} channels, got {c} (input shape {x.shape})")
    pad = _same_pad(k, dilation)
    d = dilation
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    wd = weight.data
    taps = [(i, j) for i in range(k) for j in range(k)]
    out = np.zeros((b, c, h, w), dtype=np.result_type(xp, wd))
    for i, j in taps:
        out += wd[None, :, i, j, None, None] * xp[:, :, i * d : i * d + h, j * d : j * d + w]

    def grad_fn(g):
        gw = np.empty_like(wd)
        gxp = np.zeros_like(xp, dtype=g.dtype)
        for i, j in taps:
            view = xp[:, :, i * d : i * d + h, j * d : j * d + w]
            gw[:, i, j] = (g * view).sum(axis=(0, 2, 3))
            gxp[:, :, i * d : i * d + h, j * d : j * d + w] += wd[None, :, i, j, None, None] * g
        return gxp[:, :, pad : pad + h, pad : pad + w], gw

    return Tensor._wrap(out, (x, weight), grad_fn, "depthwise_conv2d")


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlation with zero 'same' padding plus per-channel bias."""
    xb, squeeze = _as_batch(x)
    out = _conv_op(xb, p.weight, p.dilation)
    if p.bias is not None:
        out = out + T.reshape(p.bias, (1, -1, 1, 1))
    return T.reshape(out, out.shape[1:]) if squeeze else out


def depthwise_conv2d(x: Tensor, weight: Tensor, dilation: int = 1) -> Tensor:
    xb, squeeze = _as_batch(x)
    out = _depthwise_op(xb, weight, dilation)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def dd_conv(x: Tensor, p: DDConvParams) -> Tensor:
    return conv2d(depthwise_conv2d(x, p.depthwise, p.dilation), p.pointwise)


def instance_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Standardize each channel over its spatial positions, then apply scale/shift."""
    mu = T.mean(x, axis=(-2, -1), keepdims=True)
    centered = x - mu
    var = T.mean(T.square(centered), axis=(-2, -1), keepdims=True)
    normed = centered / T.sqrt(var + eps)
    return normed * T.reshape(scale, (-1, 1, 1)) + T.reshape(shift, (-1, 1, 1))


def sigma_sequence(x: Tensor, p: SigmaParams) -> Tensor:
    """conv 1x1 -> norm -> ReLU -> conv 1x1 -> sigmoid on a real tensor."""
    y = conv2d(x, p.conv1)
    y = T.relu(instance_norm(y, p.scale, p.shift))
    return T.sigmoid(conv2d(y, p.conv2))


def sigma_block(s: ComplexSpectrum, p: SigmaParams) -> ComplexSpectrum:
    """Apply the real-valued gate to real and imaginary parts with shared weights."""
    re, im = s.real, s.imag
    if re.ndim == 3:
        both = sigma_sequence(T.stack([re, im], axis=0), p)
        return ComplexSpectrum(both[0], both[1])
    b = re.shape[0]
    both = sigma_sequence(T.concat([re, im], axis=0), p)
    return ComplexSpectrum(both[:b], both[b:])


# -- parameter trees -----------------------------------------------------------
def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield (dotted name, tensor) for every Tensor reachable through dataclasses/lists/dicts."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for key in sorted(obj):
            yield from named_parameters(obj[key], f"{prefix}.{key}" if prefix else str(key))


def parameters(obj) -> list[Tensor]:
    return [t for _, t in named_parameters(obj)]


def _dilations(obj, prefix: str = "") -> dict[str, dict]:
    out: dict[str, dict] = {}
    if isinstance(obj, DDConvParams):
        out[f"{prefix}.depthwise" if prefix else "depthwise"] = {"dilation": obj.dilation}
    if isinstance(obj, Conv2dParams):
        out[f"{prefix}.weight" if prefix else "weight"] = {"dilation": obj.dilation}
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            out.update(_dilations(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.update(_dilations(item, f"{prefix}.{i}" if prefix else str(i)))
    elif isinstance(obj, dict):
        for key in sorted(obj):
            out.update(_dilations(obj[key], f"{prefix}.{key}" if prefix else str(key)))
    return out


def save(obj, directory, meta: dict | None = None):
    return save_params(directory, dict(named_parameters(obj)), _dilations(obj), meta)


def load_into(obj, directory) -> dict:
    """Overwrite the tensors of ``obj`` in place from a saved manifest; returns the manifest."""
    arrays, manifest = load_params(directory)
    named = dict(named_parameters(obj))
    missing = set(named) - set(arrays)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, t in named.items():
        if tuple(arrays[name].shape) != t.shape:
            raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {t.shape}")
        t.data = arrays[name].astype(t.dtype)
    return manifest


def cast(obj, dtype):
    """Cast every tensor of a parameter tree in place."""
    for t in parameters(obj):
        t.data = t.data.astype(dtype)
    return obj
