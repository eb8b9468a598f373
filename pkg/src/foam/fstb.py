"""Frequency Spatial Transformer Block.

Three sub-blocks refine a ``C x H x W`` feature map (a leading batch axis is
also accepted):

* SDCA - channel self-attention (C x C map) over depthwise-dilated spatial
  projections, plus a dual-kernel spatial residual.
* FDBA - parameter-free self-attention (N x N map, N = H*W) over the
  magnitude spectrum; the result is recombined with the untouched input phase
  and fused with a gated frequency residual.
* FSFN - two-stage gated feed-forward network interleaving spectral and
  spatial paths.

The block merges SDCA and FDBA outputs with a 1 x 1 conv, runs FSFN on the
merged map and adds the block input back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from foam import nn
from foam import spectral as S
from foam import tensor as T
from foam.nn import Conv2dParams, DDConvParams, SigmaParams
from foam.spectral import ComplexSpectrum
from foam.tensor import Tensor

MAX_FREQ_TOKENS = 4096
FFT_NORMS = ("backward", "ortho")


@dataclass
class SdcaParams:
    embed_q: Conv2dParams
    embed_k: Conv2dParams
    embed_v: Conv2dParams
    q3: DDConvParams
    q5: DDConvParams
    k3: DDConvParams
    k5: DDConvParams
    v3: DDConvParams
    v5: DDConvParams
    res3: DDConvParams
    res5: DDConvParams
    fuse: Conv2dParams


@dataclass
class FdbaParams:
    sigma: SigmaParams
    fuse: Conv2dParams


@dataclass
class FsfnParams:
    gate: DDConvParams  # DD_3^C on the input
    sigma1: SigmaParams  # stage-1 spectral gate, C channels
    sigma2: SigmaParams  # stage-2 spectral gate, 2C channels
    joint: DDConvParams  # DD_3 on the 2C joint feature, 2C -> C
    fuse: Conv2dParams  # 3C -> C


@dataclass
class FstbParams:
    sdca: SdcaParams
    fdba: FdbaParams
    fsfn: FsfnParams
    combine: Conv2dParams  # 2C -> C merge of SDCA and FDBA outputs
    fft_norm: str = field(default="backward")
    residual: bool = field(default=True)

    @property
    def channels(self) -> int:
        return self.combine.weight.shape[0]


# -- construction ---------------------------------------------------------------
def init_sdca(c: int, rng, dilation: int = nn.DEFAULT_DILATION, dtype=np.float64) -> SdcaParams:
    if c % 2:
        raise ValueError(f"SDCA splits channels in halves; C must be even, got {c}")
    h = c // 2
    return SdcaParams(
        embed_q=nn.make_conv(c, c, 1, rng, dtype=dtype),
        embed_k=nn.make_conv(c, c, 1, rng, dtype=dtype),
        embed_v=nn.make_conv(c, c, 1, rng, dtype=dtype),
        q3=nn.make_dd(c, h, 3, rng, dilation, dtype),
        q5=nn.make_dd(c, h, 5, rng, dilation, dtype),
        k3=nn.make_dd(c, h, 3, rng, dilation, dtype),
        k5=nn.make_dd(c, h, 5, rng, dilation, dtype),
        v3=nn.make_dd(c, h, 3, rng, dilation, dtype),
        v5=nn.make_dd(c, h, 5, rng, dilation, dtype),
        res3=nn.make_dd(c, h, 3, rng, dilation, dtype),
        res5=nn.make_dd(c, h, 5, rng, dilation, dtype),
        fuse=nn.make_conv(2 * c, c, 1, rng, dtype=dtype),
    )


def init_fdba(c: int, rng, dtype=np.float64) -> FdbaParams:
    return FdbaParams(nn.make_sigma(c, rng, dtype), nn.make_conv(2 * c, c, 1, rng, dtype=dtype))


def init_fsfn(c: int, rng, dilation: int = nn.DEFAULT_DILATION, dtype=np.float64) -> FsfnParams:
    return FsfnParams(
        gate=nn.make_dd(c, c, 3, rng, dilation, dtype),
        sigma1=nn.make_sigma(c, rng, dtype),
        sigma2=nn.make_sigma(2 * c, rng, dtype),
        joint=nn.make_dd(2 * c, c, 3, rng, dilation, dtype),
        fuse=nn.make_conv(3 * c, c, 1, rng, dtype=dtype),
    )


def init_fstb(
    c: int,
    seed,
    dilation: int = nn.DEFAULT_DILATION,
    dtype=np.float64,
    fft_norm: str = "backward",
    residual: bool = True,
    zero_init_out: bool = False,
) -> FstbParams:
    """Random block parameters; ``zero_init_out`` zeroes the last FSFN fuse so a residual block starts as identity."""
    if fft_norm not in FFT_NORMS:
        raise ValueError(f"fft_norm must be one of {FFT_NORMS}, got {fft_norm!r}")
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    params = FstbParams(
        sdca=init_sdca(c, rng, dilation, dtype),
        fdba=init_fdba(c, rng, dtype),
        fsfn=init_fsfn(c, rng, dilation, dtype),
        combine=nn.make_conv(2 * c, c, 1, rng, dtype=dtype),
        fft_norm=fft_norm,
        residual=residual,
    )
    if zero_init_out:
        params.fsfn.fuse.weight.data[...] = 0.0
    return params


# -- helpers ---------------------------------------------------------------------
def _cat(*xs: Tensor) -> Tensor:
    return T.concat(xs, axis=-3)


def _flatten(x: Tensor) -> Tensor:
    return T.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def _swap(x: Tensor) -> Tensor:
    return T.swapaxes(x, -1, -2)


def _fft(x: Tensor, norm: str) -> ComplexSpectrum:
    s = S.fft2(x)
    if norm == "ortho":
        k = 1.0 / math.sqrt(x.shape[-2] * x.shape[-1])
        s = ComplexSpectrum(s.real * k, s.imag * k)
    return s


def _ifft(s: ComplexSpectrum, norm: str) -> ComplexSpectrum:
    out = S.ifft2(s)
    if norm == "ortho":
        k = math.sqrt(s.shape[-2] * s.shape[-1])
        out = ComplexSpectrum(out.real * k, out.imag * k)
    return out


def _dual(x: Tensor, a: DDConvParams, b: DDConvParams) -> Tensor:
    return _cat(nn.dd_conv(x, a), nn.dd_conv(x, b))


# -- sub-blocks ------------------------------------------------------------------
def sdca_forward(p_in: Tensor, params: SdcaParams, return_attention: bool = False):
    """Channel self-attention in the spatial domain.

    Q, K, V each come from their own 1x1 embedding followed by a
    {DD_3, DD_5} pair producing C/2 channels apiece. The C x C attention map
    is softmax(Q K^T / sqrt(N)) over flattened spatial positions.
    """
    c, h, w = p_in.shape[-3:]
    if c % 2:
        raise ValueError(f"SDCA needs an even channel count, got {c}")
    q = _dual(nn.conv2d(p_in, params.embed_q), params.q3, params.q5)
    k = _dual(nn.conv2d(p_in, params.embed_k), params.k3, params.k5)
    v = _dual(nn.conv2d(p_in, params.embed_v), params.v3, params.v5)
    qf, kf, vf = _flatten(q), _flatten(k), _flatten(v)
    attn = T.softmax(T.matmul(qf, _swap(kf)) * (1.0 / math.sqrt(h * w)), axis=-1)
    attended = T.reshape(T.matmul(attn, vf), p_in.shape)
    residual = _dual(p_in, params.res3, params.res5)
    out = nn.conv2d(_cat(attended, residual), params.fuse)
    return (out, attn) if return_attention else out


def fdba_forward(
    p_in: Tensor,
    params: FdbaParams,
    fft_norm: str = "backward",
    max_tokens: int = MAX_FREQ_TOKENS,
    return_intermediates: bool = False,
):
    """Self-attention across frequency bins of the magnitude spectrum.

    The magnitude spectrum serves as query, key and value at once; the N x N
    map is softmax(M^T M / sqrt(C)). The attended magnitude is recombined with
    the input phase (passed through unchanged) and inverse transformed.
    """
    c, h, w = p_in.shape[-3:]
    n = h * w
    if n > max_tokens:
        raise ValueError(
            f"FDBA attention over {n} frequency bins exceeds the cap of {max_tokens}; "
            "downsample the feature map or apply the block at a coarser level"
        )
    spec = _fft(p_in, fft_norm)
    mag = S.magnitude(spec)
    ph = S.phase(spec)
    mf = _flatten(mag)  # ... x C x N
    attn = T.softmax(T.matmul(_swap(mf), mf) * (1.0 / math.sqrt(c)), axis=-1)  # ... x N x N
    refined = T.reshape(_swap(T.matmul(attn, _swap(mf))), mag.shape)
    corrected = _ifft(S.polar_recombine(refined, ph), fft_norm).real
    freq_res = _ifft(nn.sigma_block(spec, params.sigma), fft_norm).real
    out = nn.conv2d(_cat(corrected, freq_res), params.fuse)
    if return_intermediates:
        return out, {"attention": attn, "phase": ph, "magnitude": mag}
    return out


def fsfn_forward(p_in: Tensor, params: FsfnParams, fft_norm: str = "backward") -> Tensor:
    """Two-stage gated feed-forward network over spectral and spatial paths."""
    spec = _fft(p_in, fft_norm)
    gated = S.magnitude(nn.sigma_block(spec, params.sigma1) * spec)
    freq1 = T.gelu(gated) * gated
    spat = nn.dd_conv(p_in, params.gate)
    spat1 = T.gelu(spat) * spat
    joint = _cat(spat1, freq1)  # 2C

    jspec = _fft(joint, fft_norm)
    freq2 = S.magnitude(_ifft(nn.sigma_block(jspec, params.sigma2) * jspec, fft_norm))  # 2C
    spat2 = nn.dd_conv(joint, params.joint)  # C
    return nn.conv2d(_cat(freq2, spat2), params.fuse)


def fstb_forward(p_in: Tensor, params: FstbParams) -> Tensor:
    """SDCA and FDBA in parallel, merged, refined by FSFN, plus the block input."""
    ps = sdca_forward(p_in, params.sdca)
    pf = fdba_forward(p_in, params.fdba, params.fft_norm)
    merged = nn.conv2d(_cat(ps, pf), params.combine)
    out = fsfn_forward(merged, params.fsfn, params.fft_norm)
    return out + p_in if params.residual else out


def fstb_stack(f0: Tensor, params: list[FstbParams]) -> list[Tensor]:
    """Cascade independent blocks and return every stage output F^1..F^N."""
    if not params:
        raise ValueError("fstb_stack needs at least one block")
    outs = []
    x = f0
    for p in params:
        x = fstb_forward(x, p)
        outs.append(x)
    return outs
