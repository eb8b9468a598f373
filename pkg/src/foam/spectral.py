"""2-D discrete Fourier transforms, magnitude/phase decomposition, band energy.

Conventions: the forward transform is unnormalized and the inverse carries the
1/(HW) factor. Transforms act on the last two axes, so a ``C x H x W`` tensor
is transformed channel by channel (and a leading batch axis is allowed too).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from foam import tensor as T
from foam.tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_BAND_EDGES = (0.0625, 0.25)


@dataclass
class ComplexSpectrum:
    """A complex field stored as separate real and imaginary tensors."""

    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ValueError(f"real {self.real.shape} and imag {self.imag.shape} shapes differ")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.real.shape

    def to_complex(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data

    @classmethod
    def from_complex(cls, z: np.ndarray, dtype=np.float64) -> "ComplexSpectrum":
        return cls(Tensor(z.real.astype(dtype)), Tensor(z.imag.astype(dtype)))

    def __mul__(self, other: "ComplexSpectrum") -> "ComplexSpectrum":
        """Elementwise complex product."""
        a, b, c, d = self.real, self.imag, other.real, other.imag
        return ComplexSpectrum(a * c - b * d, a * d + b * c)


@dataclass
class BandEnergyReport:
    fractions: list[float]
    edges: list[float]

    def to_dict(self) -> dict:
        return {"fractions": list(self.fractions), "edges": list(self.edges)}


# -- array-level transforms ------------------------------------------------
def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(size: int, sign: int) -> np.ndarray:
    return np.exp(sign * 2j * np.pi * np.arange(size // 2) / size)


def fft_radix2(z: np.ndarray, sign: int = -1) -> np.ndarray:
    """Unnormalized iterative radix-2 DFT along the last axis.

    ``sign=-1`` gives the forward kernel exp(-j2pi kn/N), ``sign=+1`` the inverse
    kernel without the 1/N factor. Butterflies of one stage run vectorized.
    """
    n = z.shape[-1]
    if not is_power_of_two(n):
        raise ValueError(f"radix-2 FFT needs a power-of-two length, got {n}")
    lead = z.shape[:-1]
    a = np.asarray(z, dtype=np.complex128)[..., _bit_reverse_indices(n)]
    b = np.empty_like(a)
    size = 2
    while size <= n:
        half = size // 2
        src = a.reshape(*lead, n // size, size)
        dst = b.reshape(*lead, n // size, size)
        even = src[..., :half]
        odd = src[..., half:] * _twiddles(size, sign)
        np.add(even, odd, out=dst[..., :half])
        np.subtract(even, odd, out=dst[..., half:])
        a, b = b, a
        size *= 2
    return a


def _dft2_literal(z: np.ndarray, sign: int) -> np.ndarray:
    """Direct double sum over (h, w) for every (u, v); O((HW)^2)."""
    z = np.asarray(z, dtype=np.complex128)
    h_, w_ = z.shape[-2:]
    hh = np.arange(h_)[:, None]
    ww = np.arange(w_)[None, :]
    out = np.empty(z.shape, dtype=np.complex128)
    for u in range(h_):
        for v in range(w_):
            kernel = np.exp(sign * 2j * np.pi * (hh * u / h_ + ww * v / w_))
            out[..., u, v] = (z * kernel).sum(axis=(-2, -1))
    return out


def _raw2(z: np.ndarray, sign: int) -> np.ndarray:
    """Unnormalized 2-D transform over the last two axes, fast path when possible."""
    h_, w_ = z.shape[-2:]
    if is_power_of_two(h_) and is_power_of_two(w_):
        out = fft_radix2(z, sign)
        out = np.swapaxes(fft_radix2(np.swapaxes(out, -1, -2), sign), -1, -2)
        return out
    logger.info("FFT fast path needs power-of-two sizes; using direct DFT for %dx%d", h_, w_)
    return _dft2_literal(z, sign)


# -- differentiable transforms ---------------------------------------------
def _transform(re: Tensor, im: Tensor | None, inverse: bool) -> ComplexSpectrum:
    z = re.data if im is None else re.data + 1j * im.data
    h_, w_ = re.shape[-2:]
    scale = 1.0 / (h_ * w_) if inverse else 1.0
    sign = 1 if inverse else -1
    out = _raw2(z, sign) * scale
    dtype = re.dtype
    stacked = np.stack([out.real, out.imag]).astype(dtype)
    parents = (re,) if im is None else (re, im)

    def grad_fn(g):
        adj = _raw2(g[0] + 1j * g[1], -sign) * scale
        if im is None:
            return (adj.real.astype(dtype),)
        return adj.real.astype(dtype), adj.imag.astype(dtype)

    both = Tensor._wrap(stacked, parents, grad_fn, "ifft2" if inverse else "fft2")
    return ComplexSpectrum(both[0], both[1])


def fft2(x: Tensor | ComplexSpectrum) -> ComplexSpectrum:
    """Forward 2-D DFT, F(u,v) = sum_hw x(h,w) exp(-j2pi(hu/H + wv/W))."""
    if isinstance(x, ComplexSpectrum):
        return _transform(x.real, x.imag, inverse=False)
    x = T.as_tensor(x)
    if x.ndim < 2 or min(x.shape[-2:]) < 1:
        raise ValueError(f"fft2 needs at least 2-D input, got {x.shape}")
    return _transform(x, None, inverse=False)


def ifft2(s: ComplexSpectrum, real: bool = False) -> ComplexSpectrum | Tensor:
    """Inverse 2-D DFT with the 1/(HW) factor; ``real=True`` keeps the real part only."""
    out = _transform(s.real, s.imag, inverse=True)
    return out.real if real else out


def dft2_naive(x) -> ComplexSpectrum:
    """Literal evaluation of the forward double sum; a testing oracle (no gradients)."""
    arr = x.to_complex() if isinstance(x, ComplexSpectrum) else np.asarray(getattr(x, "data", x))
    return ComplexSpectrum.from_complex(_dft2_literal(arr, -1))


def idft2_naive(s) -> ComplexSpectrum:
    arr = s.to_complex() if isinstance(s, ComplexSpectrum) else np.asarray(s)
    h_, w_ = arr.shape[-2:]
    return ComplexSpectrum.from_complex(_dft2_literal(arr, 1) / (h_ * w_))


# -- decomposition -----------------------------------------------------------
def magnitude(s: ComplexSpectrum) -> Tensor:
    return T.modulus(s.real, s.imag)


def phase(s: ComplexSpectrum) -> Tensor:
    return T.atan2(s.imag, s.real)


def polar_recombine(m: Tensor, p: Tensor) -> ComplexSpectrum:
    return ComplexSpectrum(m * T.cos(p), m * T.sin(p))


def _roll2(x: Tensor, dy: int, dx: int) -> Tensor:
    out = np.roll(x.data, (dy, dx), axis=(-2, -1))
    return Tensor._wrap(out, (x,), lambda g: (np.roll(g, (-dy, -dx), axis=(-2, -1)),), "roll")


def fftshift(s: ComplexSpectrum) -> ComplexSpectrum:
    """Move the DC bin to the center (index H//2, W//2)."""
    h_, w_ = s.shape[-2:]
    return ComplexSpectrum(_roll2(s.real, h_ // 2, w_ // 2), _roll2(s.imag, h_ // 2, w_ // 2))


def radial_frequency(h_: int, w_: int) -> np.ndarray:
    """Normalized radial frequency of every (unshifted) bin, in [0, sqrt(2)/2]."""
    fu = np.fft.fftfreq(h_)[:, None]
    fv = np.fft.fftfreq(w_)[None, :]
    return np.sqrt(fu * fu + fv * fv)


def band_energy(s: ComplexSpectrum, edges: Sequence[float] = DEFAULT_BAND_EDGES) -> BandEnergyReport:
    """Share of squared-magnitude energy per radial band.

    Bands are ``[0, e1), [e1, e2), ..., [e_k, inf)``; channels are pooled.
    """
    edges = [float(e) for e in edges]
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"band edges must be strictly increasing, got {edges}")
    if edges and (edges[0] <= 0 or edges[-1] > math.sqrt(2) / 2 + 1e-12):
        raise ValueError(f"band edges must lie in (0, sqrt(2)/2], got {edges}")
    h_, w_ = s.shape[-2:]
    power = s.real.data.astype(np.float64) ** 2 + s.imag.data.astype(np.float64) ** 2
    power = power.reshape(-1, h_, w_).sum(axis=0)
    band = np.digitize(radial_frequency(h_, w_), edges)
    totals = np.bincount(band.ravel(), weights=power.ravel(), minlength=len(edges) + 1)
    total = totals.sum()
    if total <= 0:
        fractions = [0.0] * len(totals)
    else:
        fractions = [float(t / total) for t in totals]
    return BandEnergyReport(fractions, edges)
