"""Ready-made gradient checks for the differentiable components.

Every check builds a small float64 problem (C=4 channels on an 8x8 grid),
reduces the component output to a scalar with a fixed random projection and
compares analytic against central-difference gradients.

Blocks that transform to the frequency domain use the orthonormal FFT
scaling (the training configuration). With the unnormalized forward transform
an FSTB objective reaches 1e3-1e4 while some parameter gradients are around
1e-5, so a fixed step of 1e-5 loses most significant digits to cancellation.

Instance-norm scale/shift parameters are jittered away from their identity
initialisation. With shift = 0 the normalized imaginary part of a real
signal's spectrum sits exactly on the ReLU kink at the self-conjugate bins,
where a finite-difference probe is meaningless.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from foam import fstb as F
from foam import hdc
from foam import nn
from foam import spectral as S
from foam import tensor as T
from foam.gradcheck import GradReport, gradcheck
from foam.tensor import Tensor

COMPONENTS = ("conv2d", "dd_conv", "sigma", "sdca", "fdba", "fsfn", "fstb", "loss_type1", "loss_type2")
CLI_GROUPS = {"sdca": ["sdca"], "fdba": ["fdba"], "fsfn": ["fsfn"], "fstb": ["fstb"], "sigma": ["sigma"]}

CHANNELS = 4
SIDE = 8
FFT_NORM = "ortho"


def jitter_norms(obj, rng: np.random.Generator) -> None:
    """Move every SigmaParams scale/shift off (1, 0) so no ReLU input sits on the kink."""
    for name, p in nn.named_parameters(obj):
        if name.endswith("scale"):
            p.data[...] = 1.0 + 0.3 * rng.standard_normal(p.shape)
        elif name.endswith("shift"):
            p.data[...] = 0.5 * rng.standard_normal(p.shape)


def _projected(fn: Callable[[], Tensor], shape, rng) -> Callable[[], Tensor]:
    proj = Tensor(rng.standard_normal(shape))
    return lambda: T.tsum(fn() * proj)


def _problem(name: str, seed: int, fft_norm: str = FFT_NORM):
    """Return (scalar closure, named parameter dict) for one component."""
    rng = np.random.default_rng(seed)
    c, s = CHANNELS, SIDE
    x = Tensor(rng.standard_normal((c, s, s)), requires_grad=True)

    if name == "conv2d":
        p = nn.make_conv(c, c, 3, rng, dilation=2)
        fn = lambda: nn.conv2d(x, p)
        params = p
    elif name == "dd_conv":
        p = nn.make_dd(c, c, 3, rng, 2)
        fn = lambda: nn.dd_conv(x, p)
        params = p
    elif name == "sigma":
        p = nn.make_sigma(c, rng)
        im = Tensor(rng.standard_normal((c, s, s)), requires_grad=True)
        jitter_norms(p, rng)

        def fn():
            out = nn.sigma_block(S.ComplexSpectrum(x, im), p)
            return T.concat([out.real, out.imag], axis=0)

        return _projected(fn, (2 * c, s, s), rng), {"input.re": x, "input.im": im, **_named(p)}
    elif name == "sdca":
        p = F.init_sdca(c, rng)
        fn = lambda: F.sdca_forward(x, p)
        params = p
    elif name == "fdba":
        p = F.init_fdba(c, rng)
        jitter_norms(p, rng)
        fn = lambda: F.fdba_forward(x, p, fft_norm)
        params = p
    elif name == "fsfn":
        p = F.init_fsfn(c, rng)
        jitter_norms(p, rng)
        fn = lambda: F.fsfn_forward(x, p, fft_norm)
        params = p
    elif name == "fstb":
        p = F.init_fstb(c, rng, fft_norm=fft_norm)
        jitter_norms(p, rng)
        fn = lambda: F.fstb_forward(x, p)
        params = p
    elif name in ("loss_type1", "loss_type2"):
        cfg = hdc.ConsistentLossConfig(loss_type="I" if name == "loss_type1" else "II",
                                       target_layers=[1, 2], detach_base=False)
        shapes = [(c, s, s), (c, s // 2, s // 2)]
        base = [[Tensor(rng.standard_normal(sh), requires_grad=True) for sh in shapes] for _ in range(2)]
        corr = [[Tensor(rng.standard_normal(sh), requires_grad=True) for sh in shapes] for _ in range(2)]
        named = {f"base.{n}.{l}": t for n, st in enumerate(base) for l, t in enumerate(st)}
        named.update({f"corrupted.{n}.{l}": t for n, st in enumerate(corr) for l, t in enumerate(st)})
        # stage 0 of the corrupted branch and the last base stage never reach the loss
        named = {k: v for k, v in named.items() if k not in ("corrupted.0.0", "corrupted.0.1", "base.1.0", "base.1.1")}
        return (lambda: hdc.consistent_loss(base, corr, cfg)), named
    else:
        raise ValueError(f"unknown component {name!r}; choose from {COMPONENTS}")

    out_shape = fn().shape
    return _projected(fn, out_shape, rng), {"input": x, **_named(params)}


def _named(obj) -> dict[str, Tensor]:
    return dict(nn.named_parameters(obj))


def check_component(name: str, tol: float = 1e-3, seed: int = 0, h: float = 1e-5,
                    max_elements: int | None = 24, fft_norm: str = FFT_NORM) -> GradReport:
    f, params = _problem(name, seed, fft_norm)
    return gradcheck(f, params, tol=tol, h=h, max_elements=max_elements, seed=seed)


def resolve_components(choice: str) -> list[str]:
    if choice == "all":
        return list(COMPONENTS)
    if choice in CLI_GROUPS:
        return CLI_GROUPS[choice]
    if choice in COMPONENTS:
        return [choice]
    raise ValueError(f"unknown component {choice!r}")
