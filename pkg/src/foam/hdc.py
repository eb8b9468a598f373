"""Hierarchical de-corrupting: corruptions, dual-branch features, consistent losses.

During training the clean image and a corrupted copy run through the same
backbone and the same cascade of blocks. Stage ``n`` of the corrupted branch
is then pulled towards stage ``n - 1`` of the clean branch on the target
pyramid levels.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from foam import tensor as T
from foam.tensor import Tensor

CORRUPTIONS = ("GB", "DU", "GN")

_guard = threading.local()


@contextlib.contextmanager
def corruption_forbidden():
    """Inside this block any call to ``corrupt`` raises; wraps the inference path."""
    prev = getattr(_guard, "active", False)
    _guard.active = True
    try:
        yield
    finally:
        _guard.active = prev

# stages[n][l]: pyramid level l (0-based) after n blocks; stage 0 is the backbone output.
FeaturePyramid = list[list[Tensor]]


@dataclass
class CorruptionConfig:
    kind: str = "GB"
    gb_kernel_size: int = 3
    gb_sigma: float = 5.0
    du_factor: int = 4
    gn_sigma: float = 0.2
    seed: int = 0

    def validate(self) -> "CorruptionConfig":
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"corruption kind must be one of {CORRUPTIONS}, got {self.kind!r}")
        if self.gb_kernel_size < 1 or self.gb_kernel_size % 2 == 0:
            raise ValueError(f"gb_kernel_size must be a positive odd int, got {self.gb_kernel_size}")
        if self.gb_sigma <= 0:
            raise ValueError("gb_sigma must be positive")
        if self.du_factor < 2:
            raise ValueError("du_factor must be at least 2")
        if self.gn_sigma < 0:
            raise ValueError("gn_sigma must be nonnegative")
        return self


@dataclass
class ConsistentLossConfig:
    loss_type: str = "I"
    target_layers: list[int] = field(default_factory=lambda: [2, 3])  # 1-based levels
    weight: float = 1.0
    detach_base: bool = True
    update_backbone: bool = True  # False: the consistent loss reaches the blocks but not the backbone

    def validate(self, num_levels: int | None = None) -> "ConsistentLossConfig":
        if self.loss_type not in ("I", "II"):
            raise ValueError(f"loss_type must be 'I' or 'II', got {self.loss_type!r}")
        if not self.target_layers:
            raise ValueError("target layer set must be nonempty")
        if self.weight <= 0:
            raise ValueError("consistent-loss weight must be positive")
        if num_levels is not None:
            bad = [l for l in self.target_layers if not 1 <= l <= num_levels]
            if bad:
                raise ValueError(f"target layers {bad} do not exist in a {num_levels}-level pyramid")
        return self


def top_levels(num_levels: int, k: int) -> list[int]:
    """The ``k`` highest (coarsest) 1-based level indices."""
    return list(range(num_levels - k + 1, num_levels + 1))


# -- corruption operators (plain arrays, no gradients) ---------------------------
def gaussian_kernel(ks: int, sigma: float) -> np.ndarray:
    r = np.arange(ks) - (ks - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, ks: int, sigma: float) -> np.ndarray:
    """Reflect-padded convolution over the last two axes with a normalized kernel."""
    k = gaussian_kernel(ks, sigma)
    pad = ks // 2
    width = [(0, 0)] * (img.ndim - 2) + [(pad, pad), (pad, pad)]
    xp = np.pad(img, width, mode="reflect")
    h, w = img.shape[-2:]
    out = np.zeros_like(img, dtype=np.float64)
    for i in range(ks):
        for j in range(ks):
            out += k[i, j] * xp[..., i : i + h, j : j + w]
    return out


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resize of the last two axes with edge clamping."""
    h, w = img.shape[-2:]

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(out_h, h)
    x0, x1, fx = coords(out_w, w)
    top = img[..., y0, :][..., :, x0] * (1 - fx) + img[..., y0, :][..., :, x1] * fx
    bot = img[..., y1, :][..., :, x0] * (1 - fx) + img[..., y1, :][..., :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def down_up(img: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour downsample by ``factor``, bilinear upsample back."""
    h, w = img.shape[-2:]
    if factor > min(h, w):
        raise ValueError(f"du_factor {factor} exceeds image side {min(h, w)}")
    small = img[..., ::factor, ::factor]
    return _bilinear_resize(small, h, w)


def gaussian_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return np.clip(img + rng.normal(0.0, sigma, size=img.shape), 0.0, 1.0)


def corrupt(x, cfg: CorruptionConfig, rng: np.random.Generator | None = None) -> Tensor:
    """Apply one corruption to an image with values in [0, 1]; returns a new constant tensor."""
    if getattr(_guard, "active", False):
        raise RuntimeError("corruption requested on the inference path")
    cfg.validate()
    arr = np.asarray(x.data if isinstance(x, Tensor) else x)
    dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float64
    if cfg.kind == "GB":
        out = gaussian_blur(arr.astype(np.float64), cfg.gb_kernel_size, cfg.gb_sigma)
    elif cfg.kind == "DU":
        out = down_up(arr.astype(np.float64), cfg.du_factor)
    else:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        out = gaussian_noise(arr.astype(np.float64), cfg.gn_sigma, rng)
    return Tensor(out.astype(dtype))


# -- consistent losses ------------------------------------------------------------
def _check_pyramids(f_o: FeaturePyramid, f_c: FeaturePyramid, cfg: ConsistentLossConfig) -> int:
    if len(f_o) < 2 or len(f_c) != len(f_o):
        raise ValueError("pyramids need stages 0..N with N >= 1 and matching stage counts")
    levels = len(f_o[0])
    cfg.validate(levels)
    for n, (so, sc) in enumerate(zip(f_o, f_c)):
        if len(so) != levels or len(sc) != levels:
            raise ValueError(f"stage {n} level count differs")
        for l, (a, b) in enumerate(zip(so, sc)):
            if a.shape != b.shape:
                raise ValueError(f"stage {n} level {l + 1}: base {a.shape} vs corrupted {b.shape}")
    return len(f_o) - 1


def _target(t: Tensor, detach: bool) -> Tensor:
    return t.detach() if detach else t


def kl_spatial(target_logits: Tensor, pred_logits: Tensor) -> Tensor:
    """KL(target || pred) between per-channel spatial softmaxes, averaged over channels (and batch)."""
    lead = target_logits.shape[:-2]
    hw = target_logits.shape[-2] * target_logits.shape[-1]
    t = T.reshape(target_logits, lead + (hw,))
    p = T.reshape(pred_logits, lead + (hw,))
    log_t = T.log_softmax(t, axis=-1)
    log_p = T.log_softmax(p, axis=-1)
    per_channel = T.tsum(T.exp(log_t) * (log_t - log_p), axis=-1)
    return T.mean(per_channel)


def consistent_loss_type1(f_o: FeaturePyramid, f_c: FeaturePyramid, cfg: ConsistentLossConfig) -> Tensor:
    """Weighted sum over stages n and target levels of KL(softmax F_O^{n-1} || softmax F_C^n)."""
    n_stages = _check_pyramids(f_o, f_c, cfg)
    total = None
    for n in range(1, n_stages + 1):
        for l in cfg.target_layers:
            term = kl_spatial(_target(f_o[n - 1][l - 1], cfg.detach_base), f_c[n][l - 1])
            total = term if total is None else total + term
    return total * cfg.weight


def consistent_loss_type2(f_o: FeaturePyramid, f_c: FeaturePyramid, cfg: ConsistentLossConfig) -> Tensor:
    """Weighted sum over n and target levels of (1/HW) * sum of squared differences.

    The squared differences are summed over channel and spatial positions and
    divided by the spatial size only; a leading batch axis is averaged.
    """
    n_stages = _check_pyramids(f_o, f_c, cfg)
    total = None
    for n in range(1, n_stages + 1):
        for l in cfg.target_layers:
            a = _target(f_o[n - 1][l - 1], cfg.detach_base)
            b = f_c[n][l - 1]
            h, w = a.shape[-2:]
            sq = T.square(a - b)
            batch = a.shape[0] if a.ndim == 4 else 1
            term = T.tsum(sq) * (1.0 / (h * w * batch))
            total = term if total is None else total + term
    return total * cfg.weight


def consistent_loss(f_o: FeaturePyramid, f_c: FeaturePyramid, cfg: ConsistentLossConfig) -> Tensor:
    fn = consistent_loss_type1 if cfg.loss_type == "I" else consistent_loss_type2
    return fn(f_o, f_c, cfg)


# -- dual-branch step ---------------------------------------------------------------
@dataclass
class HdcResult:
    loss: Tensor
    base: FeaturePyramid
    corrupted: FeaturePyramid
    corrupted_input: Tensor


def hdc_step(
    x_orig,
    backbone: Callable[[Tensor], list[Tensor]],
    refine: Callable[[list[Tensor]], FeaturePyramid],
    corruption: CorruptionConfig,
    loss_cfg: ConsistentLossConfig,
    rng: np.random.Generator | None = None,
    base: FeaturePyramid | None = None,
) -> HdcResult:
    """Run both branches with shared parameters and return the consistent loss.

    ``backbone`` maps an image to the stage-0 levels; ``refine`` maps those to
    the full pyramid ``[stage0, stage1, ..., stageN]``, applying the block
    cascade to whichever levels it refines. A precomputed clean-branch pyramid
    may be passed as ``base`` to avoid recomputing it.
    """
    x_o = T.as_tensor(x_orig)
    x_c = corrupt(x_o, corruption, rng)
    if base is None:
        base = refine(backbone(x_o))
    levels = backbone(x_c)
    if not loss_cfg.update_backbone:
        levels = [t.detach() for t in levels]
    corrupted = refine(levels)
    loss = consistent_loss(base, corrupted, loss_cfg)
    return HdcResult(loss, base, corrupted, x_c)


def contour_contrast(f: float, b: float, c: float) -> tuple[float, float]:
    """Contour contrast (f+b)/b before and (f+b-c)/(b-c) after lowering the background response by c."""
    if not (f > 0 and b > 0 and 0 < c < b):
        raise ValueError(f"need f > 0, b > 0 and 0 < c < b; got f={f}, b={b}, c={c}")
    return (f + b) / b, (f + b - c) / (b - c)
