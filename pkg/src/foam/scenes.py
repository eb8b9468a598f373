"""Procedural overlapping pseudo-X-ray scenes with foreground masks.

Image formation follows exponential attenuation: every layer contributes an
attenuation map and the recorded transmittance is ``exp(-sum(mu))``, so any
overlap darkens the pixel and lowers foreground contrast.

Foreground objects (ellipses, rotated bars, L-shaped tools) carry striped
sinusoidal textures; background clutter is soft blobs, a smooth gradient and
thin wires. Each scene is redrawn (with a derived seed) until the share of
foreground pixels covered by clutter lands inside ``overlap_range``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from foam.io import save_tensor
from foam.tensor import Tensor

MAX_REDRAWS = 64


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    n_foreground: tuple[int, int] = (1, 2)
    n_background: tuple[int, int] = (2, 4)
    n_wires: tuple[int, int] = (0, 2)
    texture_freq: tuple[float, float] = (0.15, 0.3)  # cycles per pixel
    texture_depth: tuple[float, float] = (0.5, 0.9)
    fg_attenuation: tuple[float, float] = (0.5, 1.0)
    bg_attenuation: tuple[float, float] = (0.3, 0.9)
    fg_size: tuple[float, float] = (0.12, 0.25)  # fraction of the image side
    bg_size: tuple[float, float] = (0.15, 0.35)
    overlap_range: tuple[float, float] = (0.1, 0.9)
    seed: int = 0

    def validate(self) -> "SceneConfig":
        for side in (self.height, self.width):
            if side < 32 or side & (side - 1):
                raise ValueError(f"scene sides must be powers of two >= 32, got {self.height}x{self.width}")
        for name in ("n_foreground", "n_background", "n_wires", "texture_freq", "texture_depth",
                     "fg_attenuation", "bg_attenuation", "fg_size", "bg_size", "overlap_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"{name} range is empty: {lo}..{hi}")
        if self.n_foreground[0] < 0 or self.n_background[0] < 0:
            raise ValueError("object counts must be nonnegative")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        kw = {}
        for k, v in d.items():
            if k not in cls.__dataclass_fields__:
                raise KeyError(f"unknown scene option {k!r}")
            kw[k] = tuple(v) if isinstance(v, (list, tuple)) else v
        return cls(**kw)


@dataclass
class Scene:
    image: Tensor  # 1 x H x W transmittance in [0, 1]
    mask: Tensor  # 1 x H x W in {0, 1}
    meta: dict = field(default_factory=dict)


def composite_transmittance(layers: Sequence[np.ndarray], shape: tuple[int, ...] | None = None) -> np.ndarray:
    """exp(-sum of attenuation maps); an empty stack gives all ones."""
    if not layers:
        if shape is None:
            raise ValueError("shape is required when no layers are given")
        return np.ones(shape)
    total = np.zeros_like(np.asarray(layers[0], dtype=np.float64))
    for mu in layers:
        total = total + np.asarray(mu, dtype=np.float64)
    return np.exp(-total)


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    return np.mgrid[0:h, 0:w].astype(np.float64)


def _rotated(yy, xx, cy, cx, theta):
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    return dx * c + dy * s, -dx * s + dy * c


def _ellipse(yy, xx, cy, cx, ry, rx, theta) -> np.ndarray:
    u, v = _rotated(yy, xx, cy, cx, theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _rect(yy, xx, cy, cx, hy, hx, theta) -> np.ndarray:
    u, v = _rotated(yy, xx, cy, cx, theta)
    return (np.abs(u) <= hx) & (np.abs(v) <= hy)


def _foreground_shape(rng, yy, xx, h, w, cfg: SceneConfig) -> np.ndarray:
    side = min(h, w)
    size = rng.uniform(*cfg.fg_size) * side
    cy, cx = rng.uniform(0.2 * h, 0.8 * h), rng.uniform(0.2 * w, 0.8 * w)
    theta = rng.uniform(0, math.pi)
    kind = rng.integers(3)
    if kind == 0:
        return _ellipse(yy, xx, cy, cx, size, size * rng.uniform(0.4, 0.9), theta)
    if kind == 1:
        return _rect(yy, xx, cy, cx, size * 0.35, size * 1.2, theta)
    # L-shaped tool: a long bar plus a perpendicular stub at one end
    bar = _rect(yy, xx, cy, cx, size * 0.25, size, theta)
    ex = cx + size * math.cos(theta)
    ey = cy + size * math.sin(theta)
    stub = _rect(yy, xx, ey + 0.5 * size * math.cos(theta), ex - 0.5 * size * math.sin(theta),
                 size * 0.5, size * 0.25, theta)
    return bar | stub


def _stripes(rng, yy, xx, cfg: SceneConfig) -> np.ndarray:
    f = rng.uniform(*cfg.texture_freq)
    theta = rng.uniform(0, math.pi)
    phi = rng.uniform(0, 2 * math.pi)
    depth = rng.uniform(*cfg.texture_depth)
    wave = np.sin(2 * math.pi * f * (xx * math.cos(theta) + yy * math.sin(theta)) + phi)
    return 1.0 + depth * wave


def _render(cfg: SceneConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float]:
    h, w = cfg.height, cfg.width
    yy, xx = _grid(h, w)
    layers = []
    mask = np.zeros((h, w), dtype=bool)

    for _ in range(int(rng.integers(cfg.n_foreground[0], cfg.n_foreground[1] + 1))):
        support = _foreground_shape(rng, yy, xx, h, w, cfg)
        mu = rng.uniform(*cfg.fg_attenuation) * _stripes(rng, yy, xx, cfg)
        layers.append(np.where(support, mu, 0.0))
        mask |= support

    clutter = np.zeros((h, w), dtype=bool)
    side = min(h, w)
    for _ in range(int(rng.integers(cfg.n_background[0], cfg.n_background[1] + 1))):
        r = rng.uniform(*cfg.bg_size) * side
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = r, r * rng.uniform(0.5, 1.0)
        u, v = _rotated(yy, xx, cy, cx, rng.uniform(0, math.pi))
        d2 = (u / rx) ** 2 + (v / ry) ** 2
        blob = np.exp(-2.0 * d2) * (d2 <= 1.0)
        layers.append(rng.uniform(*cfg.bg_attenuation) * blob)
        clutter |= d2 <= 1.0

    for _ in range(int(rng.integers(cfg.n_wires[0], cfg.n_wires[1] + 1))):
        theta = rng.uniform(0, math.pi)
        offset = rng.uniform(-0.3, 0.3) * side
        u, v = _rotated(yy, xx, h / 2, w / 2, theta)
        wire = np.abs(v - offset) <= 0.75
        layers.append(rng.uniform(*cfg.bg_attenuation) * wire)
        clutter |= wire

    # smooth low-frequency background gradient
    gtheta = rng.uniform(0, 2 * math.pi)
    ramp = (xx * math.cos(gtheta) + yy * math.sin(gtheta)) / side
    ramp = (ramp - ramp.min()) * rng.uniform(0.05, 0.25)
    layers.append(ramp)

    image = composite_transmittance(layers, (h, w))
    overlap = float((mask & clutter).sum() / mask.sum()) if mask.any() else 0.0
    return image, mask, overlap


def gen_scene(cfg: SceneConfig, seed: int | None = None) -> Scene:
    """Render one scene; identical (cfg, seed) pairs give bitwise-identical scenes."""
    cfg.validate()
    seed = cfg.seed if seed is None else int(seed)
    lo, hi = cfg.overlap_range
    image = mask = None
    overlap = 0.0
    attempt = 0
    for attempt in range(MAX_REDRAWS):
        rng = np.random.default_rng([seed, attempt])
        image, mask, overlap = _render(cfg, rng)
        if not mask.any() or lo <= overlap <= hi:
            break
    h, w = cfg.height, cfg.width
    return Scene(
        Tensor(np.clip(image, 0.0, 1.0).reshape(1, h, w).astype(np.float32)),
        Tensor(mask.reshape(1, h, w).astype(np.float32)),
        {"seed": seed, "redraws": attempt, "overlap": overlap, "objects": int(mask.any())},
    )


def scene_seeds(base_seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(base_seed).generate_state(count, dtype=np.uint32)]


def effective_seed(seed: int) -> int:
    """``FOAM_SEED`` from the environment when set, else ``seed``."""
    env = os.environ.get("FOAM_SEED", "").strip()
    return int(env) if env else int(seed)


def gen_dataset(cfg: SceneConfig, count: int, out_dir, seed: int | None = None) -> dict:
    """Write ``count`` scenes as tensor binaries plus ``manifest.json``.

    An explicit ``seed`` wins; otherwise ``FOAM_SEED`` overrides ``cfg.seed``.
    """
    cfg.validate()
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    base = int(seed) if seed is not None else effective_seed(cfg.seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = scene_seeds(base, count)
    entries = []
    for i, s in enumerate(seeds):
        scene = gen_scene(cfg, s)
        img_name, mask_name = f"scene_{i:05d}.img.tns", f"scene_{i:05d}.mask.tns"
        save_tensor(out / img_name, scene.image)
        save_tensor(out / mask_name, scene.mask)
        entries.append({"index": i, "seed": s, "image": img_name, "mask": mask_name,
                        "overlap": round(scene.meta["overlap"], 6)})
    config = asdict(cfg)
    config["seed"] = base
    manifest = {"format": "foam-scenes/1", "count": count, "config": config, "scenes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_dataset(directory) -> tuple[np.ndarray, np.ndarray, dict]:
    """Return stacked images and masks (count x 1 x H x W, float32) and the manifest."""
    from foam.io import load_tensor

    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("count") != len(manifest.get("scenes", [])):
        raise ValueError("manifest count does not match its scene list")
    imgs = np.stack([load_tensor(d / e["image"]) for e in manifest["scenes"]])
    masks = np.stack([load_tensor(d / e["mask"]) for e in manifest["scenes"]])
    return imgs, masks, manifest


def make_arrays(cfg: SceneConfig, count: int, seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """In-memory equivalent of gen_dataset + load_dataset."""
    seeds = scene_seeds(cfg.seed if seed is None else seed, count)
    scenes = [gen_scene(cfg, s) for s in seeds]
    return np.stack([s.image.data for s in scenes]), np.stack([s.mask.data for s in scenes])
