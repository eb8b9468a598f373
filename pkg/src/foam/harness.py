"""Toy segmentation model, training loop, evaluation and ablation runner.

The model is a small strided-by-pooling backbone producing an L-level
pyramid, optional FSTB cascades on the coarsest levels and a light head that
upsamples every level back to full resolution. Training optionally adds the
dual-branch consistent loss.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from foam import hdc
from foam import nn
from foam import tensor as T
from foam.fstb import FstbParams, fstb_forward, init_fstb
from foam.hdc import ConsistentLossConfig, CorruptionConfig
from foam.nn import Conv2dParams
from foam.scenes import SceneConfig, make_arrays
from foam.tensor import Tensor

logger = logging.getLogger(__name__)

HEAD_WIDTH = 8


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"non-finite loss at step {step}{': ' + detail if detail else ''}")
        self.step = step


# -- configuration -------------------------------------------------------------------
@dataclass
class TrainConfig:
    steps: int = 300
    epochs: int = 0  # when > 0, overrides steps with epochs * ceil(n_train / batch_size)
    batch_size: int = 8
    lr: float = 0.01
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 5.0
    seed: int = 0
    channels: int = 16
    levels: int = 3
    fstb_levels: int = 2  # FSTBs refine the top-k pyramid levels
    n_stages: int = 1
    fft_norm: str = "ortho"
    zero_init_fstb: bool = True
    dilation: int = 2
    enable_fstb: bool = True
    enable_hdc: bool = False
    n_train: int = 64
    n_test: int = 64
    data_seed: int = 1234
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    hdc: ConsistentLossConfig = field(default_factory=ConsistentLossConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)

    def validate(self) -> "TrainConfig":
        if self.enable_hdc and not self.enable_fstb:
            raise ValueError("enable_hdc requires enable_fstb")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not 1 <= self.fstb_levels <= self.levels:
            raise ValueError("fstb_levels must lie in 1..levels")
        if self.n_stages < 1:
            raise ValueError("n_stages must be >= 1")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size and lr must be positive")
        self.corruption.validate()
        self.hdc.validate(self.levels)
        self.scene.validate()
        return self

    @property
    def total_steps(self) -> int:
        if self.epochs > 0:
            return self.epochs * math.ceil(self.n_train / self.batch_size)
        return self.steps

    def refined_levels(self) -> list[int]:
        return hdc.top_levels(self.levels, self.fstb_levels) if self.enable_fstb else []


_SECTIONS = {"corruption": CorruptionConfig, "hdc": ConsistentLossConfig, "scene": SceneConfig}
_ALIASES = {"hdc.lambda": "hdc.weight", "hdc.layers": "hdc.target_layers", "train.lambda": "hdc.weight"}


def _coerce(value: str, default):
    value = value.strip()
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, (list, tuple)):
        items = [v for v in value.replace(",", " ").split() if v]
        inner = type(default[0]) if default else int
        items = [inner(float(v)) if inner is int else inner(v) for v in items]
        return tuple(items) if isinstance(default, tuple) else items
    return value


def apply_overrides(cfg: TrainConfig, pairs: dict[str, str]) -> TrainConfig:
    for raw_key, value in pairs.items():
        key = _ALIASES.get(raw_key, raw_key)
        if key.startswith("train."):
            key = key[len("train."):]
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise KeyError(f"unknown config section in {raw_key!r}")
            target = getattr(cfg, section)
        else:
            target, name = cfg, key
        if name not in {f.name for f in dataclasses.fields(target)} or name in _SECTIONS and target is cfg:
            raise KeyError(f"unknown config key {raw_key!r}")
        setattr(target, name, _coerce(value, getattr(target, name)))
    return cfg


def parse_config_text(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None) -> TrainConfig:
    cfg = TrainConfig()
    if path is not None:
        apply_overrides(cfg, parse_config_text(Path(path).read_text()))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for g in dataclasses.fields(v):
                lines.append(f"{f.name}.{g.name} = {_fmt(getattr(v, g.name))}")
        else:
            lines.append(f"{f.name} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


# -- model -----------------------------------------------------------------------------
@dataclass
class TinyBackboneParams:
    stages: list[Conv2dParams]


@dataclass
class HeadParams:
    lateral: list[Conv2dParams]  # per level, C -> HEAD_WIDTH
    stem: Conv2dParams  # image -> HEAD_WIDTH at full resolution
    mix: Conv2dParams  # 3x3, HEAD_WIDTH -> HEAD_WIDTH
    out: Conv2dParams  # 1x1, HEAD_WIDTH -> 1


@dataclass
class Model:
    backbone: TinyBackboneParams
    fstbs: list[list[FstbParams]]  # [stage n][i-th refined level]
    head: HeadParams
    refined_levels: list[int]  # 1-based pyramid levels carrying FSTBs


def init_model(cfg: TrainConfig, dtype=np.float32) -> Model:
    """Backbone, head and blocks draw from separate streams, so variants share backbone/head init."""
    c = cfg.channels
    rng_bb = np.random.default_rng([cfg.seed, 0])
    rng_head = np.random.default_rng([cfg.seed, 1])
    rng_blk = np.random.default_rng([cfg.seed, 2])
    stages = [nn.make_conv(1 if i == 0 else c, c, 3, rng_bb, dtype=dtype) for i in range(cfg.levels)]
    refined = cfg.refined_levels()
    fstbs = [
        [init_fstb(c, rng_blk, cfg.dilation, dtype, cfg.fft_norm, zero_init_out=cfg.zero_init_fstb) for _ in refined]
        for _ in range(cfg.n_stages if refined else 0)
    ]
    head = HeadParams(
        lateral=[nn.make_conv(c, HEAD_WIDTH, 1, rng_head, dtype=dtype) for _ in range(cfg.levels)],
        stem=nn.make_conv(1, HEAD_WIDTH, 3, rng_head, dtype=dtype),
        mix=nn.make_conv(HEAD_WIDTH, HEAD_WIDTH, 3, rng_head, dtype=dtype),
        out=nn.make_conv(HEAD_WIDTH, 1, 1, rng_head, dtype=dtype),
    )
    return Model(TinyBackboneParams(stages), fstbs, head, refined)


def model_parameters(model: Model) -> dict[str, Tensor]:
    return dict(nn.named_parameters({"backbone": model.backbone, "fstbs": model.fstbs, "head": model.head}))


def backbone_forward(x: Tensor, params: TinyBackboneParams) -> list[Tensor]:
    """conv3x3 -> ReLU -> 2x2 mean pool per stage; level l has side input / 2^l."""
    levels = []
    h = x
    for conv in params.stages:
        h = T.avg_pool2(T.relu(nn.conv2d(h, conv)))
        levels.append(h)
    return levels


def refine_pyramid(levels: list[Tensor], model: Model) -> hdc.FeaturePyramid:
    """Stage 0 is the backbone output; each further stage applies one block per refined level."""
    pyramid = [list(levels)]
    for blocks in model.fstbs:
        prev = pyramid[-1]
        nxt = list(prev)
        for lvl, block in zip(model.refined_levels, blocks):
            nxt[lvl - 1] = fstb_forward(prev[lvl - 1], block)
        pyramid.append(nxt)
    return pyramid


def seg_head_forward(levels: list[Tensor], x: Tensor, params: HeadParams) -> Tensor:
    """Project every level, upsample to input size, add an image stem, output one logit map."""
    side = x.shape[-1]
    acc = nn.conv2d(x, params.stem)
    for lvl, lat in zip(levels, params.lateral):
        acc = acc + T.upsample_nearest(nn.conv2d(lvl, lat), side // lvl.shape[-1])
    hidden = T.relu(nn.conv2d(T.relu(acc), params.mix))
    return nn.conv2d(hidden, params.out)


def task_loss(logits: Tensor, mask) -> Tensor:
    return T.bce_with_logits(logits, mask)


def predict(model: Model, x: Tensor) -> Tensor:
    """Inference path: clean branch only."""
    with hdc.corruption_forbidden():
        pyramid = refine_pyramid(backbone_forward(x, model.backbone), model)
        return seg_head_forward(pyramid[-1], x, model.head)


# -- optimizers ------------------------------------------------------------------------
class SGD:
    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data -= (self.lr * v).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            upd = self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)
            p.data -= upd.astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grads(params: list[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return total


# -- training ---------------------------------------------------------------------------
@dataclass
class TraceRow:
    step: int
    task_loss: float
    consistent_loss: float
    total: float


@dataclass
class TrainResult:
    model: Model
    trace: list[TraceRow]
    config: TrainConfig
    seconds: float = 0.0


def make_data(cfg: TrainConfig) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Train/test splits generated in memory from disjoint seed streams."""
    scfg = dataclasses.replace(cfg.scene, seed=cfg.data_seed)
    train = make_arrays(scfg, cfg.n_train, seed=cfg.data_seed)
    test = make_arrays(scfg, cfg.n_test, seed=cfg.data_seed + 1_000_003)
    return train, test


def train(cfg: TrainConfig, images: np.ndarray, masks: np.ndarray, out_dir=None, log_every: int = 0) -> TrainResult:
    """Minibatch training; deterministic for a fixed config and dataset."""
    cfg.validate()
    t0 = time.perf_counter()
    model = init_model(cfg)
    params = list(model_parameters(model).values())
    opt_cls = SGD if cfg.optimizer == "sgd" else Adam
    opt = (
        SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
        if opt_cls is SGD
        else Adam(params, cfg.lr, weight_decay=cfg.weight_decay)
    )
    rng = np.random.default_rng([cfg.seed, 7])
    noise_rng = np.random.default_rng([cfg.seed, 11])
    n = len(images)
    order = rng.permutation(n)
    cursor = 0
    trace: list[TraceRow] = []
    images = images.astype(np.float32)
    masks = masks.astype(np.float32)

    for step in range(cfg.total_steps):
        if cursor + cfg.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        x = Tensor(images[idx])
        y = masks[idx]

        opt.zero_grad()
        try:
            base = refine_pyramid(backbone_forward(x, model.backbone), model)
            logits = seg_head_forward(base[-1], x, model.head)
            loss_task = task_loss(logits, y)
            total = loss_task
            loss_cons_value = 0.0
            if cfg.enable_hdc:
                result = hdc.hdc_step(
                    x,
                    lambda im: backbone_forward(im, model.backbone),
                    lambda lv: refine_pyramid(lv, model),
                    cfg.corruption,
                    cfg.hdc,
                    rng=noise_rng,
                    base=base,
                )
                total = total + result.loss
                loss_cons_value = float(result.loss.data)
        except FloatingPointError as exc:
            raise NonFiniteLoss(step, str(exc)) from exc
        total_value = float(total.data)
        if not math.isfinite(total_value):
            raise NonFiniteLoss(step)
        try:
            total.backward()
        except FloatingPointError as exc:
            raise NonFiniteLoss(step, str(exc)) from exc
        clip_grads(params, cfg.grad_clip)
        opt.step()
        trace.append(TraceRow(step, float(loss_task.data), loss_cons_value, total_value))
        if log_every and step % log_every == 0:
            logger.info("step %d task %.4f consistent %.4f", step, trace[-1].task_loss, loss_cons_value)

    result = TrainResult(model, trace, cfg, time.perf_counter() - t0)
    if out_dir is not None:
        save_checkpoint(result, out_dir)
    return result


def trace_csv(trace: list[TraceRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "task_loss", "consistent_loss", "total"])
    for r in trace:
        w.writerow([r.step, repr(r.task_loss), repr(r.consistent_loss), repr(r.total)])
    return buf.getvalue()


def save_checkpoint(result: TrainResult, out_dir) -> Path:
    out = Path(out_dir)
    ckpt = out / "checkpoint"
    nn.save(
        {"backbone": result.model.backbone, "fstbs": result.model.fstbs, "head": result.model.head},
        ckpt,
        meta={"refined_levels": result.model.refined_levels},
    )
    (ckpt / "config.txt").write_text(dump_config(result.config))
    (out / "loss_trace.csv").write_text(trace_csv(result.trace))
    return ckpt


def load_checkpoint(ckpt_dir) -> tuple[Model, TrainConfig]:
    ckpt = Path(ckpt_dir)
    if (ckpt / "checkpoint").is_dir():
        ckpt = ckpt / "checkpoint"
    cfg = load_config(ckpt / "config.txt")
    model = init_model(cfg)
    nn.load_into({"backbone": model.backbone, "fstbs": model.fstbs, "head": model.head}, ckpt)
    return model, cfg


# -- evaluation -------------------------------------------------------------------------
@dataclass
class EvalReport:
    mean_iou: float
    per_scene_iou: list[float]
    precision: float
    recall: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate(model: Model, images: np.ndarray, masks: np.ndarray, batch_size: int = 16) -> EvalReport:
    """IoU of sigmoid(logits) > 0.5 against the masks; scenes without foreground score 1 if predicted empty."""
    ious: list[float] = []
    tp = fp = fn = 0
    for start in range(0, len(images), batch_size):
        x = Tensor(images[start : start + batch_size].astype(np.float32))
        pred = predict(model, x).data > 0.0
        truth = masks[start : start + batch_size] > 0.5
        for p, t in zip(pred, truth):
            inter = int((p & t).sum())
            union = int((p | t).sum())
            ious.append(1.0 if union == 0 else inter / union)
            tp += inter
            fp += int((p & ~t).sum())
            fn += int((~p & t).sum())
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return EvalReport(float(np.mean(ious)), ious, float(precision), float(recall))


# -- ablation ---------------------------------------------------------------------------
VARIANTS = {
    "baseline": {"enable_fstb": False, "enable_hdc": False},
    "fstb": {"enable_fstb": True, "enable_hdc": False},
    "fstb_hdc": {"enable_fstb": True, "enable_hdc": True},
}


def layer_set_variants(levels: int) -> dict[str, dict]:
    return {
        f"fstb_hdc_top{k}" if k < levels else "fstb_hdc_all": {
            "enable_fstb": True,
            "enable_hdc": True,
            "hdc.target_layers": hdc.top_levels(levels, k),
        }
        for k in range(1, levels + 1)
    }


def _variant_config(base: TrainConfig, overrides: dict, seed: int) -> TrainConfig:
    cfg = dataclasses.replace(
        base,
        corruption=dataclasses.replace(base.corruption),
        hdc=dataclasses.replace(base.hdc, target_layers=list(base.hdc.target_layers)),
        scene=dataclasses.replace(base.scene),
        seed=seed,
    )
    for k, v in overrides.items():
        if k.startswith("hdc."):
            setattr(cfg.hdc, k[4:], v)
        else:
            setattr(cfg, k, v)
    return cfg.validate()


def run_ablation(
    base: TrainConfig,
    variants: dict[str, dict] | None = None,
    seeds: Iterable[int] = range(5),
    data=None,
) -> dict:
    """Train every (variant, seed) cell and report median test IoU per variant."""
    variants = VARIANTS if variants is None else variants
    seeds = list(seeds)
    (xtr, ytr), (xte, yte) = data if data is not None else make_data(base)
    cells: dict[str, list[dict]] = {}
    for name, overrides in variants.items():
        runs = []
        for s in seeds:
            cfg = _variant_config(base, overrides, s)
            res = train(cfg, xtr, ytr)
            rep = evaluate(res.model, xte, yte)
            runs.append({
                "seed": s,
                "mean_iou": rep.mean_iou,
                "precision": rep.precision,
                "recall": rep.recall,
                "final_task_loss": res.trace[-1].task_loss,
            })
            logger.info("%s seed %d: IoU %.4f (%.1fs)", name, s, rep.mean_iou, res.seconds)
        cells[name] = runs
    summary = {
        name: {
            "median_iou": float(np.median([r["mean_iou"] for r in runs])),
            "mean_iou": float(np.mean([r["mean_iou"] for r in runs])),
            "runs": runs,
        }
        for name, runs in cells.items()
    }
    return {"seeds": seeds, "config": dump_config(base), "variants": summary}


def ablation_table(report: dict) -> str:
    rows = [("variant", "median IoU", "mean IoU", "per-seed IoU")]
    for name, cell in report["variants"].items():
        per = " ".join(f"{r['mean_iou']:.4f}" for r in cell["runs"])
        rows.append((name, f"{cell['median_iou']:.4f}", f"{cell['mean_iou']:.4f}", per))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
