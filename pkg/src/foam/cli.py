"""Command-line entry point: ``foam <subcommand> [flags]``.

Exit codes: 0 on success, 1 for usage or input errors, 2 for numerical
failures (non-finite losses, failed gradient checks).

Every subcommand accepts ``--seed`` and ``--out``. When ``--seed`` is absent
the ``FOAM_SEED`` environment variable is used, then the config file value.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from foam import __version__
from foam import harness as H
from foam import hdc
from foam import io as fio
from foam import spectral as S
from foam.scenes import gen_dataset, gen_scene, load_dataset
from foam.tensor import Tensor

logger = logging.getLogger("foam")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
CORRUPTION_NAMES = {"gb": "GB", "du": "DU", "gn": "GN"}


class UsageError(Exception):
    """Bad flags or inputs; maps to exit code 1."""


class NumericalFailure(Exception):
    """Gradient check failure or non-finite values; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers ------------------------------------------------------------------------
def resolve_seed(flag: int | None, fallback: int = 0) -> int:
    if flag is not None:
        return int(flag)
    env = os.environ.get("FOAM_SEED", "").strip()
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"FOAM_SEED must be an integer, got {env!r}") from None
    return int(fallback)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out if args.out else default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_outputs(out: Path, stem: str, payload: dict, text: str) -> None:
    (out / f"{stem}.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    (out / f"{stem}.txt").write_text(text)
    sys.stdout.write(text)


def _load_cfg(args) -> H.TrainConfig:
    path = getattr(args, "config", None)
    if path is not None and not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = H.load_config(path)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from None
    cfg.seed = resolve_seed(args.seed, cfg.seed)
    return cfg


def _load_image(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input not found: {p}")
    try:
        arr = fio.load_tensor(p)
    except ValueError as exc:
        raise UsageError(f"{p}: {exc}") from None
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise UsageError(f"{p}: expected an H x W or C x H x W tensor, got shape {arr.shape}")
    return arr


# -- spectrum -------------------------------------------------------------------------
def _spectrum_images(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray, S.ComplexSpectrum]:
    spec = S.fft2(Tensor(arr.astype(np.float64)))
    shifted = S.fftshift(spec)
    mag = S.magnitude(shifted).data.mean(axis=0)
    ph = S.phase(shifted).data[0]
    return fio.log_magnitude_image(mag), (ph + math.pi) * (255.0 / (2 * math.pi)), spec


def cmd_spectrum(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, "spectrum_out")
    if args.input:
        image = _load_image(args.input)
    else:
        image = gen_scene(cfg.scene, cfg.seed).image.data
    kinds = list(CORRUPTION_NAMES) if args.corrupt == "all" else [args.corrupt]
    rng = np.random.default_rng([cfg.seed, 11])
    variants = {"original": image.astype(np.float64)}
    for k in kinds:
        ccfg = dataclasses.replace(cfg.corruption, kind=CORRUPTION_NAMES[k])
        variants[k] = hdc.corrupt(image.astype(np.float64), ccfg, rng).data

    report = {"edges": list(S.DEFAULT_BAND_EDGES), "images": {}}
    lines = [f"{'image':<10} {'low':>8} {'mid':>8} {'high':>8}"]
    for name, arr in variants.items():
        fio.write_pgm(out / f"{name}.pgm", np.clip(arr[0], 0.0, 1.0) * 255.0)
        logmag, phase_img, spec = _spectrum_images(arr)
        fio.write_pgm(out / f"{name}_logmag.pgm", logmag)
        fio.write_pgm(out / f"{name}_phase.pgm", phase_img)
        bands = S.band_energy(spec)
        report["images"][name] = {"fractions": bands.fractions}
        lines.append(f"{name:<10} " + " ".join(f"{f:8.5f}" for f in bands.fractions))
    report["seed"] = cfg.seed
    _write_outputs(out, "band_energy", report, "\n".join(lines) + "\n")
    return EXIT_OK


# -- gradcheck ----------------------------------------------------------------------
def cmd_gradcheck(args) -> int:
    from foam import checks

    seed = resolve_seed(args.seed, 0)
    names = checks.resolve_components(args.component)
    results = {}
    lines = []
    for name in names:
        rep = checks.check_component(name, tol=args.tol, seed=seed)
        results[name] = {
            "passed": bool(rep.passed),
            "max_rel_error": rep.max_rel_error,
            "worst_param": rep.worst_param,
            "worst_index": rep.worst_index,
        }
        status = "ok" if rep.passed else "FAIL"
        lines.append(f"{name:<12} {status:<4} max rel err {rep.max_rel_error:.3e} (worst: {rep.worst_param}[{rep.worst_index}])")
    ok = all(r["passed"] for r in results.values())
    payload = {"tol": args.tol, "seed": seed, "passed": ok, "components": results}
    if args.out:
        _write_outputs(_out_dir(args, ""), "gradcheck", payload, "\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    return EXIT_OK if ok else EXIT_NUMERIC


# -- data / train / eval / ablate -----------------------------------------------------------
def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    if args.count < 1:
        raise UsageError("--count must be positive")
    seed = resolve_seed(args.seed, cfg.scene.seed)
    out = _out_dir(args, "data")
    manifest = gen_dataset(cfg.scene, args.count, out, seed=seed)
    overlaps = [e["overlap"] for e in manifest["scenes"]]
    sys.stdout.write(f"wrote {manifest['count']} scenes to {out} (seed {seed}, "
                     f"mean overlap {np.mean(overlaps):.3f})\n")
    return EXIT_OK


def _dataset(args, cfg: H.TrainConfig, split: str):
    if getattr(args, "data", None):
        d = Path(args.data)
        if not (d / "manifest.json").is_file():
            raise UsageError(f"no dataset manifest in {d}")
        try:
            images, masks, _ = load_dataset(d)
        except (KeyError, ValueError) as exc:
            raise UsageError(f"invalid dataset: {exc}") from None
        return images, masks
    train, test = H.make_data(cfg)
    return train if split == "train" else test


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    images, masks = _dataset(args, cfg, "train")
    out = _out_dir(args, "run")
    res = H.train(cfg, images, masks, out_dir=out, log_every=args.log_every)
    first, last = res.trace[0], res.trace[-1]
    payload = {
        "seed": cfg.seed,
        "steps": len(res.trace),
        "initial_task_loss": first.task_loss,
        "final_task_loss": last.task_loss,
        "final_consistent_loss": last.consistent_loss,
        "checkpoint": "checkpoint",
        "loss_trace": "loss_trace.csv",
    }
    text = (f"trained {len(res.trace)} steps (seed {cfg.seed}): task loss "
            f"{first.task_loss:.4f} -> {last.task_loss:.4f}; checkpoint in {out / 'checkpoint'}\n")
    _write_outputs(out, "train", payload, text)
    return EXIT_OK


def _load_ckpt(path):
    p = Path(path)
    if not (p / "manifest.json").is_file() and not (p / "checkpoint" / "manifest.json").is_file():
        raise UsageError(f"no checkpoint manifest under {p}")
    try:
        return H.load_checkpoint(p)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint: {exc}") from None


def cmd_eval(args) -> int:
    model, cfg = _load_ckpt(args.ckpt)
    if args.seed is not None or os.environ.get("FOAM_SEED"):
        cfg.seed = resolve_seed(args.seed, cfg.seed)
    images, masks = _dataset(args, cfg, "test")
    rep = H.evaluate(model, images, masks)
    out = _out_dir(args, "eval")
    text = (f"scenes {len(rep.per_scene_iou)}  mean IoU {rep.mean_iou:.4f}  "
            f"precision {rep.precision:.4f}  recall {rep.recall:.4f}\n")
    _write_outputs(out, "eval", rep.to_dict(), text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    if args.seeds < 1:
        raise UsageError("--seeds must be positive")
    variants: dict[str, dict] = {}
    if args.grid in ("main", "both"):
        variants.update(H.VARIANTS)
    if args.grid in ("layers", "both"):
        variants.update(H.layer_set_variants(cfg.levels))
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    report = H.run_ablation(cfg, variants, seeds)
    out = _out_dir(args, "ablation")
    _write_outputs(out, "ablation", report, H.ablation_table(report))
    return EXIT_OK


# -- feature dumps -------------------------------------------------------------------------
def cmd_dump_features(args) -> int:
    model, cfg = _load_ckpt(args.ckpt)
    seed = resolve_seed(args.seed, cfg.seed)
    if args.input:
        image = _load_image(args.input)
    else:
        image = gen_scene(cfg.scene, seed).image.data
    n_stages = len(model.fstbs)
    if not 0 <= args.stage <= n_stages:
        raise UsageError(f"--stage must lie in 0..{n_stages}")
    if not 1 <= args.level <= cfg.levels:
        raise UsageError(f"--level must lie in 1..{cfg.levels}")

    out = _out_dir(args, "features")
    x = Tensor(image[None].astype(np.float32))
    branches = {}
    with hdc.corruption_forbidden():
        branches["base"] = H.refine_pyramid(H.backbone_forward(x, model.backbone), model)
    if args.corrupt:
        ccfg = dataclasses.replace(cfg.corruption, kind=CORRUPTION_NAMES[args.corrupt])
        xc = hdc.corrupt(x, ccfg, np.random.default_rng([seed, 11]))
        branches["corrupted"] = H.refine_pyramid(H.backbone_forward(xc, model.backbone), model)

    lines = []
    for name, pyramid in branches.items():
        feat = pyramid[args.stage][args.level - 1].data[0]
        stem = f"{name}_stage{args.stage}_level{args.level}"
        fio.save_tensor(out / f"{stem}.tns", feat)
        for ch, fmap in enumerate(feat):
            fio.write_pgm(out / f"{stem}_ch{ch:02d}.pgm", fio.to_unit_range(fmap))
        lines.append(f"{name}: {feat.shape[0]} channels of {feat.shape[1]}x{feat.shape[2]} -> {out / stem}.tns")
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="foam", description="Frequency/spatial feature refinement toolkit.")
    parser.add_argument("--version", action="version", version=f"foam {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=None, help="seed override (else FOAM_SEED, else config)")
        p.add_argument("--out", default=None, help="output directory")
        if config:
            p.add_argument("--config", default=None, help="key = value config file")

    p = sub.add_parser("spectrum", help="spatial/spectral rasters and band energies of clean and corrupted images")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--input", help="image tensor file (H x W or C x H x W)")
    src.add_argument("--demo", action="store_true", help="use a generated scene (default)")
    p.add_argument("--corrupt", choices=[*CORRUPTION_NAMES, "all"], default="all")
    common(p)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("gradcheck", help="finite-difference checks of the differentiable components")
    p.add_argument("--component", default="all",
                   choices=["sdca", "fdba", "fsfn", "fstb", "sigma", "conv2d", "dd_conv", "loss_type1", "loss_type2", "all"])
    p.add_argument("--tol", type=float, default=1e-3)
    common(p, config=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write a synthetic scene dataset")
    p.add_argument("--count", type=int, required=True)
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the toy segmenter")
    p.add_argument("--data", default=None, help="dataset directory (default: generate in memory)")
    p.add_argument("--log-every", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None, help="dataset directory (default: held-out generated split)")
    common(p, config=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="baseline / +FSTB / +FSTB+HDC comparison over seeds")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--grid", choices=["main", "layers", "both"], default="main")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-features", help="write feature maps of one pyramid stage and level")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", default=None, help="image tensor file (default: generated scene)")
    p.add_argument("--stage", type=int, default=1)
    p.add_argument("--level", type=int, default=3)
    p.add_argument("--corrupt", choices=list(CORRUPTION_NAMES), default=None)
    common(p, config=False)
    p.set_defaults(func=cmd_dump_features)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help/--version exit 0, usage errors exit 1
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except UsageError as exc:
        print(f"foam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (H.NonFiniteLoss, FloatingPointError, NumericalFailure) as exc:
        print(f"foam: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        print(f"foam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
