"""``uwdiff`` command line: label, train-estimator, train-diffusion, enhance, eval, ablate, score.

Every command that writes a directory also writes the effective configuration
there as ``config.yaml``. Exit status is 0 on success, 1 on any error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .config import RunConfig, dump_config, load_config
from .data import (ConfigError, CorpusError, IMAGE_SUFFIXES, list_images, load_corpus, read_image,
                   save_image, split_corpus)
from .estimator import load_estimator, predict_score, save_estimator, train_estimator
from .metrics import LabelRange, degradation_label, pair_psnr, quality_report
from .trainer import (bundled_estimator, load_checkpoint, loss_grid, module_grid, run_ablation,
                      train_diffusion, write_table)

log = logging.getLogger("uwdiff")

LABELS_FILE = "labels.csv"
LABEL_RANGE_FILE = "label_range.json"


class CommandError(RuntimeError):
    pass


# --- helpers ----------------------------------------------------------------

def _config(args) -> RunConfig:
    return load_config(args.config, args.set or ())


def _prepare_out(path: str, cfg: RunConfig | None = None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        dump_config(cfg, out / "config.yaml")
    return out


def _corpus_root(args, cfg: RunConfig) -> str:
    root = args.corpus or cfg.data.root
    if root is None:
        raise ConfigError("no corpus given (use --corpus or data.root)")
    return root


def _write_rows(rows: list[dict], path: Path) -> None:
    if path.suffix.lower() == ".json":
        tmp = path.with_name(f".{path.name}.tmp")
        tmp.write_text(json.dumps(rows, indent=2))
        tmp.replace(path)
    elif rows:
        write_table(rows, path)
    else:
        path.write_text("")


def read_labels(path: str | Path) -> tuple[dict[str, float], LabelRange | None]:
    """Read a labels CSV written by ``uwdiff label`` and its sibling label range."""
    path = Path(path)
    with open(path, newline="") as fh:
        labels = {row["id"]: float(row["D_label"]) for row in csv.DictReader(fh)}
    rng_file = path.parent / LABEL_RANGE_FILE
    label_range = LabelRange(**json.loads(rng_file.read_text())) if rng_file.exists() else None
    return labels, label_range


# --- label --------------------------------------------------------------------

def cmd_label(args) -> int:
    cfg = _config(args)
    pairs = load_corpus(_corpus_root(args, cfg), cfg.data.side, cfg.data.workers)
    if not pairs:
        raise CorpusError("corpus is empty")
    psnrs = [pair_psnr(p) for p in pairs]
    label_range = LabelRange.fit(psnrs)
    out = _prepare_out(args.out, cfg)
    rows = [{"id": p.id, "psnr": f"{v:.6f}", "D_label": f"{degradation_label(p, label_range):.6f}"}
            for p, v in zip(pairs, psnrs)]
    write_table(rows, out / LABELS_FILE)
    (out / LABEL_RANGE_FILE).write_text(json.dumps(label_range.as_dict(), indent=2))
    print(f"labelled {len(rows)} pairs; PSNR range [{label_range.psnr_min:.3f}, {label_range.psnr_max:.3f}]")
    return 0


# --- training -------------------------------------------------------------------

def _split(args, cfg: RunConfig, side: int):
    pairs = load_corpus(_corpus_root(args, cfg), side, cfg.data.workers)
    return split_corpus(pairs, cfg.data.val_fraction, cfg.data.seed)


def cmd_train_estimator(args) -> int:
    cfg = _config(args)
    split = _split(args, cfg, cfg.data.side)
    labels, label_range = read_labels(args.labels) if args.labels else (None, None)
    run = train_estimator(split, cfg.estimator, cfg.estimator_train, labels=labels, label_range=label_range)
    out = _prepare_out(args.out, cfg)
    save_estimator(run, out / "estimator.pt")
    write_table(run.history, out / "history.csv")
    last = run.history[-1]
    print(f"estimator saved to {out / 'estimator.pt'}; val pearson {last.get('val_pearson')}")
    return 0


def cmd_train_diffusion(args) -> int:
    cfg = _config(args)
    if cfg.data.side != cfg.diffusion.image_side:
        raise ConfigError(f"data.side={cfg.data.side} differs from diffusion.image_side="
                          f"{cfg.diffusion.image_side}")
    split = _split(args, cfg, cfg.data.side)
    labels, label_range = read_labels(args.labels) if args.labels else (None, None)
    estimator = None
    if args.estimator:
        est = load_estimator(args.estimator)
        estimator, label_range = est.model, label_range or est.label_range
    out = _prepare_out(args.out, cfg)
    run = train_diffusion(split, cfg.diffusion, labels=labels, label_range=label_range,
                          estimator=estimator, out_dir=out, resume=args.resume)
    print(f"final checkpoint {run.checkpoint}")
    return 0


# --- enhance ------------------------------------------------------------------

def _scan_inputs(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise CorpusError(f"input directory not found: {directory}")
    keep = []
    for p in sorted(directory.iterdir()):
        if not p.is_file():
            continue
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            log.warning("skipping non-image file %s", p)
            continue
        keep.append(p)
    return keep


def _stride(args, t_start: int, default: int) -> int:
    if args.stride is not None and args.steps is not None:
        raise ConfigError("give --stride or --steps, not both")
    if args.steps is not None:
        if args.steps < 1:
            raise ConfigError("--steps must be positive")
        return max(1, math.ceil(t_start / args.steps))
    stride = default if args.stride is None else args.stride
    if stride < 1:
        raise ConfigError("--stride must be positive")
    return stride


def _resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if img.shape[1::-1] == size:
        return img
    pil = Image.fromarray(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8))
    return np.asarray(pil.resize(size, Image.Resampling.BILINEAR), np.float32) / 255.0


def cmd_enhance(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CommandError(f"checkpoint not found: {ckpt}")
    model, blob = load_checkpoint(ckpt, use_ema=not args.no_ema)
    mcfg = model.cfg
    t_start = args.t_start or mcfg.chain_t_start or mcfg.T
    stride = _stride(args, t_start, mcfg.sample_stride)
    estimator = None
    if args.degradation is None:
        estimator = load_estimator(args.estimator).model if args.estimator else bundled_estimator(blob)
        if estimator is None:
            raise ConfigError("no degradation source: pass --degradation, --estimator, or a checkpoint "
                              "trained with an estimator")
    elif not 0.0 <= args.degradation <= 1.0:
        raise ConfigError("--degradation must lie in [0, 1]")

    inputs = _scan_inputs(Path(args.input))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if inputs:
        (out / "enhance.json").write_text(json.dumps(
            {"checkpoint": str(ckpt), "stride": stride, "t_start": t_start, "seed": args.seed,
             "degradation": args.degradation, "ema": not args.no_ema, "train_config": mcfg.to_dict()},
            indent=2))
    refs = list_images(args.reference) if args.grid and args.reference else {}
    side = mcfg.image_side
    failed = []
    for path in inputs:
        try:
            with Image.open(path) as im:
                size = im.size
            raw = read_image(path, side)
            x = torch.from_numpy(raw.transpose(2, 0, 1)).unsqueeze(0)
            if args.degradation is not None:
                D = torch.tensor([args.degradation], dtype=torch.float32)
            else:
                D = predict_score(estimator, x)
            y = model.enhance(x, D, stride=stride, seed=args.seed, t_start=t_start)[0]
            img = _resize(y.permute(1, 2, 0).numpy().astype(np.float32), size)
            save_image(img, out / f"{path.stem}.png")
            if args.grid:
                panels = [_resize(raw, size), img]
                if path.stem in refs:
                    panels.append(read_image(refs[path.stem], None))
                save_image(np.concatenate([_resize(p, size) for p in panels], axis=1),
                           out / "grid" / f"{path.stem}.png")
        except (CorpusError, ValueError, RuntimeError) as exc:
            log.error("%s: %s", path.name, exc)
            failed.append(path.stem)
    print(f"enhanced {len(inputs) - len(failed)} of {len(inputs)} images into {out}")
    if failed:
        print(f"failed ids: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# --- eval -----------------------------------------------------------------------

def cmd_eval(args) -> int:
    preds = list_images(args.pred)
    refs = list_images(args.ref) if args.ref else None
    if refs is not None:
        missing = sorted(set(preds) ^ set(refs))
        if missing:
            raise CommandError(f"ids present in only one of pred/ref: {', '.join(missing)}")
    rows, failed = [], []
    for i in sorted(preds):
        try:
            pred = read_image(preds[i])
            ref = read_image(refs[i]) if refs is not None else None
            if ref is not None and ref.shape != pred.shape:
                raise ValueError(f"shape {pred.shape} vs reference {ref.shape}")
            rep = quality_report(pred, ref).as_dict()
            rows.append({"id": i, **{k: v for k, v in rep.items() if v is not None}})
        except (CorpusError, ValueError) as exc:
            log.error("%s: %s", i, exc)
            failed.append(i)
    if rows:
        keys = [k for k in rows[0] if k != "id"]
        rows.append({"id": "mean", **{k: float(np.mean([r[k] for r in rows])) for k in keys}})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_rows(rows, out)
    print(f"evaluated {max(0, len(rows) - 1)} images -> {out}")
    if failed:
        print(f"failed ids: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# --- ablate / score ----------------------------------------------------------------

def cmd_ablate(args) -> int:
    cfg = _config(args)
    split = _split(args, cfg, cfg.diffusion.image_side)
    labels, _ = read_labels(args.labels) if args.labels else (None, None)
    grids = {"module": module_grid, "loss": loss_grid}
    names = ("module", "loss") if args.grid == "both" else (args.grid,)
    out = _prepare_out(args.out, cfg)
    for name in names:
        table = run_ablation(grids[name](cfg.diffusion), split, labels=labels, out_dir=out / name)
        for row in table:
            print(f"{name:6s} {row['name']:24s} psnr={row['psnr']:.3f} ssim={row['ssim']:.4f}")
    return 0


def cmd_score(args) -> int:
    run = load_estimator(args.estimator)
    rows = []
    for path in _scan_inputs(Path(args.input)):
        x = torch.from_numpy(read_image(path, run.model.cfg.input_side).transpose(2, 0, 1)).unsqueeze(0)
        rows.append({"id": path.stem, "D": float(predict_score(run.model, x)[0])})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_rows(rows, out)
    print(f"scored {len(rows)} images -> {out}")
    return 0


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uwdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
        return sp

    sp = with_config(sub.add_parser("label", help="PSNR-based degradation labels for a paired corpus"))
    sp.add_argument("--corpus")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_label)

    sp = with_config(sub.add_parser("train-estimator", help="train the degradation estimator"))
    sp.add_argument("--corpus")
    sp.add_argument("--labels", help="labels.csv from `uwdiff label`")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_estimator)

    sp = with_config(sub.add_parser("train-diffusion", help="train the conditional diffusion model"))
    sp.add_argument("--corpus")
    sp.add_argument("--labels")
    sp.add_argument("--estimator", help="frozen estimator checkpoint used for D")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_diffusion)

    sp = sub.add_parser("enhance", help="enhance a directory of raw images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--stride", type=int)
    sp.add_argument("--steps", type=int, help="number of reverse steps (sets the stride)")
    sp.add_argument("--t-start", type=int, dest="t_start")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--degradation", type=float, help="fixed D for every image")
    sp.add_argument("--estimator", help="estimator checkpoint for no-reference D")
    sp.add_argument("--no-ema", action="store_true", help="use raw instead of EMA weights")
    sp.add_argument("--grid", action="store_true", help="also write raw|enhanced|reference strips")
    sp.add_argument("--reference", help="reference directory for the comparison grid")
    sp.set_defaults(func=cmd_enhance)

    sp = sub.add_parser("eval", help="PSNR/SSIM/UIQM/UCIQE for a directory of images")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--ref")
    sp.add_argument("--out", required=True, help="output table (.csv or .json)")
    sp.set_defaults(func=cmd_eval)

    sp = with_config(sub.add_parser("ablate", help="module or loss ablation grid"))
    sp.add_argument("--corpus")
    sp.add_argument("--labels")
    sp.add_argument("--grid", choices=("module", "loss", "both"), default="both")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("score", help="no-reference degradation scores from an estimator")
    sp.add_argument("--estimator", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True, help="output table (.csv or .json)")
    sp.set_defaults(func=cmd_score)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, CorpusError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
