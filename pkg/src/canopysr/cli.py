"""Command-line entry point: ``canopysr <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

from .config import TEMPLATE, RunConfig, load_config, parse_override
from .datamodel import load_patch, read_geotiff, read_manifest, write_geotiff
from .datapipe import ChannelStats, compute_channel_stats
from .encoders import doy_from_ddmm, normalize_doy_lidar
from .errors import CanopySRError, ConfigError
from .metrics import fap
from .model import CanopyHeightNet
from .predict import bicubic_upsample, evaluate_patches, model_predictor, output_geo, predict_patch
from .synthetic import generate_dataset
from .trainer import PatchDataset, Trainer, model_from_checkpoint

log = logging.getLogger("canopysr")

RUN_LAYOUT = ("checkpoints", "logs", "reports", "rasters")


class UsageError(CanopySRError):
    """Bad arguments or missing inputs; maps to exit code 2."""


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _config(args) -> RunConfig:
    overrides = dict(parse_override(text) for text in (args.set or []))
    if getattr(args, "resolution", None) is not None:
        overrides["resolution"] = args.resolution
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _manifest(data_dir: Path):
    path = data_dir / "manifest.txt"
    if not path.is_file():
        raise UsageError(f"no manifest at {path}")
    return read_manifest(path)


def _load_split(data_dir: Path, split: str):
    items = []
    for entry in _manifest(data_dir):
        if entry.split != split:
            continue
        patch, reference = load_patch(data_dir / entry.path)
        if reference is None:
            raise UsageError(f"{entry.path} has no reference raster")
        items.append((patch, reference))
    return items


def _run_dir(out: Path) -> Path:
    for sub in RUN_LAYOUT:
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_model(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    model, state = model_from_checkpoint(path)
    extra = state.get("extra", {})
    stats = ChannelStats.from_dict(extra["channel_stats"]) if "channel_stats" in extra else ChannelStats.identity()
    return model, state, stats, extra


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_init_config(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    out.write_text(TEMPLATE)
    print(f"wrote {out}")
    return 0


def cmd_synth(args) -> int:
    cfg = _config(args)
    n = cfg.data.n_patches if args.n is None else args.n
    if n < 0:
        raise UsageError("--n must be non-negative")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to write into it")
    out.mkdir(parents=True, exist_ok=True)
    if n == 0:
        log.warning("n = 0: writing an empty manifest")
    manifest = generate_dataset(out, n, cfg.synth)
    cfg.write(out / "config.yaml")
    print(f"wrote {n} patches and {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.max_steps is not None:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "train": {**cfg.train.to_dict(), "max_steps": args.max_steps}})
    data_dir = Path(args.data)
    train_items = _load_split(data_dir, cfg.data.train_split)
    if not train_items:
        raise UsageError(f"no '{cfg.data.train_split}' patches in {data_dir / 'manifest.txt'}")
    val_items = _load_split(data_dir, cfg.data.val_split)
    out = _run_dir(Path(args.out))
    cfg.write(out / "config.yaml")

    torch.manual_seed(cfg.seed)
    stats = compute_channel_stats([p.bands for p, _ in train_items])
    factor = cfg.factor
    train = PatchDataset(train_items, stats, cfg.sampler, factor)
    val = PatchDataset(val_items, stats, cfg.sampler, factor) if val_items else None
    model = CanopyHeightNet(cfg.model, seed=cfg.seed)
    steps_per_epoch = math.ceil(len(train) / cfg.train.effective_batch)
    trainer = Trainer(model, cfg.train, cfg.loss, margin=cfg.sampler.margin, steps_per_epoch=steps_per_epoch,
                      log_path=out / "logs" / "train.jsonl", snapshot_dir=out / "logs",
                      extra={"channel_stats": stats.to_dict(), "t_max": cfg.sampler.t_max,
                             "resolution": cfg.resolution, "run_config": cfg.to_dict()})
    if args.resume:
        trainer.resume(args.resume)
    records = trainer.fit(train, val, checkpoint_dir=out / "checkpoints")
    last = records[-1].loss if records else float("nan")
    print(f"trained {trainer.step} steps, last loss {last:.4f}; checkpoints in {out / 'checkpoints'}")
    return 0


def cmd_evaluate(args) -> int:
    model, state, stats, extra = _checkpoint_model(args.checkpoint)
    ckpt = Path(args.checkpoint)
    run_cfg = RunConfig.from_dict(extra["run_config"]) if "run_config" in extra else RunConfig()
    split = args.split or run_cfg.eval.split
    tile = run_cfg.eval.tile if args.tile is None else args.tile
    items = _load_split(Path(args.data), split)
    if not items:
        raise UsageError(f"no '{split}' patches in {Path(args.data) / 'manifest.txt'}")
    predictor = model_predictor(model, stats, tile=tile or None, t_max=extra.get("t_max", 12))
    report = evaluate_patches(predictor, items, resolution=extra.get("resolution"), fap_bins=run_cfg.eval.fap_bins)
    out = Path(args.out) if args.out else ckpt.parent.parent / "reports" / split
    report.write(out)
    print(report.to_text(), end="")
    print(f"report written to {out}")
    return 0


def cmd_predict(args) -> int:
    model, _, stats, extra = _checkpoint_model(args.checkpoint)
    patch, _ = load_patch(args.patch)
    if args.date is None:
        offset = 0
    else:
        try:
            doy = doy_from_ddmm(args.date, patch.year)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        offset = normalize_doy_lidar(doy, patch.year)
    result = predict_patch(model, patch, stats, offset, tile=args.tile or None, t_max=extra.get("t_max", 12),
                           return_attention=bool(args.attention))
    heights, attn = result if args.attention else (result, None)
    geo = output_geo(patch, model.cfg.sr_factor)
    if args.upsample == "bicubic":
        heights = bicubic_upsample(heights, args.upsample_factor)
        geo = geo.rescaled(args.upsample_factor)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_geotiff(out, heights, geo)
    if attn is not None:
        np.save(args.attention, attn)
    print(f"wrote {out} ({heights.shape[0]}x{heights.shape[1]}, {geo.pixel_size:g} m)")
    return 0


def cmd_fap(args) -> int:
    rasters = [("a", args.raster_a), ("b", args.raster_b)]
    if args.reference:
        rasters.append(("reference", args.reference))
    images = {}
    for name, path in rasters:
        if not Path(path).is_file():
            raise UsageError(f"raster not found: {path}")
        data, _ = read_geotiff(path)
        if data.shape[0] != data.shape[1]:
            raise UsageError(f"{path} is {data.shape[0]}x{data.shape[1]}; FAP needs a square raster, "
                             f"resample or crop it to a square first")
        images[name] = (Path(path), np.nan_to_num(data.astype(np.float64)))
    n_bins = args.bins or min(32, *(img.shape[0] // 2 for _, img in images.values()))
    profiles = {name: fap(img, n_bins) for name, (_, img) in images.items()}

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table = out.with_suffix(".csv")
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frequency", *(images[name][0].name for name in profiles)])
        freq = next(iter(profiles.values())).frequency
        for k, f in enumerate(freq):
            w.writerow([f"{f:.6f}", *(f"{p.value[k]:.6f}" for p in profiles.values())])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    styles = {"a": "-", "b": "--", "reference": ":"}
    for name, prof in profiles.items():
        ax.plot(prof.frequency, prof.value, styles[name], label=images[name][0].stem)
    ax.set_xlabel("normalized frequency f / f_N")
    ax.set_ylabel("log10 relative magnitude")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(f"wrote {out} and {table}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--resolution", type=float, help="10, 5 or 2.5 m")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canopysr", description="Canopy height regression with super-resolution.")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=1, help="torch CPU threads (1 keeps runs reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write a commented configuration template")
    p.add_argument("out", nargs="?", default="canopysr.yaml")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("out", help="output directory")
    p.add_argument("--n", type=int, help="number of patches (default data.n_patches)")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset")
    _common(p)
    p.add_argument("data", help="dataset directory holding manifest.txt")
    p.add_argument("out", help="run directory")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on a dataset split")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--split")
    p.add_argument("--tile", type=int, help="inference tile in input pixels; 0 = whole patch")
    p.add_argument("--out", help="report directory (default <run>/reports/<split>)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="height raster for one patch")
    p.add_argument("checkpoint")
    p.add_argument("patch")
    p.add_argument("out", help="output GeoTIFF")
    p.add_argument("--date", help="reference date DD-MM (default 01-07)")
    p.add_argument("--tile", type=int, default=80, help="inference tile in input pixels; 0 = whole patch")
    p.add_argument("--upsample", choices=("none", "bicubic"), default="none",
                   help="bicubic: interpolate the prediction further as a baseline")
    p.add_argument("--upsample-factor", type=int, default=2)
    p.add_argument("--attention", help="also save attention weights (.npy)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("fap", help="compare frequency attenuation profiles")
    p.add_argument("raster_a")
    p.add_argument("raster_b")
    p.add_argument("out", help="output figure (.png); a .csv table is written next to it")
    p.add_argument("--reference", help="high-resolution reference raster")
    p.add_argument("--bins", type=int)
    p.set_defaults(func=cmd_fap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CanopySRError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
