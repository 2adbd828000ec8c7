"""Command line entry points: data preparation, training, evaluation, exports.

Every command writes ``manifest.json`` next to its outputs. The default data
root comes from ``$ADP_REID_DATA`` when ``--data`` is not given.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import __version__
from .backbone import load_checkpoint
from .datasets import (
    DESK_DATASET,
    IMAGE_SUFFIXES,
    SPLIT_DIRS,
    load_image,
    make_synthetic_dataset,
    parse_reid_filename,
    records_to_array,
    scan_reid_directory,
    write_reid_directory,
)
from .evaluator import cmc_map, distance_matrix, extract_features
from .occlusion import apply_occlusion, crop_corner_background, sample_occluder_geometry
from .trainer import STRATEGIES, fit, load_config, make_config, model_from_checkpoint, save_config

DATA_ENV = "ADP_REID_DATA"
MANIFEST = "manifest.json"


class CommandError(Exception):
    """A user-facing failure; printed without a traceback."""


def git_stamp() -> str | None:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def write_manifest(out_dir: Path, command: str, config: dict | None, seed, artifacts: dict, inputs: dict) -> Path:
    """Manifest with the resolved inputs; deliberately free of timestamps.

    Artifact paths are relative to ``out_dir`` so identical reruns elsewhere
    produce identical manifests.
    """
    manifest = {
        "command": command,
        "version": __version__,
        "git": git_stamp(),
        "seed": seed,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "artifacts": {k: os.path.relpath(v, out_dir) for k, v in artifacts.items()},
    }
    path = out_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def data_root(args) -> Path:
    root = args.data or os.environ.get(DATA_ENV)
    if not root:
        raise CommandError(f"no data directory: pass --data or set {DATA_ENV}")
    return Path(root)


def prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and not path.is_dir():
        raise CommandError(f"output path {path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise CommandError(f"output directory {path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def read_checkpoint(path):
    try:
        payload = load_checkpoint(path)
        model, config = model_from_checkpoint(payload)
    except FileNotFoundError as exc:
        raise CommandError(f"checkpoint not found: {path}") from exc
    except (ValueError, KeyError, RuntimeError) as exc:
        raise CommandError(f"unusable checkpoint {path}: {exc}") from exc
    return payload, model, config


# --- commands -----------------------------------------------------------------


def cmd_prepare_synthetic(args) -> int:
    out = Path(args.out) if args.out else data_root(args)
    for split_dir in SPLIT_DIRS.values():
        existing = out / split_dir
        if existing.is_dir() and any(existing.iterdir()) and not args.force:
            raise CommandError(f"target {existing} is not empty; pass --force to overwrite")
        if existing.is_dir() and args.force:
            for f in existing.iterdir():
                f.unlink()
    out.mkdir(parents=True, exist_ok=True)
    train, query, gallery = make_synthetic_dataset(
        args.num_ids, args.per_id, (args.height, args.width), seed=args.seed
    )
    write_reid_directory(out, {"train": train, "query": query, "gallery": gallery})
    params = dict(num_ids=args.num_ids, per_id=args.per_id, image_size=[args.height, args.width])
    write_manifest(out, "prepare-synthetic", params, args.seed,
                   {split: out / d for split, d in SPLIT_DIRS.items()}, {})
    print(f"wrote {len(train)} train / {len(query)} query / {len(gallery)} gallery images to {out}")
    return 0


def cmd_init_config(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise CommandError(f"{out} exists; pass --force to overwrite")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.strategy is not None:
        overrides["strategy"] = args.strategy
    out.parent.mkdir(parents=True, exist_ok=True)
    save_config(make_config(args.profile, **overrides), out)
    print(f"wrote {args.profile} config to {out}")
    return 0


def resolve_config(args):
    try:
        config = load_config(args.config)
    except FileNotFoundError as exc:
        raise CommandError(f"config file not found: {args.config}") from exc
    except KeyError as exc:
        raise CommandError(f"invalid config {args.config}: {exc.args[0]}") from exc
    except ValueError as exc:
        raise CommandError(f"invalid config {args.config}: {exc}") from exc
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.strategy is not None:
        changes["strategy"] = args.strategy
    if changes:
        config = make_config("full", **{**config.to_dict(), **changes})
    return config


def cmd_train(args) -> int:
    config = resolve_config(args)
    root = data_root(args)
    out = Path(args.out)
    if args.resume is None:
        prepare_out(out, args.force)
    try:
        train = scan_reid_directory(root, "train")
    except (FileNotFoundError, ValueError) as exc:
        raise CommandError(str(exc)) from exc
    if args.resume is not None:
        try:
            payload = load_checkpoint(args.resume)
        except (FileNotFoundError, ValueError) as exc:
            raise CommandError(f"cannot resume from {args.resume}: {exc}") from exc
        if payload["config"] != config.to_dict():
            raise CommandError(f"config differs from the one stored in {args.resume}")
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.yaml")
    last = fit(config, train, out, resume=args.resume)
    write_manifest(out, "train", config.to_dict(), config.seed,
                   {"checkpoint": last, "metrics": out / "metrics.jsonl", "config": out / "config.yaml"},
                   {"data": root, "resume": args.resume})
    print(f"finished training; last checkpoint {last}")
    return 0


def evaluate(model, config, root: Path):
    query = scan_reid_directory(root, "query")
    gallery = scan_reid_directory(root, "gallery")
    q = extract_features(model, records_to_array(query), config.norm_mean, config.norm_std)
    g = extract_features(model, records_to_array(gallery), config.norm_mean, config.norm_std)
    result = cmc_map(distance_matrix(q, g), [r.pid for r in query], [r.camid for r in query],
                     [r.pid for r in gallery], [r.camid for r in gallery])
    return result


def cmd_eval(args) -> int:
    _, model, config = read_checkpoint(args.checkpoint)
    root = data_root(args)
    try:
        result = evaluate(model, config, root)
    except (FileNotFoundError, ValueError) as exc:
        raise CommandError(str(exc)) from exc
    report = result.report()
    print(result.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        write_manifest(out, "eval", config.to_dict(), config.seed, {"report": out / "report.json"},
                       {"checkpoint": args.checkpoint, "data": root})
    return 0


def attention_heatmap(trace: torch.Tensor, grid_hw: tuple[int, int], image_hw: tuple[int, int]) -> np.ndarray:
    """Last block, mean over heads, class-token row over patches; upsampled and scaled to [0, 1].

    ``trace`` is one image's ``depth x heads x (N+1)`` attention rows. Uniform
    attention yields an all-zero (flat) map.
    """
    row = trace[-1].mean(dim=0)[1:].reshape(1, 1, *grid_hw).to(torch.float64)
    up = F.interpolate(row, size=image_hw, mode="bilinear", align_corners=False)[0, 0]
    lo, hi = up.min(), up.max()
    if float(hi - lo) <= 1e-12 * max(float(hi.abs()), 1.0):
        return np.zeros(image_hw)
    return ((up - lo) / (hi - lo)).numpy()


def overlay(image: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    from matplotlib import colormaps

    colored = colormaps["jet"](heat)[..., :3]
    return np.clip((1 - alpha) * image + alpha * colored, 0, 1)


def collect_images(paths: list[str]) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found.extend(sorted(f for f in p.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES))
        elif p.is_file():
            found.append(p)
        else:
            raise CommandError(f"image path not found: {p}")
    if not found:
        raise CommandError("no images to visualize")
    return found


def load_resized(path: Path, H: int, W: int) -> np.ndarray:
    img = load_image(path)
    if img.shape[:2] != (H, W):
        pil = Image.fromarray(np.rint(img * 255).astype(np.uint8)).resize((W, H), Image.BILINEAR)
        img = np.asarray(pil, dtype=np.float32) / 255.0
    return img


def cmd_visualize(args) -> int:
    _, model, config = read_checkpoint(args.checkpoint)
    out = prepare_out(Path(args.out), args.force)
    paths = collect_images(args.images)
    H, W = config.image_height, config.image_width
    images = np.stack([load_resized(p, H, W) for p in paths])
    batch = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()
    mean = torch.tensor(config.norm_mean).view(1, 3, 1, 1)
    std = torch.tensor(config.norm_std).view(1, 3, 1, 1)
    with torch.no_grad():
        _, trace = model((batch - mean) / std)
    features = extract_features(model, batch.numpy(), config.norm_mean, config.norm_std)

    artifacts = {}
    grid = (model.grid.h, model.grid.w)
    for path, img, tr in zip(paths, images, trace):
        heat = attention_heatmap(tr, grid, (H, W))
        png = out / f"{path.stem}_attention.png"
        Image.fromarray(np.rint(overlay(img, heat) * 255).astype(np.uint8)).save(png)
        artifacts[path.name] = png
    parsed = [parse_reid_filename(p.name) or (-1, -1) for p in paths]
    emb = out / "embeddings.npz"
    np.savez(emb, features=features, pids=np.array([p for p, _ in parsed]),
             camids=np.array([c for _, c in parsed]), names=np.array([p.name for p in paths]))
    artifacts["embeddings"] = emb
    write_manifest(out, "visualize", config.to_dict(), config.seed, artifacts, {"checkpoint": args.checkpoint})
    print(f"wrote {len(paths)} heatmaps and {emb}")
    return 0


def cmd_debug_occlusion(args) -> int:
    """Side-by-side holistic / occluded twins for eyeballing the geometry."""
    root = data_root(args)
    out = prepare_out(Path(args.out), args.force)
    records = scan_reid_directory(root, "train")[: args.count]
    rng = np.random.default_rng(args.seed)
    tiles = []
    for rec in records:
        holistic = torch.from_numpy(rec.image).permute(2, 0, 1).contiguous()
        patch = crop_corner_background(holistic, rng)
        geom = sample_occluder_geometry(holistic.shape[1], holistic.shape[2], rng)
        pair = apply_occlusion(holistic, patch, geom)
        mask_rgb = pair.pixel_mask[None].expand(3, -1, -1)
        tiles.append(torch.cat([pair.holistic, pair.occluded, mask_rgb], dim=2))
    sheet = torch.cat(tiles, dim=1).permute(1, 2, 0).numpy()
    png = out / "occlusion_pairs.png"
    Image.fromarray(np.rint(sheet * 255).astype(np.uint8)).save(png)
    write_manifest(out, "debug-occlusion", None, args.seed, {"sheet": png}, {"data": root})
    print(f"wrote {png}")
    return 0


def cmd_export_canvas(args) -> int:
    payload, _, config = read_checkpoint(args.checkpoint)
    out = prepare_out(Path(args.out), args.force)
    values = payload["tensors"]["canvas"]["values"].numpy()
    np.save(out / "canvas.npy", values)
    png = out / "canvas.png"
    Image.fromarray(np.rint((values.transpose(1, 2, 0) + 1) * 127.5).astype(np.uint8)).save(png)
    write_manifest(out, "export-canvas", config.to_dict(), config.seed,
                   {"array": out / "canvas.npy", "image": png}, {"checkpoint": args.checkpoint})
    print(f"wrote {png}")
    return 0


def cmd_plot_metrics(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(args.metrics)
    try:
        records = [json.loads(line) for line in path.read_text().splitlines() if line]
    except OSError as exc:
        raise CommandError(f"cannot read metrics log {path}: {exc.strerror}") from exc
    if not records:
        raise CommandError(f"metrics log {path} is empty")
    it = [r["iteration"] for r in records]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("id_h", "tri_h", "id_o", "tri_o", "tri_global", "itr", "total"):
        axes[0].plot(it, [r[key] for r in records], label=key)
    axes[0].set_xlabel("iteration")
    axes[0].legend()
    adm = [(i, r["adm"]) for i, r in zip(it, records) if r.get("adm") is not None]
    if adm:
        axes[1].plot(*zip(*adm))
    axes[1].set_title("L_adm")
    axes[1].set_xlabel("iteration")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    print(f"wrote {out}")
    return 0


# --- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adp-reid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data(p):
        p.add_argument("--data", help=f"re-ID data root (default: ${DATA_ENV})")

    p = sub.add_parser("prepare-synthetic", help="write the synthetic desk dataset")
    p.add_argument("--out", help=f"target directory (default: ${DATA_ENV})")
    add_data(p)
    p.add_argument("--seed", type=int, default=DESK_DATASET["seed"])
    p.add_argument("--num-ids", type=int, default=DESK_DATASET["num_ids"])
    p.add_argument("--per-id", type=int, default=DESK_DATASET["per_id"])
    p.add_argument("--height", type=int, default=DESK_DATASET["image_size"][0])
    p.add_argument("--width", type=int, default=DESK_DATASET["image_size"][1])
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_prepare_synthetic)

    p = sub.add_parser("init-config", help="write a complete config file")
    p.add_argument("--profile", choices=["desk", "full"], default="desk")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    add_data(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--strategy", choices=STRATEGIES, help="override the occlusion strategy")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank the query split against the gallery")
    p.add_argument("checkpoint")
    add_data(p)
    p.add_argument("--out", help="directory for report.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="attention heatmaps and an embedding export")
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+", help="image files or directories")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("debug-occlusion", help="render holistic / occluded twins")
    add_data(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_debug_occlusion)

    p = sub.add_parser("export-canvas", help="save the learned noise canvas")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_export_canvas)

    p = sub.add_parser("plot-metrics", help="plot a metrics.jsonl log")
    p.add_argument("metrics")
    p.add_argument("--out", required=True, help="PNG path")
    p.set_defaults(func=cmd_plot_metrics)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (CommandError, OSError) as exc:
        print(f"adp-reid: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
