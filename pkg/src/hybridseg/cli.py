"""Command-line entry points: gen-data, train, eval, inspect-serialization.

Exit codes: 0 success, 2 config or input error, 3 model/data mismatch,
4 numeric failure. ``HTM_THREADS`` caps the worker pool used for scene
generation.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import PRESET_NAMES, resolve_config
from .datagen import SceneSpec, generate_scene
from .errors import (
    ConfigError,
    HybridSegError,
    InputError,
    ModelDataMismatch,
    NumericError,
)
from .fileio import load_point_cloud, load_tensors, save_point_cloud
from .hybrid import STRATEGIES
from .network import init_network_params
from .pointcloud import PointCloud, voxelize
from .serialization import CURVES, serialize
from .training import evaluate, load_checkpoint_into, miou, train


def worker_count() -> int:
    cap = os.environ.get("HTM_THREADS")
    available = os.cpu_count() or 1
    if cap is None:
        return available
    try:
        return max(1, min(int(cap), available))
    except ValueError:
        raise ConfigError(f"HTM_THREADS must be an integer, got {cap!r}")


def _load_scene_dir(path: Path) -> list[PointCloud]:
    if not path.is_dir():
        raise InputError(f"data directory {path} does not exist")
    files = sorted(p for p in path.iterdir() if p.suffix in (".pcs", ".txt", ".xyz"))
    if not files:
        raise InputError(f"data directory {path} holds no .pcs/.txt/.xyz scenes")
    return [load_point_cloud(p) for p in files]


# --------------------------------------------------------------------------
# gen-data
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    names = [f"scene_{i:04d}.pcs" for i in range(args.scenes)]
    if args.format == "text":
        names = [n.replace(".pcs", ".txt") for n in names]
    existing = [n for n in names if (out / n).exists()]
    if existing and not args.force:
        raise InputError(
            f"{out} already holds {len(existing)} of these scenes; rerun with --force to overwrite"
        )
    out.mkdir(parents=True, exist_ok=True)

    def build(i: int) -> str:
        spec = SceneSpec(
            seed=args.seed + i,
            room_extents=tuple(args.room),
            num_points=args.points,
        )
        pc = generate_scene(spec)
        save_point_cloud(out / names[i], pc, fmt=args.format)
        return names[i]

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        written = list(pool.map(build, range(args.scenes)))
    print(f"wrote {len(written)} scenes to {out}")
    return 0


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = resolve_config(args.config)
    if args.strategy is not None:
        cfg.model.strategy = args.strategy
    if args.data is not None:
        cfg.data.train_dir = args.data
    if args.out is not None:
        cfg.out_dir = args.out
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    train_scenes = _load_scene_dir(Path(cfg.data.train_dir))
    val_scenes = (
        _load_scene_dir(Path(cfg.data.val_dir)) if cfg.data.val_dir else None
    )
    result = train(cfg.model, cfg.train, train_scenes, val_scenes, out_dir=cfg.out_dir)
    print(f"best val mIoU {result.best_miou:.2f} at epoch {result.best_epoch}")
    print(f"final val mIoU {result.rows[-1]['val_miou']:.2f}")
    if result.checkpoint_path is not None:
        print(f"checkpoint: {result.checkpoint_path}")
        print(f"metrics: {result.log_path}")
    return 0


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def cmd_eval(args) -> int:
    cfg = resolve_config(args.config)
    scenes = _load_scene_dir(Path(args.data))
    max_label = max(int(pc.labels.max()) for pc in scenes)
    if max_label >= cfg.model.num_classes:
        raise ModelDataMismatch(
            f"data holds label {max_label} but the model has {cfg.model.num_classes} classes"
        )
    params = init_network_params(np.random.default_rng(cfg.seed), cfg.model)
    if args.checkpoint is not None:
        load_checkpoint_into(params, load_tensors(args.checkpoint))
    cm, mean_iou, acc = evaluate(cfg.model, params, scenes)
    ious, _ = miou(cm)
    print(f"{'class':>8}  IoU")
    for c, v in enumerate(ious):
        shown = "  n/a" if np.isnan(v) else f"{100 * v:5.1f}"
        print(f"{c:>8}  {shown}")
    print(f"mIoU {mean_iou:.2f}  accuracy {100 * acc:.2f}")
    if args.dump_predictions is not None:
        dump = Path(args.dump_predictions)
        dump.mkdir(parents=True, exist_ok=True)
        from .network import build_plan, forward_on_plan
        from . import tensor as T

        for i, pc in enumerate(scenes):
            plan = build_plan(pc, cfg.model)
            logits = forward_on_plan(plan, cfg.model, params, point_features=T.Tensor(pc.features))
            pred = np.argmax(logits.data, axis=1)
            save_point_cloud(
                dump / f"pred_{i:04d}.pcs",
                PointCloud(pc.positions, pc.features, pred),
            )
        print(f"wrote {len(scenes)} predicted clouds to {dump}")
    return 0


# --------------------------------------------------------------------------
# inspect-serialization
# --------------------------------------------------------------------------


def cmd_inspect(args) -> int:
    pc = load_point_cloud(args.input)
    voxels = voxelize(pc, args.cell)
    order = serialize(voxels, args.curve)
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "x", "y", "z", "key", "rank"])
        for i in range(voxels.num_voxels):
            writer.writerow(
                [
                    i,
                    voxels.coords[i, 0],
                    voxels.coords[i, 1],
                    voxels.coords[i, 2],
                    int(order.keys[i]),
                    int(order.inv_perm[i]),
                ]
            )
    print(f"wrote {voxels.num_voxels} rows to {out}")
    if args.report_locality:
        centers = voxels.centers()
        for curve in CURVES:
            o = serialize(voxels, curve)
            path_mean = np.linalg.norm(np.diff(centers[o.perm], axis=0), axis=1).mean()
            print(f"mean adjacent distance under {curve}: {path_mean:.4f} m")
    return 0


# --------------------------------------------------------------------------
# Parser and dispatch
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybridseg",
        description="Hybrid attention/scan UNet for point cloud semantic segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic labeled scenes")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--scenes", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--points", type=int, default=4096)
    g.add_argument("--room", type=float, nargs=3, default=[6.0, 6.0, 3.0], metavar=("LX", "LY", "H"))
    g.add_argument("--format", choices=("binary", "text"), default="binary")
    g.add_argument("--force", action="store_true", help="overwrite existing scene files")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a config or preset")
    t.add_argument("--config", required=True, help=f"YAML path or preset {PRESET_NAMES}")
    t.add_argument("--strategy", choices=STRATEGIES, default=None)
    t.add_argument("--data", default=None, help="override data.train_dir")
    t.add_argument("--out", default=None, help="override out_dir")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on labeled scenes")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", default=None, help="named-tensor container; omit for random init")
    e.add_argument("--data", required=True)
    e.add_argument("--dump-predictions", default=None, help="directory for predicted clouds")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("inspect-serialization", help="dump curve keys and ranks as CSV")
    i.add_argument("--input", required=True, help="point cloud file")
    i.add_argument("--curve", choices=CURVES, default="hilbert")
    i.add_argument("--cell", type=float, default=0.05)
    i.add_argument("--out", required=True, help="CSV output path")
    i.add_argument("--report-locality", action="store_true")
    i.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ModelDataMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except HybridSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
