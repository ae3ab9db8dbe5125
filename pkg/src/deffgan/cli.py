"""Command line entry point: ``deffgan {train,sample,eval,inspect}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import torch
from PIL import Image

from .errors import CheckpointError, ConfigError, DeffGanError, InvalidInputError
from .metrics import METRIC_NAMES, evaluate, get_extractor, sample
from .networks import count_parameters
from .pyramid import IMAGE_SUFFIXES, discover_images, load_image, load_image_set, save_grid, save_png
from .trainer import TrainConfig, TrainState, load_checkpoint, run

log = logging.getLogger("deffgan")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    if path.suffix == ".json":
        return json.loads(path.read_text(encoding="utf-8"))
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _parse_overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(args) -> TrainConfig:
    data = read_config_file(args.config) if args.config else {}
    data.update(_parse_overrides(args.set))
    if args.seed is not None:
        data["seed"] = args.seed
    return TrainConfig.from_mapping(data)


def cmd_train(args) -> int:
    config = build_config(args)
    out = Path(args.out)
    if args.resume:
        state = load_checkpoint(args.resume).restore()
        if state.config.to_dict() != config.to_dict() and args.config:
            raise UsageError("resumed runs keep their original configuration; drop --config/--set")
    else:
        images, names = load_image_set(args.data, config.final_max_dim)
        if not images:
            raise UsageError(f"no images found in {args.data}")
        state = TrainState.create(images, config, class_names=names)
        out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "run_name": out.name,
            "config_path": str(args.config) if args.config else None,
            "input_dir": str(args.data),
            "class_mapping": {name: i for i, name in enumerate(names)},
            "images": [img.source_path for img in images],
            "created": datetime.now(timezone.utc).isoformat(),
            "config_hash": config.config_hash(),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    run(state, out)
    print(f"finished {state.config.num_stages} stages; checkpoint at {out / 'last.ckpt'}")
    return EXIT_OK


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    images = sample(ckpt, args.n, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        save_png(img, out / f"sample_{i:04d}.png")
    if images:
        save_grid(torch.stack(images[:64]), out / "grid.png")
    print(f"wrote {len(images)} samples to {out}")
    return EXIT_OK


def _image_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise UsageError(f"image directory not found: {directory}")
    files = sorted(
        p for p in directory.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES and p.name != "grid.png"
    )
    if not files:
        raise UsageError(f"no images in {directory}")
    return files


def _longest_side(path) -> int:
    with Image.open(path) as im:
        return max(im.size)


def cmd_eval(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in metrics if m not in METRIC_NAMES]
    if unknown:
        raise UsageError(f"unknown metric(s) {unknown}; choose from {list(METRIC_NAMES)}")
    config_hash = ""
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        generated = sample(ckpt, args.n, seed=args.seed)
        reals = list(ckpt.images.unbind(0))
        names = [Path(p).name or f"input_{i}" for i, p in enumerate(ckpt.source_paths)]
        config_hash = ckpt.train_config.config_hash()
    else:
        if not (args.real and args.fake):
            raise UsageError("eval needs --ckpt or both --real and --fake")
        fake_files = _image_files(args.fake)
        size = _longest_side(fake_files[0])
        generated = [load_image(p, size).pixels for p in fake_files]
        dims = {tuple(g.shape) for g in generated}
        if len(dims) > 1:
            raise UsageError(f"generated images differ in size: {sorted(dims)}")
        real_files = _image_files(args.real)
        reals = [load_image(p, size).pixels for p in real_files]
        names = [p.name for p in real_files]
    extractor = get_extractor(args.extractor)
    report = evaluate(reals, generated, metrics, extractor, names, config_hash=config_hash, seed=args.seed)
    jpath, cpath = report.write(args.out)
    for key, value in sorted(report.metrics.items()):
        print(f"{key}: {value:.6f}")
    print(f"report: {jpath} ({cpath.name})")
    return EXIT_OK


def checkpoint_summary(ckpt) -> dict:
    gen = ckpt.build_generator()
    spec = ckpt.pyramid_spec
    mults = gen.lr_multipliers
    rows = [
        {
            "stage": i,
            "dims": list(spec.stage_dims[i]),
            "params": count_parameters(stage),
            "lr_multiplier": mults[i],
            "frozen": mults[i] == 0,
        }
        for i, stage in enumerate(gen.stages)
    ]
    shared = {"head": count_parameters(gen.head), "to_rgb": count_parameters(gen.to_rgb)}
    return {
        "stages": rows,
        "shared": shared,
        "total_params": count_parameters(gen),
        "planned_stages": spec.num_stages,
        "stage_in_training": ckpt.stage,
        "iteration": ckpt.iteration,
        "finished": ckpt.finished,
        "config": ckpt.config,
    }


def cmd_inspect(args) -> int:
    summary = checkpoint_summary(load_checkpoint(args.ckpt))
    if args.json:
        print(json.dumps(summary, indent=2))
        return EXIT_OK
    print(f"stages trained: {len(summary['stages'])}/{summary['planned_stages']}"
          f"  (stage {summary['stage_in_training']}, iteration {summary['iteration']},"
          f" finished={summary['finished']})")
    print(f"{'stage':>5} {'dims':>9} {'params':>9} {'lr_mult':>8}")
    for row in summary["stages"]:
        h, w = row["dims"]
        print(f"{row['stage']:>5} {f'{h}x{w}':>9} {row['params']:>9} {row['lr_multiplier']:>8.4g}")
    for name, n in summary["shared"].items():
        print(f"{name:>5} {'-':>9} {n:>9}")
    print(f"total parameters: {summary['total_params']}")
    print("config:")
    for key, value in sorted(summary["config"].items()):
        print(f"  {key} = {value}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deffgan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a directory of images")
    p.add_argument("--config", help="TOML or JSON file of TrainConfig keys")
    p.add_argument("--data", help="image directory (subdirectories = classes, else one class per file)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--resume", help="continue from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="write generated PNGs from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("-n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="samples")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="compute SIFID / LPIPS / FID / pixel diversity")
    p.add_argument("--real")
    p.add_argument("--fake")
    p.add_argument("--ckpt", help="sample from this checkpoint instead of --fake")
    p.add_argument("-n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics", default="sifid,lpips,fid")
    p.add_argument("--extractor", default="random", choices=["random", "vgg"])
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="summarise a checkpoint")
    p.add_argument("ckpt")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train" and not args.resume and not args.data:
        print("error: train needs --data (or --resume)", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid config key '{exc.key}': {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, CheckpointError, InvalidInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DeffGanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
