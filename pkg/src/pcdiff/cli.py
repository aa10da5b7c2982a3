"""Command-line entry point: gen-data | train | reconstruct | render | eval."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .diffusion import PointCloud
from .io import (SHAPE_KINDS, gen_synthetic, load_dataset, load_ply, load_png, load_scene, save_ply,
                 save_png, save_scene)
from .pipeline import TrainConfig, evaluate, evaluate_clouds, format_report, load_model, reconstruct, train
from .renderer import render

log = logging.getLogger("pcdiff")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_id() -> str:
    """SHA-1 over the package sources, shortened like a git revision."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def _log_run(command: str, config: dict, seed) -> None:
    log.info("command=%s build=%s seed=%s", command, build_id(), seed)
    log.info("config=%s", json.dumps(config, sort_keys=True, default=str))


# -- subcommands ------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    kinds = args.kinds or list(SHAPE_KINDS)
    _log_run("gen-data", vars(args), args.seed)
    out = Path(args.out)
    for i, kind in enumerate(kinds):
        sample = gen_synthetic(kind, args.n_points, seed=args.seed + i, mask_radius=args.mask_radius)
        path = save_scene(out, sample)
        print(path)
    return 0


def cmd_train(args) -> int:
    doc = json.loads(Path(args.config).read_text())
    if args.data:
        doc["data_dir"] = args.data
    if args.out:
        doc["out"] = args.out
    cfg = TrainConfig.from_dict(doc)
    if not cfg.data_dir:
        raise UsageError("train: no data directory (set data_dir in the config or pass --data)")
    out = cfg.out or "model.pcdm"
    _log_run("train", cfg.to_dict(), cfg.seed)
    dataset = load_dataset(cfg.data_dir)
    result = train(cfg, dataset, resume=args.resume, out=out, stop_at=args.stop_at)
    print(result.path)
    return 0


def cmd_reconstruct(args) -> int:
    _log_run("reconstruct", vars(args), args.seed)
    model = load_model(args.ckpt)
    scene = load_scene(args.scene)
    image = load_png(args.image)
    n_points = args.n_points or (scene.cloud.n_points if scene.cloud is not None else 256)
    trace = reconstruct(model, image, scene.camera, seed=args.seed, trace_stride=args.trace_stride,
                        n_points=n_points)
    save_ply(args.out, trace.final, binary=args.binary)
    if args.trace_dir:
        tdir = Path(args.trace_dir)
        for step, cloud in zip(trace.steps, trace.clouds):
            save_ply(tdir / f"step_{step:04d}.ply", cloud, binary=True)
    print(args.out)
    return 0


def cmd_render(args) -> int:
    _log_run("render", vars(args), None)
    scene = load_scene(args.scene)
    cloud = load_ply(args.cloud) if args.cloud else scene.cloud
    if cloud is None or cloud.colors is None:
        raise ValueError("render needs a colored cloud")
    cam = scene.camera
    if args.size:
        cam = cam.resized(args.size, args.size)
    img = render(cloud.positions, cloud.colors, cam, scene.render_config()).data
    save_png(args.out, img)
    print(args.out)
    return 0


def cmd_eval(args) -> int:
    _log_run("eval", vars(args), args.seed)
    samples = load_dataset(args.data)
    if args.pred_dir:
        preds = [load_ply(Path(args.pred_dir) / f"{s.name}.ply") for s in samples]
        rows = evaluate_clouds([s.name for s in samples], preds, [s.cloud for s in samples])
    elif args.ckpt:
        rows, _ = evaluate(load_model(args.ckpt), samples, seed=args.seed)
    else:
        raise UsageError("eval: pass --ckpt or --pred-dir")
    report = format_report(rows)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(report)
    sys.stdout.write(report)
    mean = rows[-1]
    print(f"mean CD x1e3 {mean['cd'] * 1e3:.3f} EMD x1e2 {mean['emd'] * 1e2:.3f}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pcdiff", description="Colored point-cloud reconstruction by conditional diffusion.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write synthetic scenes (ply + png + json)")
    g.add_argument("--out", required=True)
    g.add_argument("--kinds", nargs="+", choices=SHAPE_KINDS)
    g.add_argument("--n-points", type=int, default=256)
    g.add_argument("--mask-radius", type=float, default=0.3)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train from a JSON config mirroring TrainConfig")
    t.add_argument("--config", required=True)
    t.add_argument("--data", help="scene directory (overrides data_dir)")
    t.add_argument("--out", help="checkpoint path (overrides out)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-at", type=int, help="stop early at this step")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("reconstruct", help="sample a colored cloud conditioned on an image")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--n-points", type=int)
    r.add_argument("--trace-stride", type=int, default=0)
    r.add_argument("--trace-dir")
    r.add_argument("--binary", action="store_true")
    r.set_defaults(fn=cmd_reconstruct)

    d = sub.add_parser("render", help="render a colored cloud with a scene's camera")
    d.add_argument("--scene", required=True)
    d.add_argument("--cloud", help="PLY to render (default: the scene's own cloud)")
    d.add_argument("--out", required=True)
    d.add_argument("--size", type=int)
    d.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="CD / EMD report over a scene directory")
    e.add_argument("--data", required=True)
    src = e.add_mutually_exclusive_group()
    src.add_argument("--ckpt")
    src.add_argument("--pred-dir", help="directory of <name>.ply predictions")
    e.add_argument("--report")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except Exception as exc:
        print(f"pcdiff: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
