"""Command-line entry point: synth, prepare, train, render, extract, eval.

Every command writes only below its --out directory, exits 0 on success and
prints a single `error[<Class>]: message` line on failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import secrets
import sys
from contextlib import ExitStack
from importlib import resources
from pathlib import Path

import numpy as np

from . import config as cfg
from .errors import NerfkitError, UsageError

log = logging.getLogger("nerfkit")

BUNDLED = ("sphere_ring.spec", "density.cfg", "sdf.cfg")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("nerfkit") / "data" / name))


def resolve_input(path: str) -> Path:
    """A real path, or the name of a bundled file (with or without extension)."""
    p = Path(path)
    if p.exists():
        return p
    for name in BUNDLED:
        if path in (name, name.rsplit(".", 1)[0]):
            return bundled_path(name)
    raise UsageError(f"no such file: {path}")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _inside(out: Path, name: str) -> Path:
    p = (out / name).resolve()
    if out.resolve() not in p.parents and p != out.resolve():
        raise UsageError(f"refusing to write outside {out}: {name}")
    return p


def _seed(args) -> int:
    if args.seed is None:
        args.seed = secrets.randbelow(2**31)
    print(f"seed: {args.seed}")
    return args.seed


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .dataio import load_scene_spec, save_dataset, synth_scene

    spec = load_scene_spec(resolve_input(args.spec))
    ds = synth_scene(spec, args.size)
    out = _out_dir(args.out)
    save_dataset(ds, out)
    n_train, n_val = len(ds.split("train")), len(ds.split("val"))
    print(f"wrote {len(ds.views)} views ({n_train} train, {n_val} val) "
          f"at {ds.views[0].camera.width}x{ds.views[0].camera.height} to {out}")
    return 0


def cmd_prepare(args) -> int:
    from .dataio import Dataset, colmap_views, parse_colmap, save_dataset

    model = parse_colmap(args.colmap)
    bounds = (args.near, args.far) if args.near is not None and args.far is not None else None
    views, missing = colmap_views(model, args.images, args.val_every, bounds)
    if missing:
        for name in missing:
            print(f"missing image: {name}", file=sys.stderr)
        if not args.allow_missing:
            raise UsageError(f"{len(missing)} registered image(s) not found in {args.images}: "
                             + ", ".join(missing))
        views = [v for v in views if Path(v.image_path).is_file()]
    if not views:
        raise UsageError("no usable views")
    if args.bbox:
        lo, hi = tuple(args.bbox[:3]), tuple(args.bbox[3:])
    elif model.points:
        xyz = np.asarray([p for p, _ in model.points.values()])
        a, b = np.percentile(xyz, 1, axis=0), np.percentile(xyz, 99, axis=0)
        pad = 0.1 * (b - a) + 1e-6
        lo, hi = tuple(map(float, a - pad)), tuple(map(float, b + pad))
    else:
        lo, hi = (-1.0,) * 3, (1.0,) * 3
    ds = Dataset(views, tuple(args.background), lo, hi)
    out = _out_dir(args.out)
    save_dataset(ds, out, write_images=False)
    print(f"wrote {len(views)} views to {out}")
    return 0


def _train_config(args):
    from .train import TRAIN_SCHEMA, TrainConfig

    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.backend:
        overrides["backend"] = args.backend
    if args.iterations is not None:
        overrides["iterations"] = str(args.iterations)
    overrides["seed"] = str(args.seed)
    path = resolve_input(args.config) if args.config else None
    values = TRAIN_SCHEMA.load(path, overrides) if path else TRAIN_SCHEMA.parse("", None, overrides)
    return TrainConfig(**values)


def cmd_train(args) -> int:
    from .dataio import load_dataset
    from .train import train

    _seed(args)
    config = _train_config(args)
    ds = load_dataset(args.dataset)
    out = _out_dir(args.out)
    _inside(out, "config.cfg").write_text(cfg.dump(config.to_dict()))
    print(cfg.dump(config.to_dict()), end="")

    def emit(rec):
        log.info(json.dumps(rec))

    fld, report = train(ds, config, log=emit, checkpoint_dir=out if config.checkpoint_interval else None)
    ckpt = _inside(out, "model.ckpt")
    fld.save(ckpt, extra={"train_config": config.to_dict(), "iteration": config.iterations,
                          "background": list(ds.background)})
    report.write(_inside(out, "report.jsonl"))
    summary = " ".join(f"{k}={v}" for k, v in report.final.items() if k != "final")
    print(f"final {summary}")
    print(f"checkpoint: {ckpt}")
    return 0


def _orbit_cameras(args, fld):
    from .dataio import CameraRing, SceneSpec

    ring = CameraRing(count=args.orbit, radius=args.radius, elevation=(args.elevation,), fov=args.fov, val_every=0)
    return SceneSpec([], ring=ring, width=args.size, height=args.size).cameras()


def _load_checkpoint(path):
    from .fields import load_field

    fld, meta = load_field(path)
    bg = tuple(meta.get("background", (0.0, 0.0, 0.0)))
    return fld, meta, bg


def _views_for(args, fld):
    """(name, camera, gt image or None) from a dataset split or an orbit."""
    if args.dataset:
        from .dataio import load_dataset

        ds = load_dataset(args.dataset)
        views = ds.views if args.split == "all" else ds.split(args.split)
        return [(v.name, v.camera, v.image) for v in views]
    if args.orbit:
        return [(f"{k:03d}", c, None) for k, c in enumerate(_orbit_cameras(args, fld))]
    raise UsageError("give a pose source: --dataset DIR or --orbit N")


def cmd_render(args) -> int:
    from .dataio import to_uint8, write_png
    from .evalmetrics import psnr
    from .render import render_image, write_depth

    fld, _, bg = _load_checkpoint(args.checkpoint)
    if args.background is not None:
        bg = tuple(args.background)
    out = _out_dir(args.out)
    bbox = (fld.config.grid.bbox_min, fld.config.grid.bbox_max)
    for name, cam, gt in _views_for(args, fld):
        rgb, depth, _ = render_image(fld, cam, args.samples, bg, bbox)
        img = to_uint8(rgb)
        write_png(_inside(out, f"{name}.png"), img)
        if args.depth:
            write_depth(_inside(out, f"{name}.depth"), depth)
        line = f"rendered {name}.png"
        if gt is not None:
            line += f" psnr={psnr(img, gt, 255.0):.4f}"
        print(line)
    return 0


def cmd_extract(args) -> int:
    from . import geometry as geo
    from .dataio import to_uint8, write_png

    if args.texture and args.mode != "mesh":
        raise UsageError("--texture requires --mode mesh")
    fld, _, _ = _load_checkpoint(args.checkpoint)
    out = _out_dir(args.out)
    if args.mode == "points":
        if not (args.dataset or args.orbit):
            args.orbit = 8
        cams = [c for _, c, _ in _views_for(args, fld)]
        pc = geo.extract_pointcloud(fld, cams, args.stride, args.samples, args.threshold)
        path = _inside(out, "points.ply")
        geo.write_ply(path, pc)
        print(f"wrote {len(pc)} points to {path}")
        return 0
    mesh = geo.extract_mesh(fld, args.resolution, args.iso, "tsdf" if args.truncated else "auto")
    if mesh.n_triangles == 0:
        raise UsageError("no isosurface found; try another --iso")
    path = _inside(out, "mesh.obj")
    if args.texture:
        atlas = geo.build_atlas(mesh, args.texture_size)
        tex = geo.bake_texture(atlas.mesh, fld, args.texture_size)
        write_png(_inside(out, "mesh.png"), to_uint8(tex.image))
        geo.write_obj(path, atlas.mesh, texture_file="mesh.png", material=tex.material)
        print(f"wrote {atlas.mesh.n_triangles} triangles, {len(np.unique(atlas.chart_of_face))} charts to {path}")
    else:
        mesh = geo.color_vertices(mesh, fld)
        geo.write_obj(path, mesh)
        print(f"wrote {mesh.n_triangles} triangles to {path}")
    return 0


def _images_in(path: Path) -> dict:
    if path.is_dir():
        return {p.name: p for p in sorted(path.glob("*.png"))}
    return {path.name: path}


def _report(metric, value, **inputs):
    fields = " ".join(f"{k}={v}" for k, v in inputs.items())
    print(f"{metric} value={value!r} {fields}".rstrip())


def _cloud(path: Path, samples: int, seed: int):
    from . import geometry as geo

    if path.suffix.lower() == ".ply":
        return geo.read_ply(path).points
    if path.suffix.lower() == ".obj":
        mesh = geo.read_obj(path)
        return geo.sample_surface(mesh, samples, seed) if samples else mesh.vertices
    raise UsageError(f"unsupported geometry file {path}")


def cmd_eval(args) -> int:
    from .dataio import read_png
    from .evalmetrics import chamfer, crop, psnr

    a, b = Path(args.a), Path(args.b)
    if args.mode == "psnr":
        ia, ib = _images_in(a), _images_in(b)
        if a.is_dir() and b.is_dir():
            names = sorted(set(ia) & set(ib))
            pairs = [(ia[n], ib[n]) for n in names]
        else:
            pairs = list(zip(ia.values(), ib.values()))
        if not pairs:
            raise UsageError("no matching PNG files to compare")
        vals = []
        for pa, pb in pairs:
            v = psnr(crop(read_png(pa), args.crop), crop(read_png(pb), args.crop), args.max_intensity)
            vals.append(v)
            _report("psnr", v, a=pa, b=pb)
        _report("psnr_mean", float(np.mean(vals)), count=len(vals))
        return 0
    _seed(args)
    ca, cb = _cloud(a, args.samples, args.seed), _cloud(b, args.samples, args.seed + 1)
    _report("chamfer", chamfer(ca, cb), a=a, b=b)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for all randomness (printed if omitted)")
    common.add_argument("--threads", type=int, default=None, help="cap worker threads")
    common.add_argument("--deterministic", action="store_true", help="single-threaded fixed-order reductions")
    common.add_argument("--verbose", "-v", action="store_true")

    p = _Parser(prog="nerfkit", description="Hash-grid radiance fields and geometry extraction")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="render an analytic scene into a dataset")
    s.add_argument("spec", help="scene spec file (or bundled name, e.g. sphere_ring)")
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=None, help="override image width and height")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", parents=[common], help="convert a COLMAP text model into a dataset")
    s.add_argument("colmap", help="directory with cameras.txt, images.txt, points3D.txt")
    s.add_argument("images", help="directory with the registered images")
    s.add_argument("--out", required=True)
    s.add_argument("--allow-missing", action="store_true")
    s.add_argument("--val-every", type=int, default=8)
    s.add_argument("--near", type=float, default=None)
    s.add_argument("--far", type=float, default=None)
    s.add_argument("--bbox", type=float, nargs=6, default=None, metavar=("X0", "Y0", "Z0", "X1", "Y1", "Z1"))
    s.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", parents=[common], help="fit a field to a dataset")
    s.add_argument("dataset")
    s.add_argument("--config", default=None, help="config file (or bundled density / sdf)")
    s.add_argument("--out", required=True)
    s.add_argument("--backend", choices=("density", "sdf"), default=None)
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.set_defaults(func=cmd_train)

    pose = _Parser(add_help=False)
    pose.add_argument("--dataset", default=None, help="take poses from this dataset")
    pose.add_argument("--split", default="val", choices=("train", "val", "all"))
    pose.add_argument("--orbit", type=int, default=0, help="number of orbit poses")
    pose.add_argument("--radius", type=float, default=2.5)
    pose.add_argument("--elevation", type=float, default=20.0)
    pose.add_argument("--fov", type=float, default=40.0)
    pose.add_argument("--size", type=int, default=128)
    pose.add_argument("--samples", type=int, default=128, help="samples per ray")

    s = sub.add_parser("render", parents=[common, pose], help="render views of a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--depth", action="store_true", help="also write depth maps")
    s.add_argument("--background", type=float, nargs=3, default=None)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("extract", parents=[common, pose], help="extract a point cloud or mesh")
    s.add_argument("checkpoint")
    s.add_argument("--mode", choices=("points", "mesh"), default="mesh")
    s.add_argument("--out", required=True)
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--threshold", type=float, default=0.5, help="opacity gate for point extraction")
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--iso", type=float, default=None, help="density threshold (density) or SDF level")
    s.add_argument("--truncated", action="store_true", help="mesh the truncated SDF")
    s.add_argument("--texture", action="store_true", help="unwrap and bake a texture atlas")
    s.add_argument("--texture-size", type=int, default=1024)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("eval", parents=[common], help="compute PSNR or Chamfer distance")
    s.add_argument("mode", choices=("psnr", "chamfer"))
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--max-intensity", type=float, default=255.0)
    s.add_argument("--crop", type=int, default=0)
    s.add_argument("--samples", type=int, default=10000, help="surface samples per OBJ input (0: vertices)")
    s.set_defaults(func=cmd_eval)
    return p


def _limits(args, stack: ExitStack) -> None:
    threads = 1 if args.deterministic else args.threads
    if threads is None:
        return
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    # BLAS is the only threaded code path; the numba kernels are serial
    stack.enter_context(threadpool_limits(limits=threads))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(message)s", stream=sys.stderr)
        with ExitStack() as stack:
            _limits(args, stack)
            return args.func(args)
    except NerfkitError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
