"""Command-line interface: ``glassmat <command> [flags]``.

Exit codes: 0 ok, 2 usage/validation, 3 numeric failure, 4 checkpoint
mismatch, 5 empty geometry. ``NEMTO_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_CHECKPOINT = 4
EXIT_EMPTY = 5

SHAPES = {
    "sphere": {"type": "sphere", "center": [0.0, 0.0, 0.0], "radius": 1.0},
    "box": {"type": "box", "center": [0.0, 0.0, 0.0], "half_extents": [0.7, 0.7, 0.7]},
    "torus": {"type": "torus", "center": [0.0, 0.0, 0.0], "major_radius": 0.9, "minor_radius": 0.35},
}

log = logging.getLogger("glassmat")


class UsageError(Exception):
    pass


def _positive_int(name, value, minimum=1):
    if value < minimum:
        raise UsageError(f"--{name} must be >= {minimum} (got {value})")
    return value


def resolve_shape(spec: str) -> dict:
    if spec in SHAPES:
        return SHAPES[spec]
    if spec.startswith("csg:"):
        path = Path(spec[4:])
        if not path.is_file():
            raise UsageError(f"CSG description {path} not found")
        try:
            return json.loads(path.read_text())
        except ValueError as exc:
            raise UsageError(f"cannot parse {path}: {exc}") from exc
    raise UsageError(f"unknown shape {spec!r}; use sphere, box, torus or csg:<file>")


def _env(spec):
    from .envmap import PfmError, resolve_env

    if not spec.startswith("procedural:") and not Path(spec).is_file():
        raise UsageError(f"environment map {spec} not found")
    try:
        return resolve_env(spec)
    except (PfmError, ValueError, OSError) as exc:
        raise UsageError(f"cannot load environment map {spec}: {exc}") from exc


def _dataset(root, load_images=True):
    from .dataset import DatasetError, load_dataset

    try:
        return load_dataset(root, load_images)
    except (DatasetError, OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _write_views(out, names, images, masks):
    from .dataset import save_mask
    from .envmap import save_png, write_pfm

    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for name, img, mask in zip(names, images, masks):
        write_pfm(out / "images" / f"{name}.pfm", img)
        save_png(out / "images" / f"{name}.png", img)
        save_mask(out / "masks" / f"{name}.png", mask)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args):
    from .oracle import SyntheticScene, generate_dataset
    from .sdf import field_from_dict

    _positive_int("views", args.views)
    _positive_int("res", args.res, 2)
    if args.ior <= 0:
        raise UsageError("--ior must be positive")
    shape = resolve_shape(args.shape)
    try:
        field = field_from_dict(shape)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid shape description: {exc}") from exc
    env = _env(args.env)
    scene = SyntheticScene(field, env, args.ior)
    out = generate_dataset(scene, args.views, args.out, args.res, args.seed, args.radius, args.fov)
    n_train = args.views // 2
    print(f"wrote {args.views} views ({n_train} train / {args.views - n_train} test) to {out}")


def cmd_train(args):
    from .training import TrainConfig, train

    cfg_dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config {path} not found")
        try:
            cfg_dict = json.loads(path.read_text())
        except ValueError as exc:
            raise UsageError(f"cannot parse config {path}: {exc}") from exc
    for key in ("iterations", "seed", "geometry"):
        value = getattr(args, key)
        if value is not None:
            cfg_dict[key] = value
    if args.freeze_geometry:
        cfg_dict["freeze_geometry"] = True
    try:
        config = TrainConfig.from_dict(cfg_dict)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    ds = _dataset(args.dataset)
    if config.geometry == "analytic" and not ds.meta.get("shape"):
        raise UsageError("analytic geometry needs a dataset with a shape description")
    model, rows = train(ds, config, args.out)
    last = rows[-1] if rows else None
    summary = f"trained {len(rows)} iterations into {args.out}"
    if last is not None:
        summary += f"; final loss {last['loss_total']:.6g}"
    print(summary)


def _load_model(path):
    from .checkpoint import load_checkpoint

    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    model, config, _, meta = load_checkpoint(path)
    return model, meta


def _render_split(model, dataset, split, env):
    views = dataset.split(split)
    if not views:
        raise UsageError(f"dataset has no {split!r} views")
    names, images, masks = [], [], []
    for v in views:
        rgb, mask, _ = model.render_view(v.camera, env)
        names.append(f"view_{v.index:04d}")
        images.append(rgb)
        masks.append(mask)
    return names, images, masks


def cmd_render(args):
    model, _ = _load_model(args.checkpoint)
    ds = _dataset(args.dataset, load_images=False)
    names, images, masks = _render_split(model, ds, args.split, ds.env)
    _write_views(args.out, names, images, masks)
    print(f"rendered {len(names)} {args.split} views to {args.out}")


def cmd_relight(args):
    model, _ = _load_model(args.checkpoint)
    env = _env(args.env)
    ds = _dataset(args.dataset, load_images=False)
    names, images, masks = _render_split(model, ds, args.split, env)
    _write_views(args.out, names, images, masks)
    print(f"relit {len(names)} {args.split} views with {args.env} into {args.out}")


def cmd_extract_mesh(args):
    from .mesh import MAX_RESOLUTION, MIN_RESOLUTION, extract_mesh

    if not MIN_RESOLUTION <= args.resolution <= MAX_RESOLUTION:
        raise UsageError(f"--resolution must be in [{MIN_RESOLUTION}, {MAX_RESOLUTION}]")
    model, _ = _load_model(args.checkpoint)
    mesh = extract_mesh(model.field, args.resolution)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    mesh.save_obj(args.out)
    print(f"wrote {len(mesh.vertices)} vertices / {len(mesh.faces)} faces to {args.out}")


def _image_dir(root: Path):
    return root / "images" if (root / "images").is_dir() else root


def _eval_meshes(args):
    from .mesh import TriangleMesh
    from .metrics import chamfer_l1

    rng = np.random.default_rng(args.seed)
    a = TriangleMesh.load_obj(args.pred)
    b = TriangleMesh.load_obj(args.ref)
    if len(a.faces) == 0 or len(b.faces) == 0:
        raise UsageError("mesh without faces")
    value = chamfer_l1(a.sample_points(args.samples, rng), b.sample_points(args.samples, rng))
    return [{"view": Path(args.pred).stem, "chamfer_l1": value}]


def _eval_images(args):
    from . import metrics
    from .dataset import load_mask
    from .envmap import read_pfm, tonemap

    pred_root, ref_root = Path(args.pred), Path(args.ref)
    for p in (pred_root, ref_root):
        if not p.is_dir():
            raise UsageError(f"{p} is not a directory")
    pred_dir, ref_dir = _image_dir(pred_root), _image_dir(ref_root)
    names = sorted(p.stem for p in pred_dir.glob("*.pfm"))
    names = [n for n in names if (ref_dir / f"{n}.pfm").exists()]
    if not names:
        raise UsageError("no matching .pfm images between --pred and --ref")
    rows = []
    for name in names:
        pred = read_pfm(pred_dir / f"{name}.pfm")
        ref = read_pfm(ref_dir / f"{name}.pfm")
        if pred.shape != ref.shape:
            raise UsageError(f"{name}: dimension mismatch {pred.shape} vs {ref.shape}")
        pred, ref = tonemap(pred), tonemap(ref)
        mask = None
        if args.masked:
            mpath = ref_root / "masks" / f"{name}.png"
            if not mpath.exists():
                raise UsageError(f"--masked needs {mpath}")
            mask = load_mask(mpath)
        row = {"view": name, "psnr": metrics.psnr(pred, ref, mask), "ssim": metrics.ssim(pred, ref, mask)}
        pm, rm = pred_root / "masks" / f"{name}.png", ref_root / "masks" / f"{name}.png"
        if pm.exists() and rm.exists():
            row["mask_iou"] = metrics.mask_iou(load_mask(pm), load_mask(rm))
        rows.append(row)
    return rows


def cmd_eval(args):
    from .metrics import MetricError, write_report

    is_mesh = str(args.pred).endswith(".obj") or str(args.ref).endswith(".obj")
    if is_mesh:
        for p in (args.pred, args.ref):
            if not Path(p).is_file():
                raise UsageError(f"{p} not found")
    try:
        rows = _eval_meshes(args) if is_mesh else _eval_images(args)
    except MetricError as exc:
        raise UsageError(str(exc)) from exc
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    tsv = report.with_suffix(".tsv")
    result = write_report(rows, report, tsv)
    agg = " ".join(f"{k}={v:.4f}" for k, v in result["aggregate"].items())
    print(f"evaluated {len(rows)} item(s): {agg}")


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glassmat", description="Transparent-object matting toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic oracle dataset")
    g.add_argument("--shape", default="sphere")
    g.add_argument("--ior", type=float, default=1.4723)
    g.add_argument("--env", default="procedural:gradient",
                   help="PFM/PNG path or procedural:<gradient|sky|checker|constant:r,g,b>")
    g.add_argument("--views", type=int, default=20)
    g.add_argument("--res", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--radius", type=float, default=4.0, help="camera distance")
    g.add_argument("--fov", type=float, default=40.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="optimise geometry and ray bending network")
    t.add_argument("--dataset", required=True)
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--freeze-geometry", action="store_true")
    t.add_argument("--geometry", choices=("learned", "analytic"))
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render dataset views with a trained model")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--split", default="test", choices=("train", "test"))
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    rl = sub.add_parser("relight", help="render with a different environment map")
    rl.add_argument("--checkpoint", required=True)
    rl.add_argument("--env", required=True)
    rl.add_argument("--dataset", required=True, help="dataset supplying the cameras")
    rl.add_argument("--split", default="test", choices=("train", "test"))
    rl.add_argument("--out", required=True)
    rl.set_defaults(func=cmd_relight)

    m = sub.add_parser("extract-mesh", help="marching cubes on the learned SDF")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--resolution", type=int, default=128)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_extract_mesh)

    e = sub.add_parser("eval", help="image or mesh metrics")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--masked", action="store_true")
    e.add_argument("--report", required=True, help="JSON report path (a .tsv is written next to it)")
    e.add_argument("--samples", type=int, default=20000, help="points per mesh for chamfer")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)
    return p


def _thread_limit():
    value = os.environ.get("NEMTO_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"NEMTO_THREADS must be an integer (got {value!r})") from None
    if n < 1:
        raise UsageError("NEMTO_THREADS must be >= 1")
    return n


def main(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    from .checkpoint import CheckpointError
    from .mesh import EmptyLevelSet
    from .training import NonFiniteLoss

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limit = _thread_limit()
        with threadpool_limits(limits=limit):
            args.func(args)
    except UsageError as exc:
        print(f"glassmat {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        print(f"glassmat {args.command}: {exc} (step {exc.step})", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"glassmat {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"glassmat {args.command}: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except EmptyLevelSet as exc:
        print(f"glassmat {args.command}: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
