"""Command-line entry point.

Subcommands wire the full pipeline: bake supervision data from an
analytic scene, train the field, render images and opacity maps,
extract meshes, evaluate reconstructions, and compare the object
opacity formulations.  Logs go to stderr; machine-readable output goes
to stdout or files.  Exit codes: 0 success, 1 validation error (bad
flags, config, or inputs), 2 runtime failure.

Heavy imports happen inside the handlers so that ``--threads`` can pin
the BLAS/numba pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import DatasetError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _log(msg: str) -> None:
    sys.stderr.write(msg + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sdfrecon", description=__doc__.split("\n\n")[1])
    p.add_argument("--threads", type=int, metavar="N", help="cap worker threads")
    p.add_argument("--seed", type=int, default=None, help="global random seed")
    sub = p.add_subparsers(dest="command", metavar="command")

    b = sub.add_parser("bake", parser_class=_Parser, help="render supervision data from an analytic scene")
    b.add_argument("--scene", required=True, help="scene config (TOML)")
    b.add_argument("--cameras", required=True, help="cameras.json or orbit:<n>")
    b.add_argument("--out", required=True, help="output dataset directory")
    b.add_argument("--width", type=int, default=128, help="image width (orbit cameras)")
    b.add_argument("--height", type=int, default=128, help="image height (orbit cameras)")
    b.add_argument("--orbit-radius", type=float, default=None, help="orbit radius (scene units)")
    b.add_argument("--orbit-elevation", type=float, default=None, help="orbit camera height")
    b.add_argument("--fov", type=float, default=60.0, help="field of view (degrees)")
    b.add_argument("--depth-noise", action="store_true", help="apply per-image affine depth corruption")

    t = sub.add_parser("train", parser_class=_Parser, help="train the object-compositional field")
    t.add_argument("--config", required=True, help="training config (TOML)")
    t.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    t.add_argument("--iterations", type=int, default=None, help="override config iterations")
    t.add_argument("--dataset", default=None, help="override config dataset path")
    t.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints")

    r = sub.add_parser("render", parser_class=_Parser, help="render images from a checkpoint")
    r.add_argument("--checkpoint", required=True, help="field checkpoint")
    r.add_argument("--dataset", required=True, help="dataset providing cameras and normalization")
    r.add_argument("--frame", type=int, default=0, help="camera index to render")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--n-coarse", type=int, default=64, help="coarse samples per ray")
    r.add_argument("--n-fine", type=int, default=64, help="importance samples per ray")

    m = sub.add_parser("mesh", parser_class=_Parser, help="extract a triangle mesh from a checkpoint")
    m.add_argument("--checkpoint", required=True, help="field checkpoint")
    m.add_argument("--channel", default="scene", help="scene or obj:<i>")
    m.add_argument("--res", type=int, default=128, help="marching cubes lattice resolution")
    m.add_argument("--out", required=True, help="output mesh (.ply or .obj)")

    e = sub.add_parser("eval", parser_class=_Parser, help="compare a predicted mesh against ground truth")
    e.add_argument("--gt", required=True, help="ground-truth mesh (.ply/.obj)")
    e.add_argument("--pred", required=True, help="predicted mesh (.ply/.obj)")
    e.add_argument("--tau", type=float, default=0.05, help="precision/recall distance threshold")
    e.add_argument("--metric", choices=("l1", "l2"), default="l1", help="nearest-neighbor norm")
    e.add_argument("--samples", type=int, default=100000, help="surface samples per mesh")

    c = sub.add_parser("compare-opacity", parser_class=_Parser, help="occlusion-aware vs occlusion-blind object opacity")
    c.add_argument("--scene", required=True, help="scene config (TOML)")
    c.add_argument("--beta", type=float, default=1e-3, help="density sharpness")
    c.add_argument("--samples", type=int, default=1024, help="quadrature samples per ray")
    return p


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def cmd_bake(args) -> int:
    import numpy as np

    from .dataio import bake_dataset, Camera, orbit_cameras, validate
    from .sdf_analytic import load_scene

    scene = load_scene(args.scene)
    if args.cameras.startswith("orbit:"):
        n = int(args.cameras.split(":", 1)[1])
        extent = float(np.max(scene.bounds_max - scene.bounds_min))
        radius = args.orbit_radius if args.orbit_radius is not None else 0.38 * extent
        elev = args.orbit_elevation if args.orbit_elevation is not None else 0.12 * extent
        center = (scene.bounds_min + scene.bounds_max) / 2
        cams = orbit_cameras(n, center, radius, elev, args.width, args.height, args.fov)
    else:
        with open(args.cameras) as f:
            cams = [Camera.from_dict(d) for d in json.load(f)]
    ds = bake_dataset(scene, cams, args.out, depth_noise=args.depth_noise, seed=_seed(args))
    report = validate(ds)
    for issue in report.issues:
        _log(f"validation: {issue}")
    if not report.ok:
        return 1
    _log(f"baked {len(ds.frames)} frames into {args.out}")
    return 0


_CONFIG_SECTIONS = {"train", "grid", "field", "loss"}


def load_run_config(path: str):
    """Parse the TOML training config into typed config objects."""
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib

    from .field import FieldConfig
    from .hashgrid import GridConfig
    from .losses import LossWeights
    from .trainer import TrainConfig

    with open(path, "rb") as f:
        raw = tomllib.load(f)
    unknown = set(raw) - _CONFIG_SECTIONS - {"dataset"}
    if unknown:
        raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")

    def build(cls, section):
        data = raw.get(section, {})
        fields = {f.name for f in cls.__dataclass_fields__.values()}
        bad = set(data) - fields
        if bad:
            raise ValueError(f"{path}: unknown [{section}] keys {sorted(bad)}")
        return cls(**data)

    grid = build(GridConfig, "grid")
    field_extra = dict(raw.get("field", {}))
    bad = set(field_extra) - {
        "k_objects", "sdf_width", "sdf_hidden", "color_width",
        "color_hidden", "beta_init", "dtype", "background_channel",
    }
    if bad:
        raise ValueError(f"{path}: unknown [field] keys {sorted(bad)}")
    train = build(TrainConfig, "train")
    weights = build(LossWeights, "loss")
    return raw.get("dataset"), grid, field_extra, train, weights


def cmd_train(args) -> int:
    from dataclasses import replace

    from .dataio import load_dataset
    from .field import FieldConfig
    from .trainer import fit

    dataset_path, grid, field_extra, train, weights = load_run_config(args.config)
    if args.dataset:
        dataset_path = args.dataset
    if not dataset_path:
        raise ValueError("no dataset given (config key 'dataset' or --dataset)")
    if args.iterations is not None:
        train = replace(train, iterations=args.iterations)
    if args.seed is not None:
        train = replace(train, seed=args.seed)
    ds = load_dataset(dataset_path)
    field_extra.setdefault("k_objects", ds.k_objects)
    field_cfg = FieldConfig(grid=grid, **field_extra)

    def progress(rec):
        if rec["iter"] % max(1, train.log_interval * 10) == 0:
            _log(
                f"iter {rec['iter']:6d}  total {rec['total']:.4f}  "
                f"rec {rec['rec']:.3f}  opacity {rec['opacity']:.4f}  beta {rec['beta']:.4f}"
            )

    params, history = fit(
        ds, field_cfg, train, weights, out_dir=args.out,
        resume=not args.no_resume, progress=progress,
    )
    _log(f"finished {train.iterations} iterations; outputs in {args.out}")
    return 0


def _load_norm(train_state: dict):
    import numpy as np

    center = train_state.get("norm_center")
    scale = train_state.get("norm_scale")
    if center is None or scale is None:
        return np.zeros(3), 1.0
    return np.asarray(center, dtype=np.float64), float(scale)


def cmd_render(args) -> int:
    import numpy as np
    from PIL import Image

    from .dataio import load_dataset, _write_plane
    from .field import load_checkpoint
    from .rendering import RayBundle, ray_cube_bounds, render_rays

    params, state = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    if not 0 <= args.frame < len(ds.frames):
        raise ValueError(f"frame {args.frame} out of range [0, {len(ds.frames)})")
    cam = ds.frames[args.frame].camera
    origins, dirs = cam.pixel_rays(cam.all_pixels())
    origins_n = (origins - ds.center) / ds.scale
    near, far, valid = ray_cube_bounds(origins_n, dirs)
    if not valid.all():
        raise ValueError("some rays miss the scene cube; wrong dataset for this checkpoint?")
    out = render_rays(
        params, RayBundle(origins_n, dirs, near, far),
        n_coarse=args.n_coarse, n_fine=args.n_fine, rng=_seed(args),
    )
    os.makedirs(args.out, exist_ok=True)
    h, w = cam.height, cam.width
    Image.fromarray(
        np.round(np.clip(out.color, 0, 1) * 255).astype(np.uint8).reshape(h, w, 3)
    ).save(os.path.join(args.out, f"rgb_{args.frame:04d}.png"))
    for k in range(out.object_opacities.shape[1]):
        op = np.round(np.clip(out.object_opacities[:, k], 0, 1) * 255).astype(np.uint8)
        Image.fromarray(op.reshape(h, w)).save(
            os.path.join(args.out, f"opacity_{args.frame:04d}_obj{k}.png")
        )
    depth_scene = out.depth.reshape(h, w) * ds.scale
    _write_plane(os.path.join(args.out, f"depth_{args.frame:04d}"), depth_scene)
    _write_plane(
        os.path.join(args.out, f"normal_{args.frame:04d}"),
        out.normal.reshape(h, w, 3),
    )
    _log(f"rendered frame {args.frame} to {args.out}")
    return 0


def cmd_mesh(args) -> int:
    from .field import load_checkpoint
    from .meshing import extract_mesh, save_mesh

    if args.channel == "scene":
        channel = "scene"
    elif args.channel.startswith("obj:"):
        channel = int(args.channel.split(":", 1)[1])
    else:
        raise ValueError("--channel must be 'scene' or 'obj:<i>'")
    params, state = load_checkpoint(args.checkpoint)
    center, scale = _load_norm(state)
    mesh = extract_mesh(
        params, channel=channel, resolution=args.res, to_scene=(center, scale)
    )
    if mesh.empty:
        _log("warning: empty level set")
    save_mesh(args.out, mesh)
    _log(f"wrote {len(mesh.vertices)} vertices / {len(mesh.triangles)} triangles to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .evalmetrics import compute_metrics
    from .meshing import load_mesh, sample_surface_points

    gt = load_mesh(args.gt)
    pred = load_mesh(args.pred)
    P = sample_surface_points(gt, args.samples, _seed(args))
    Q = sample_surface_points(pred, args.samples, _seed(args) + 1)
    report = compute_metrics(P, Q, tau=args.tau, metric=args.metric)
    json.dump(report.to_dict(), sys.stdout, indent=1)
    sys.stdout.write("\n")
    return 0


def cmd_compare_opacity(args) -> int:
    import numpy as np

    from .rendering import (
        QuadratureSamples, RayBundle, appendix_variant_opacity,
        density_from_sdf, render_object_opacity,
    )
    from .sdf_analytic import load_scene

    scene = load_scene(args.scene)
    fg = [j for j in range(scene.k_objects) if j != scene.background_channel]
    if len(fg) < 2:
        raise ValueError("compare-opacity needs at least two foreground objects")
    a, b = scene.centers[fg[0]], scene.centers[fg[1]]
    d = b - a
    d = d / np.linalg.norm(d)
    extent = float(np.max(scene.bounds_max - scene.bounds_min))
    origin = a - 0.49 * extent * d
    tr = scene.sphere_trace(origin[None, :], d[None, :])
    if not tr.hit[0]:
        raise ValueError("probe ray does not hit the scene")
    far = 1.2 * extent
    rays = RayBundle(origin[None, :], d[None, :], [0.0], [far])
    t = np.linspace(0.0, far, args.samples + 1)[None, :-1]
    samples = QuadratureSamples.from_depths(rays, t)
    sv = scene.eval_sdf(samples.points.reshape(-1, 3))
    k = scene.k_objects
    sigma_obj = density_from_sdf(sv.per_object, args.beta).reshape(1, -1, k)
    sigma_scene = density_from_sdf(sv.scene, args.beta).reshape(1, -1)
    occ = render_object_opacity(samples, sigma_obj, sigma_scene)[0]
    e1 = appendix_variant_opacity(samples, sigma_obj, "E1")[0]
    _log(f"{'channel':>8} {'occlusion-aware':>16} {'occlusion-blind E1':>19}")
    for j in range(k):
        _log(f"{j:>8} {occ[j]:>16.6f} {e1[j]:>19.6f}")
    json.dump(
        {
            "beta": args.beta,
            "samples": args.samples,
            "ray": {"origin": origin.tolist(), "dir": d.tolist(), "far": far},
            "channels": list(range(k)),
            "occlusion_aware": occ.tolist(),
            "e1": e1.tolist(),
        },
        sys.stdout,
        indent=1,
    )
    sys.stdout.write("\n")
    return 0


_COMMANDS = {
    "bake": cmd_bake,
    "train": cmd_train,
    "render": cmd_render,
    "mesh": cmd_mesh,
    "eval": cmd_eval,
    "compare-opacity": cmd_compare_opacity,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_help()
        return 1
    if args.threads:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(args.threads))
        os.environ.setdefault("NUMBA_NUM_THREADS", str(args.threads))
        from . import backend

        backend.set_num_threads(args.threads)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, DatasetError) as e:
        _log(f"error: {e}")
        return 1
    except Exception as e:  # noqa: BLE001 - runtime failures map to exit 2
        _log(f"runtime failure: {type(e).__name__}: {e}")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
