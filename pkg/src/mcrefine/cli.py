"""Command-line surface: refine, basin, study, render.

Exit codes: 0 success, 1 configuration error (message names the offending
option), 2 runtime failure. Every output CSV starts with a '#' comment line
echoing the resolved configuration, and every command honors --seed, so
identical invocations produce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import features as ft
from .geometry import Intrinsics, Pose, load_pose_file, pose_error, save_pose_file
from .particle_filter import Schedule, ScheduleError, load_schedule, parse_schedule_items, preset_schedule
from .refiner import derive_query_seed, refine
from .renderer import ShadingMode, load_mesh, read_image, render, write_image


class ConfigError(ValueError):
    """Invalid command-line configuration; maps to exit code 1."""


def _existing(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{flag}: file not found: {path}")
    return p


def _resolve_threads(value: int | None) -> int:
    if value is None:
        env = os.environ.get("MCREFINE_THREADS")
        if env is not None:
            try:
                value = int(env)
            except ValueError:
                raise ConfigError(f"MCREFINE_THREADS: not an integer: '{env}'") from None
        else:
            value = os.cpu_count() or 1
    if value < 1:
        raise ConfigError(f"--threads: must be >= 1, got {value}")
    return value


def _load_scene(args):
    scene_path = _existing(args.scene, "--scene")
    texture = None
    if args.texture is not None:
        texture = str(_existing(args.texture, "--texture"))
    return load_mesh(str(scene_path), texture_path=texture)


def _intrinsics(args) -> Intrinsics:
    if args.width < 16 or args.height < 16:
        raise ConfigError("--width/--height: resolution must be at least 16x16")
    if args.fx is not None:
        fx = args.fx
        fy = args.fy if args.fy is not None else args.fx
        cx = args.cx if args.cx is not None else args.width / 2.0
        cy = args.cy if args.cy is not None else args.height / 2.0
        try:
            return Intrinsics(fx, fy, cx, cy, args.width, args.height)
        except ValueError as exc:
            raise ConfigError(f"--fx/--fy/--cx/--cy: {exc}") from exc
    return Intrinsics.from_fov(args.width, args.height, args.fov)


def _shading(name: str) -> ShadingMode:
    try:
        return ShadingMode.parse(name)
    except ValueError as exc:
        raise ConfigError(f"--mode: {exc}") from exc


def _schedule(args) -> Schedule:
    base = preset_schedule(args.preset) if args.preset else Schedule()
    try:
        if args.schedule is not None:
            base = load_schedule(str(_existing(args.schedule, "--schedule")), base)
        overrides = {}
        for item in args.set or []:
            if "=" not in item:
                raise ConfigError(f"--set: expected key=value, got '{item}'")
            key, _, value = item.partition("=")
            overrides[key.strip()] = value.strip()
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        if overrides:
            base = parse_schedule_items(overrides, base)
    except ScheduleError as exc:
        raise ConfigError(f"--schedule/--set: {exc}") from exc
    return base


def _config_comment(args, sched: Schedule | None = None, extra: dict | None = None) -> str:
    parts = []
    for key, value in sorted(vars(args).items()):
        if key in ("func",) or value is None:
            continue
        parts.append(f"{key}={value}")
    if sched is not None:
        for key in (
            "total_steps", "resample_interval", "n1", "fine_tail", "beams",
            "candidates_start", "candidates_end", "res_low", "res_high",
            "trans_sigma", "rot_mag", "seed",
        ):
            parts.append(f"sched.{key}={getattr(sched, key)}")
    for key, value in (extra or {}).items():
        parts.append(f"{key}={value}")
    return " ".join(parts)


# --------------------------------------------------------------------------
# refine
# --------------------------------------------------------------------------


def cmd_refine(args) -> int:
    scene = _load_scene(args)
    intr = _intrinsics(args)
    sched = _schedule(args)
    shading = _shading(args.mode)
    threads = _resolve_threads(args.threads)
    if args.scorer not in ("dense", "exhaustive", "patchwise", "implicit"):
        raise ConfigError(f"--scorer: unknown scorer '{args.scorer}'")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    inits = load_pose_file(str(_existing(args.init_poses, "--init-poses")))
    gts = load_pose_file(str(_existing(args.gt_poses, "--gt-poses"))) if args.gt_poses else None

    external_dir = None
    extractor = ft.PyramidConfig(n_levels=3)
    if args.extractor != "builtin":
        if not args.extractor.startswith("external:"):
            raise ConfigError(f"--extractor: expected 'builtin' or 'external:<dir>', got '{args.extractor}'")
        external_dir = Path(args.extractor.split(":", 1)[1])
        if not external_dir.is_dir():
            raise ConfigError(f"--extractor: directory not found: {external_dir}")

    queries = []
    for qpath in args.query:
        qp = _existing(qpath, "--query")
        name = qp.stem
        if name not in inits:
            raise ConfigError(f"--init-poses: no initial pose named '{name}'")
        queries.append((name, qp))

    sched = sched.resolved(scene.diagonal)
    finals: dict[str, Pose] = {}
    errors = []
    for name, qp in queries:
        image = read_image(str(qp))
        init = inits[name]
        external = None
        if external_dir is not None:
            fpath = external_dir / f"{name}.fpyr"
            if not fpath.exists():
                raise ConfigError(f"--extractor: missing feature file: {fpath}")
            external = ft.load_external_features(str(fpath))
        qsched = sched if len(queries) == 1 else _per_query_sched(sched, image, init)
        result = refine(
            image, init, scene, intr, qsched,
            scorer=args.scorer, extractor=extractor, shading=shading,
            external_query=external, threads=threads,
        )
        comment = _config_comment(args, qsched, {"query": name})
        ev.write_trajectory_csv(result, out / f"{name}_trajectory.csv", comment)
        finals[name] = result.final_pose
        if gts is not None:
            if name not in gts:
                raise ConfigError(f"--gt-poses: no ground-truth pose named '{name}'")
            errors.append(pose_error(result.final_pose, gts[name]))
    save_pose_file(finals, out / "final_poses.txt")
    if errors:
        summary = ev.summarize_errors(errors)
        ev.write_summary_csv(summary, out / "summary.csv", _config_comment(args, sched))
    return 0


def _per_query_sched(sched: Schedule, image, init) -> Schedule:
    from dataclasses import replace

    return replace(sched, seed=derive_query_seed(sched.seed, image, init))


# --------------------------------------------------------------------------
# basin
# --------------------------------------------------------------------------


def cmd_basin(args) -> int:
    scene = _load_scene(args)
    intr = _intrinsics(args)
    if args.samples < 1 or args.samples % 2 == 0:
        raise ConfigError(f"--samples: must be odd so the zero offset is sampled, got {args.samples}")
    if args.range <= 0:
        raise ConfigError("--range: must be positive")
    if args.axis not in ev.BASIN_AXES:
        raise ConfigError(f"--axis: unknown axis '{args.axis}' (valid: {', '.join(ev.BASIN_AXES)})")
    gt = _single_pose(args)
    extractor = ft.PyramidConfig(n_levels=args.levels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0

    if args.domains:
        result = ev.domain_shift_profile(scene, gt, intr, args.axis, args.range, args.samples, extractor, rand_seed=seed)
        for level in range(1, extractor.n_levels + 1):
            ev.write_domain_csv(result, level, out / f"basin_{args.axis}_level{level}.csv", _config_comment(args))
    else:
        shading = _shading(args.mode)
        profile = ev.basin_profile(
            scene, gt, intr, args.axis, args.range, args.samples, extractor, shading=shading, rand_seed=seed
        )
        for level in range(1, extractor.n_levels + 1):
            ev.write_basin_csv(profile, level, out / f"basin_{args.axis}_level{level}.csv", _config_comment(args))
    return 0


def _single_pose(args) -> Pose:
    poses = load_pose_file(str(_existing(args.gt_pose, "--gt-pose")))
    if not poses:
        raise ConfigError(f"--gt-pose: no poses in {args.gt_pose}")
    if args.pose_name is not None:
        if args.pose_name not in poses:
            raise ConfigError(f"--pose-name: no pose named '{args.pose_name}' in {args.gt_pose}")
        return poses[args.pose_name]
    return next(iter(poses.values()))


# --------------------------------------------------------------------------
# study
# --------------------------------------------------------------------------


def _float_list(text: str, flag: str) -> list[float]:
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"{flag}: expected comma-separated floats, got '{text}'") from exc
    if not values:
        raise ConfigError(f"{flag}: empty list")
    return values


def cmd_study(args) -> int:
    scene = _load_scene(args)
    intr = _intrinsics(args)
    sched = _schedule(args)
    threads = _resolve_threads(args.threads)
    if args.repeats < 1:
        raise ConfigError(f"--repeats: must be >= 1, got {args.repeats}")
    trans_mags = _float_list(args.trans, "--trans")
    rot_mags = _float_list(args.rot, "--rot")
    gts = list(load_pose_file(str(_existing(args.gt_pose, "--gt-pose"))).values())
    if not gts:
        raise ConfigError(f"--gt-pose: no poses in {args.gt_pose}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = ev.StudyConfig(
        intr=intr, schedule=sched, scorer=args.scorer,
        seed=args.seed if args.seed is not None else sched.seed, threads=threads,
    )
    matrix = ev.convergence_study(scene, gts, trans_mags, rot_mags, args.repeats, config)
    ev.write_convergence_csv(matrix, out / "convergence.csv", _config_comment(args, sched))
    return 0


# --------------------------------------------------------------------------
# render
# --------------------------------------------------------------------------


def cmd_render(args) -> int:
    scene = _load_scene(args)
    intr = _intrinsics(args)
    shading = _shading(args.mode)
    pose = _single_pose(args)
    view = render(scene, pose, intr, shading)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    write_image(str(out), view.image)
    if args.dump_depth:
        with open(args.dump_depth, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# {_config_comment(args)}\n")
            for row in view.depth:
                fh.write(",".join("inf" if not np.isfinite(v) else repr(float(v)) for v in row) + "\n")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcrefine", description="Render-and-compare 6-DoF pose refinement")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_sched=False):
        p.add_argument("--scene", required=True, help="OBJ mesh path")
        p.add_argument("--texture", default=None, help="texture image for the mesh (PNG/PPM)")
        p.add_argument("--width", type=int, default=128)
        p.add_argument("--height", type=int, default=96)
        p.add_argument("--fov", type=float, default=70.0, help="horizontal field of view (deg)")
        p.add_argument("--fx", type=float, default=None)
        p.add_argument("--fy", type=float, default=None)
        p.add_argument("--cx", type=float, default=None)
        p.add_argument("--cy", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: cores, or MCREFINE_THREADS)")
        p.add_argument("--out", required=True, help="output directory or file")
        if with_sched:
            p.add_argument("--schedule", default=None, help="key=value schedule file")
            p.add_argument("--preset", default=None, choices=("standalone", "preprocess", "postprocess"))
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="schedule override (repeatable)")

    p_ref = sub.add_parser("refine", help="refine initial poses against query images")
    common(p_ref, with_sched=True)
    p_ref.add_argument("--query", required=True, nargs="+", help="query image path(s); stem selects the init pose")
    p_ref.add_argument("--init-poses", required=True, help="pose text file with initial estimates")
    p_ref.add_argument("--gt-poses", default=None, help="pose text file with ground truth (enables summary)")
    p_ref.add_argument("--scorer", default="dense", choices=("dense", "exhaustive", "patchwise", "implicit"))
    p_ref.add_argument("--extractor", default="builtin", help="'builtin' or 'external:<dir>' with <query>.fpyr files")
    p_ref.add_argument("--mode", default="textured", help="candidate shading: textured | colored | raw")
    p_ref.set_defaults(func=cmd_refine)

    p_bas = sub.add_parser("basin", help="score-vs-offset profile around a ground-truth pose")
    common(p_bas)
    p_bas.add_argument("--gt-pose", required=True, help="pose text file")
    p_bas.add_argument("--pose-name", default=None)
    p_bas.add_argument("--axis", default="yaw", help="|".join(ev.BASIN_AXES))
    p_bas.add_argument("--range", type=float, default=30.0, help="half range (deg for yaw/pitch, meters otherwise)")
    p_bas.add_argument("--samples", type=int, default=21)
    p_bas.add_argument("--levels", type=int, default=3)
    p_bas.add_argument("--mode", default="textured")
    p_bas.add_argument("--domains", action="store_true", help="profile all shading domains + rank correlations")
    p_bas.set_defaults(func=cmd_basin)

    p_stu = sub.add_parser("study", help="perturb-and-refine convergence study")
    common(p_stu, with_sched=True)
    p_stu.add_argument("--gt-pose", required=True, help="pose text file (poses cycled per repeat)")
    p_stu.add_argument("--trans", required=True, help="comma-separated translation magnitudes (m)")
    p_stu.add_argument("--rot", required=True, help="comma-separated rotation magnitudes (deg)")
    p_stu.add_argument("--repeats", type=int, required=True)
    p_stu.add_argument("--scorer", default="dense", choices=("dense", "exhaustive", "patchwise", "implicit"))
    p_stu.set_defaults(func=cmd_study)

    p_ren = sub.add_parser("render", help="render one view for debugging")
    common(p_ren)
    p_ren.add_argument("--gt-pose", required=True, help="pose text file")
    p_ren.add_argument("--pose-name", default=None)
    p_ren.add_argument("--mode", default="textured")
    p_ren.add_argument("--dump-depth", default=None, help="also write the depth map as CSV")
    p_ren.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
