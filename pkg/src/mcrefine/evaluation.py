"""Error metrics and the three analysis protocols.

Offers median/recall error aggregation, basin profiling (score vs a single-
axis pose offset, per pyramid level), a cross-domain variant that checks the
score curve's rank order survives a change of rendering domain, and a
perturb-then-refine convergence study over a grid of error magnitudes. All
studies are deterministic given a seed and emit CSV with a config comment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import spearmanr

from . import features as ft
from .geometry import (
    Intrinsics,
    Pose,
    PoseError,
    exp_rotation,
    pose_error,
    quat_multiply,
    quat_to_rotmat,
    random_unit_vector,
)
from .particle_filter import VERTICAL_DAMPING, Schedule
from .refiner import RefineResult, refine
from .renderer import Scene, ShadingMode, render

#: recall thresholds reported by default: (meters, degrees)
DEFAULT_THRESHOLDS = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))

BASIN_AXES = ("yaw", "pitch", "tx", "ty", "tz", "rand")


@dataclass(frozen=True)
class ErrorSummary:
    """Lower-median errors plus recall at (meters, degrees) threshold pairs."""

    median_trans: float
    median_rot: float
    recalls: dict[tuple[float, float], float]


def _lower_median(values: list[float]) -> float:
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def summarize_errors(errors: list[PoseError], thresholds=DEFAULT_THRESHOLDS) -> ErrorSummary:
    """Aggregate pose errors; recall requires both thresholds to hold."""
    if not errors:
        raise ValueError("cannot summarize an empty error list")
    recalls = {}
    for t, r in thresholds:
        hits = sum(1 for e in errors if e.trans_err <= t and e.rot_err <= r)
        recalls[(t, r)] = hits / len(errors)
    return ErrorSummary(
        _lower_median([e.trans_err for e in errors]),
        _lower_median([e.rot_err for e in errors]),
        recalls,
    )


@dataclass(frozen=True)
class BasinProfile:
    """Score-vs-offset curves, one per pyramid level (level 1 first)."""

    axis: str
    offsets: np.ndarray  # sorted ascending; degrees for yaw/pitch, meters otherwise
    scores: np.ndarray  # (n_levels, n_offsets)

    def level_curve(self, level: int) -> np.ndarray:
        return self.scores[level - 1]


def offset_pose(pose: Pose, axis: str, value: float, direction: np.ndarray | None = None) -> Pose:
    """Displace a pose along one profiling axis.

    yaw rotates about the world vertical through the camera center; pitch
    about the camera's own right axis; tx/ty/tz translate along world axes;
    rand translates along `direction`. A zero value returns the pose object
    unchanged.
    """
    if value == 0.0:
        return pose
    if axis == "yaw":
        return Pose(pose.center, quat_multiply(pose.quat, exp_rotation((0.0, 1.0, 0.0), math.radians(value))))
    if axis == "pitch":
        right = quat_to_rotmat(pose.quat).T @ np.array([1.0, 0.0, 0.0])
        return Pose(pose.center, quat_multiply(pose.quat, exp_rotation(right, math.radians(value))))
    if axis in ("tx", "ty", "tz"):
        delta = np.zeros(3)
        delta["xyz".index(axis[1])] = value
        return Pose(pose.center + delta, pose.quat)
    if axis == "rand":
        if direction is None:
            raise ValueError("axis 'rand' needs a direction vector")
        return Pose(pose.center + value * np.asarray(direction, dtype=np.float64), pose.quat)
    raise ValueError(f"unknown axis '{axis}' (valid: {', '.join(BASIN_AXES)})")


def basin_profile(
    scene: Scene,
    gt: Pose,
    intr: Intrinsics,
    axis: str,
    half_range: float,
    n_samples: int,
    extractor: ft.PyramidConfig = ft.PyramidConfig(),
    shading: ShadingMode = ShadingMode.TEXTURED,
    query_shading: ShadingMode | None = None,
    rand_seed: int = 0,
) -> BasinProfile:
    """Dense-score curve around the true pose along one offset axis.

    The query is rendered at `gt` (in `query_shading`, default same as the
    candidates), each offset pose is rendered in `shading`, and the dense
    score is computed at every pyramid level.
    """
    if n_samples < 1 or n_samples % 2 == 0:
        raise ValueError("n_samples must be odd so the zero offset is sampled")
    if half_range <= 0:
        raise ValueError("half_range must be positive")
    if axis not in BASIN_AXES:
        raise ValueError(f"unknown axis '{axis}' (valid: {', '.join(BASIN_AXES)})")
    direction = None
    if axis == "rand":
        rng = np.random.default_rng(np.random.SeedSequence([rand_seed]))
        direction = random_unit_vector(rng)
    offsets = np.linspace(-half_range, half_range, n_samples)
    qmode = query_shading if query_shading is not None else shading
    query = render(scene, gt, intr, qmode)
    qpyr = ft.extract_pyramid(query.image, extractor)
    scores = np.zeros((extractor.n_levels, n_samples))
    for j, off in enumerate(offsets):
        view = render(scene, offset_pose(gt, axis, float(off), direction), intr, shading)
        cpyr = ft.extract_pyramid(view.image, extractor)
        for level in range(1, extractor.n_levels + 1):
            scores[level - 1, j] = ft.dense_score(qpyr, cpyr, level)
    return BasinProfile(axis, offsets, scores)


@dataclass(frozen=True)
class DomainShiftProfile:
    """Same-query basin profiles for each candidate rendering domain.

    `correlations[mode][l-1]` is the Spearman rank correlation between the
    level-l score curve of that domain and of the same-domain (textured)
    baseline.
    """

    profiles: dict[ShadingMode, BasinProfile]
    correlations: dict[ShadingMode, np.ndarray]


def domain_shift_profile(
    scene: Scene,
    gt: Pose,
    intr: Intrinsics,
    axis: str,
    half_range: float,
    n_samples: int,
    extractor: ft.PyramidConfig = ft.PyramidConfig(),
    rand_seed: int = 0,
) -> DomainShiftProfile:
    """Profile a textured query against candidates rendered in every domain."""
    profiles = {}
    correlations = {}
    for mode in ShadingMode:
        profiles[mode] = basin_profile(
            scene, gt, intr, axis, half_range, n_samples, extractor,
            shading=mode, query_shading=ShadingMode.TEXTURED, rand_seed=rand_seed,
        )
    base = profiles[ShadingMode.TEXTURED]
    for mode, prof in profiles.items():
        rho = np.zeros(extractor.n_levels)
        for level in range(extractor.n_levels):
            rho[level] = float(spearmanr(base.scores[level], prof.scores[level]).statistic)
        correlations[mode] = rho
    return DomainShiftProfile(profiles, correlations)


@dataclass(frozen=True)
class ConvergenceMatrix:
    """Median final errors for each (translation, rotation) init-offset cell."""

    trans_mags: tuple[float, ...]
    rot_mags: tuple[float, ...]
    median_trans: np.ndarray  # (len(trans_mags), len(rot_mags))
    median_rot: np.ndarray


@dataclass(frozen=True)
class StudyConfig:
    """Shared refinement setup for the convergence study."""

    intr: Intrinsics
    schedule: Schedule
    scorer: str = "dense"
    extractor: ft.PyramidConfig | None = None
    shading: ShadingMode = ShadingMode.TEXTURED
    seed: int = 0
    threads: int = 1


def displace_exact(pose: Pose, trans_mag: float, rot_mag_deg: float, rng: np.random.Generator) -> Pose:
    """Move a pose by exactly `trans_mag` meters and `rot_mag_deg` degrees.

    The translation direction is random with the vertical component damped
    like the sampling noise; the rotation axis is uniform on the sphere.
    """
    center = pose.center
    if trans_mag > 0.0:
        d = rng.normal(0.0, 1.0, size=3) * np.array([1.0, 1.0 / VERTICAL_DAMPING, 1.0])
        n = float(np.linalg.norm(d))
        while n < 1e-12:
            d = rng.normal(0.0, 1.0, size=3) * np.array([1.0, 1.0 / VERTICAL_DAMPING, 1.0])
            n = float(np.linalg.norm(d))
        center = center + (trans_mag / n) * d
    quat = pose.quat
    if rot_mag_deg > 0.0:
        axis = random_unit_vector(rng)
        quat = quat_multiply(quat, exp_rotation(axis, math.radians(rot_mag_deg)))
    if trans_mag == 0.0 and rot_mag_deg == 0.0:
        return pose
    return Pose(center, quat)


def convergence_study(
    scene: Scene,
    gt_poses: list[Pose],
    trans_mags: list[float],
    rot_mags: list[float],
    repeats: int,
    config: StudyConfig,
) -> ConvergenceMatrix:
    """Perturb ground truth by every magnitude pair, refine, and aggregate.

    Each (cell, repeat) draws its own rng stream from the study seed, so
    cells are independent and the full matrix is reproducible.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if not gt_poses:
        raise ValueError("need at least one ground-truth pose")
    med_t = np.zeros((len(trans_mags), len(rot_mags)))
    med_r = np.zeros((len(trans_mags), len(rot_mags)))
    sched = config.schedule.resolved(scene.diagonal)
    for i, tmag in enumerate(trans_mags):
        for j, rmag in enumerate(rot_mags):
            errs: list[PoseError] = []
            for k in range(repeats):
                ss = np.random.SeedSequence([config.seed, i, j, k])
                perturb_ss, refine_ss = ss.spawn(2)
                rng = np.random.default_rng(perturb_ss)
                gt = gt_poses[k % len(gt_poses)]
                init = displace_exact(gt, float(tmag), float(rmag), rng)
                query = render(scene, gt, config.intr, ShadingMode.TEXTURED)
                result = refine(
                    query.image,
                    init,
                    scene,
                    config.intr,
                    sched=_with_seed(sched, refine_ss),
                    scorer=config.scorer,
                    extractor=config.extractor,
                    shading=config.shading,
                    threads=config.threads,
                )
                errs.append(pose_error(result.final_pose, gt))
            med_t[i, j] = _lower_median([e.trans_err for e in errs])
            med_r[i, j] = _lower_median([e.rot_err for e in errs])
    return ConvergenceMatrix(tuple(float(t) for t in trans_mags), tuple(float(r) for r in rot_mags), med_t, med_r)


def _with_seed(sched: Schedule, ss: np.random.SeedSequence) -> Schedule:
    return replace(sched, seed=int(ss.generate_state(2, np.uint64)[0]))


# --------------------------------------------------------------------------
# CSV emission. Every file starts with a '#' comment carrying the resolved
# configuration so outputs are self-describing and reproducible.
# --------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_basin_csv(profile: BasinProfile, level: int, path, config_comment: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {config_comment}\n")
        fh.write("offset,score\n")
        for off, s in zip(profile.offsets, profile.level_curve(level)):
            fh.write(f"{_fmt(off)},{_fmt(s)}\n")


def write_domain_csv(result: DomainShiftProfile, level: int, path, config_comment: str) -> None:
    modes = list(ShadingMode)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {config_comment}\n")
        cols = ["offset"]
        cols += [f"score_{m.value}" for m in modes]
        cols += [f"corr_{m.value}" for m in modes]
        fh.write(",".join(cols) + "\n")
        base = result.profiles[modes[0]]
        for j, off in enumerate(base.offsets):
            row = [_fmt(off)]
            row += [_fmt(result.profiles[m].scores[level - 1, j]) for m in modes]
            row += [_fmt(result.correlations[m][level - 1]) for m in modes]
            fh.write(",".join(row) + "\n")


def write_convergence_csv(matrix: ConvergenceMatrix, path, config_comment: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {config_comment}\n")
        fh.write("trans_mag,rot_mag,median_trans_err,median_rot_err\n")
        for i, t in enumerate(matrix.trans_mags):
            for j, r in enumerate(matrix.rot_mags):
                fh.write(f"{_fmt(t)},{_fmt(r)},{_fmt(matrix.median_trans[i, j])},{_fmt(matrix.median_rot[i, j])}\n")


def write_trajectory_csv(result: RefineResult, path, config_comment: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {config_comment}\n")
        fh.write("step,level,resolution_h,resolution_w,score,qw,qx,qy,qz,cx,cy,cz\n")
        for p in result.trajectory:
            q = p.pose.quat
            c = p.pose.center
            fields = [
                str(p.step),
                str(p.level),
                str(p.resolution[0]),
                str(p.resolution[1]),
                _fmt(p.score),
                _fmt(q[0]),
                _fmt(q[1]),
                _fmt(q[2]),
                _fmt(q[3]),
                _fmt(c[0]),
                _fmt(c[1]),
                _fmt(c[2]),
            ]
            fh.write(",".join(fields) + "\n")


def write_summary_csv(summary: ErrorSummary, path, config_comment: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {config_comment}\n")
        fh.write("metric,value\n")
        fh.write(f"median_trans_m,{_fmt(summary.median_trans)}\n")
        fh.write(f"median_rot_deg,{_fmt(summary.median_rot)}\n")
        for (t, r), frac in summary.recalls.items():
            fh.write(f"recall_{t}m_{r}deg,{_fmt(frac)}\n")
