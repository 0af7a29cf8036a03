"""Particle-filter machinery: beams, step schedules, sampling, resampling.

A beam is an independently evolving particle set with its own random stream.
Beams only interact at resampling boundaries, where their incumbent best
poses are pooled, sorted, and redistributed one per beam. The schedule maps
a step index to the feature level, render resolution, candidate count and
noise magnitudes: coarse-to-fine levels, linearly interpolated resolution
and candidate counts, and a sawtooth noise decay that resets every
`resample_interval` steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Pose, perturb_pose

VERTICAL_DAMPING = 10.0  # vertical (world y) translation noise is sigma / 10


class ScheduleError(ValueError):
    """Schedule configuration is invalid."""


@dataclass(frozen=True)
class Schedule:
    """Step-indexed refinement policy.

    `n1` is the step where scoring switches from the coarsest to the middle
    pyramid level; the last `fine_tail` steps use the finest level. An empty
    middle segment (n1 == total_steps - fine_tail) is allowed; a fine-only
    schedule sets n1 = 0 and fine_tail = total_steps. `trans_sigma` is the
    lateral noise sigma in meters; None resolves to `trans_sigma_frac` of
    the scene bounding-box diagonal at refinement time.
    """

    total_steps: int = 80
    resample_interval: int = 20
    n1: int = 30
    fine_tail: int = 10
    beams: int = 3
    candidates_start: int = 50
    candidates_end: int = 20
    res_low: tuple[int, int] = (48, 64)
    res_high: tuple[int, int] = (96, 128)
    trans_sigma: float | None = None
    rot_mag: float = 10.0
    seed: int = 0
    n_levels: int = 3
    trans_sigma_frac: float = 0.05

    def __post_init__(self):
        if self.total_steps < 1:
            raise ScheduleError("total_steps must be >= 1")
        if self.resample_interval < 1:
            raise ScheduleError("resample_interval must be >= 1")
        if not 0 <= self.n1 <= self.n2 <= self.total_steps:
            raise ScheduleError(
                f"level switches must satisfy 0 <= n1 <= n2 <= total_steps "
                f"(n1={self.n1}, n2={self.n2}, total_steps={self.total_steps})"
            )
        if self.beams < 1:
            raise ScheduleError("beams must be >= 1")
        if self.candidates_start < 1 or self.candidates_end < 1:
            raise ScheduleError("candidate counts must be >= 1")
        for res in (self.res_low, self.res_high):
            if len(res) != 2 or res[0] < 32 or res[1] < 32:
                raise ScheduleError("resolutions must be at least 32x32")
        if self.trans_sigma is not None and self.trans_sigma < 0:
            raise ScheduleError("trans_sigma must be non-negative")
        if self.rot_mag < 0:
            raise ScheduleError("rot_mag must be non-negative")
        if self.seed < 0:
            raise ScheduleError("seed must be non-negative")
        if self.n_levels < 1:
            raise ScheduleError("n_levels must be >= 1")

    @property
    def n2(self) -> int:
        """First step index of the fine tail."""
        return self.total_steps - self.fine_tail

    def resolved(self, scene_diagonal: float) -> "Schedule":
        """Concrete copy with trans_sigma filled in from the scene scale."""
        if self.trans_sigma is not None:
            return self
        return replace(self, trans_sigma=self.trans_sigma_frac * scene_diagonal)


@dataclass(frozen=True)
class StepPlan:
    """Everything the refinement loop needs for one step."""

    step: int
    level: int  # pyramid level: 1 = finest, n_levels = coarsest
    resolution: tuple[int, int]  # (H, W)
    n_candidates: int
    trans_sigma: np.ndarray  # (3,) meters, vertical component damped
    rot_mag: float  # degrees


def _lerp(a: float, b: float, frac: float) -> float:
    return a + (b - a) * frac


def schedule_at(sched: Schedule, step: int) -> StepPlan:
    """Resolve the plan for one step; requires a schedule with concrete noise."""
    if not 0 <= step < sched.total_steps:
        raise ScheduleError(f"step {step} out of range 0..{sched.total_steps - 1}")
    if sched.trans_sigma is None:
        raise ScheduleError("schedule noise is unresolved; call Schedule.resolved(scene_diagonal) first")
    if step < sched.n1:
        level = sched.n_levels
    elif step < sched.n2:
        level = (sched.n_levels + 1) // 2 if sched.n_levels > 2 else sched.n_levels
    else:
        level = 1
    frac = step / (sched.total_steps - 1) if sched.total_steps > 1 else 0.0
    n_cand = int(round(_lerp(sched.candidates_start, sched.candidates_end, frac)))
    res = (
        int(round(_lerp(sched.res_low[0], sched.res_high[0], frac))),
        int(round(_lerp(sched.res_low[1], sched.res_high[1], frac))),
    )
    decay = 1.0 - (step % sched.resample_interval) / sched.resample_interval
    lat = sched.trans_sigma * decay
    return StepPlan(
        step=step,
        level=level,
        resolution=res,
        n_candidates=n_cand,
        trans_sigma=np.array([lat, lat / VERTICAL_DAMPING, lat]),
        rot_mag=sched.rot_mag * decay,
    )


@dataclass
class Particle:
    pose: Pose
    weight: float  # raw score, lower is better


@dataclass
class Beam:
    """Independent particle set. `rng` is derived from (seed, index, epoch)."""

    particles: list[Particle]
    best: Particle
    rng: np.random.Generator
    master_seed: int
    index: int
    epoch: int = 0
    noise_state: tuple | None = None  # (trans_sigma, rot_mag) last applied


def _beam_rng(master_seed: int, index: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, index, epoch]))


def make_beams(init: Pose, n_beams: int, master_seed: int) -> list[Beam]:
    """Seed `n_beams` beams at the initial pose with independent rng streams."""
    beams = []
    for i in range(n_beams):
        seedling = Particle(init, math.inf)
        beams.append(Beam([seedling], seedling, _beam_rng(master_seed, i, 0), master_seed, i))
    return beams


def sample_candidates(beam: Beam, plan: StepPlan) -> list[Pose]:
    """Candidate poses for one step: the incumbent best plus perturbed samples.

    The incumbent occupies the first of the `n_candidates` slots so ranking
    with index tie-breaks can never regress while scoring conditions stay
    fixed.
    """
    poses = [beam.best.pose]
    for _ in range(plan.n_candidates - 1):
        poses.append(perturb_pose(beam.best.pose, plan.trans_sigma, plan.rot_mag, beam.rng))
    beam.noise_state = (plan.trans_sigma.copy(), plan.rot_mag)
    return poses


def rank_and_update(beam: Beam, candidates: list[Pose], scores: list[float]) -> Beam:
    """Replace the beam's particles with scored candidates; argmin becomes best.

    Ties keep the earliest index, so the incumbent (slot 0) survives exact
    score ties and parallel evaluation cannot reorder results.
    """
    if len(candidates) != len(scores):
        raise ValueError(f"{len(candidates)} candidates vs {len(scores)} scores")
    if not candidates:
        raise ValueError("need at least one candidate")
    for s in scores:
        if not math.isfinite(s):
            raise ValueError("scores must be finite")
    beam.particles = [Particle(p, float(s)) for p, s in zip(candidates, scores)]
    best_i = 0
    for i in range(1, len(beam.particles)):
        if beam.particles[i].weight < beam.particles[best_i].weight:
            best_i = i
    beam.best = beam.particles[best_i]
    return beam


def resample_beams(beams: list[Beam]) -> list[Beam]:
    """Pool incumbent bests across beams and reseed one survivor per beam.

    Survivors are assigned in ascending score order (stable on input beam
    order). Every new beam gets a fresh rng stream derived from
    (master_seed, beam index, epoch+1) and a cleared noise state.
    """
    if not beams:
        raise ValueError("need at least one beam")
    weights = np.array([b.best.weight for b in beams])
    order = np.argsort(weights, kind="stable")
    epoch = beams[0].epoch + 1
    fresh = []
    for i in range(len(beams)):
        seed_particle = beams[int(order[i])].best
        seedling = Particle(seed_particle.pose, seed_particle.weight)
        fresh.append(
            Beam([seedling], seedling, _beam_rng(beams[i].master_seed, i, epoch),
                 beams[i].master_seed, i, epoch=epoch)
        )
    return fresh


# --------------------------------------------------------------------------
# Schedule config file: flat key=value lines, '#' comments, closed key set.
# --------------------------------------------------------------------------

_FILE_KEYS = {
    "total_steps": int,
    "resample_interval": int,
    "n1": int,
    "fine_tail": int,
    "beams": int,
    "candidates_start": int,
    "candidates_end": int,
    "res_low": "res",
    "res_high": "res",
    "trans_sigma": float,
    "rot_mag": float,
    "seed": int,
}


def _parse_resolution(value: str) -> tuple[int, int]:
    parts = value.lower().split("x")
    if len(parts) != 2:
        raise ScheduleError(f"resolution must look like '48x64', got '{value}'")
    try:
        return (int(parts[0]), int(parts[1]))
    except ValueError as exc:
        raise ScheduleError(f"non-integer resolution '{value}'") from exc


def parse_schedule_items(items: dict[str, str], base: Schedule | None = None) -> Schedule:
    """Apply string key=value overrides to a base schedule; unknown keys are errors."""
    kwargs = {}
    for key, value in items.items():
        if key not in _FILE_KEYS:
            raise ScheduleError(f"unknown schedule key '{key}'")
        kind = _FILE_KEYS[key]
        try:
            if kind == "res":
                kwargs[key] = _parse_resolution(value)
            else:
                kwargs[key] = kind(value)
        except ScheduleError:
            raise
        except ValueError as exc:
            raise ScheduleError(f"bad value for schedule key '{key}': '{value}'") from exc
    base = base if base is not None else Schedule()
    return replace(base, **kwargs)  # re-runs validation


def load_schedule(path, base: Schedule | None = None) -> Schedule:
    """Read a key=value schedule file on top of `base` (or the defaults)."""
    items: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ScheduleError(f"{path}:{lineno}: expected key=value, got '{line}'")
            key, _, value = line.partition("=")
            items[key.strip()] = value.strip()
    try:
        return parse_schedule_items(items, base)
    except ScheduleError as exc:
        raise ScheduleError(f"{path}: {exc}") from exc


def preset_schedule(name: str) -> Schedule:
    """Named schedule templates for the three use cases.

    standalone: full coarse-to-fine run from a rough initial pose.
    preprocess: coarse+mid only, hands a better prior to a downstream solver.
    postprocess: a short fine-only polish of an already-accurate pose.
    """
    if name == "standalone":
        return Schedule()
    if name == "preprocess":
        return Schedule(total_steps=40, n1=30, fine_tail=0)
    if name == "postprocess":
        return Schedule(
            total_steps=5,
            n1=0,
            fine_tail=5,
            candidates_start=50,
            candidates_end=50,
            res_low=(96, 128),
            res_high=(96, 128),
            trans_sigma_frac=0.005,
            rot_mag=0.5,
        )
    raise ScheduleError(f"unknown preset '{name}' (valid: standalone, preprocess, postprocess)")
