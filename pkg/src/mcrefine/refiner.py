"""Per-query pose refinement loop: sample, render, extract, rank, resample.

Each step takes its plan from the schedule, perturbs every beam's incumbent
pose into a candidate batch, renders the candidates at the planned
resolution, scores them against the query at the planned pyramid level, and
keeps the per-beam argmin. Beams exchange survivors at resampling
boundaries. The query's features are cached per resolution and re-extracted
only when the resolution ramp moves.
"""

from __future__ import annotations

import hashlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import cv2
import numpy as np

from . import features as ft
from .geometry import Intrinsics, Pose
from .particle_filter import (
    Beam,
    Schedule,
    StepPlan,
    make_beams,
    rank_and_update,
    resample_beams,
    sample_candidates,
    schedule_at,
)
from .renderer import RenderedView, Scene, ShadingMode, render

SCORERS = ("dense", "exhaustive", "patchwise", "implicit")


@dataclass(frozen=True)
class TrajectoryPoint:
    step: int
    pose: Pose
    score: float
    level: int
    resolution: tuple[int, int]


@dataclass(frozen=True)
class RefineResult:
    final_pose: Pose
    trajectory: tuple[TrajectoryPoint, ...]
    wall_time: float


class _QueryContext:
    """Query-side features, lazily computed and cached per (resolution, level)."""

    def __init__(self, query: np.ndarray, config: ft.PyramidConfig, external: ft.FeaturePyramid | None = None):
        self.query = np.asarray(query, dtype=np.float32)
        self.config = config
        self.external = external
        self._resized: dict[tuple[int, int], np.ndarray] = {}
        self._volumes: dict[tuple[int, int, int], np.ndarray] = {}
        self._keypoints: dict[tuple[int, int], ft.KeypointSet] = {}

    def resized(self, resolution: tuple[int, int]) -> np.ndarray:
        if resolution not in self._resized:
            h, w = resolution
            self._resized[resolution] = cv2.resize(self.query, (w, h), interpolation=cv2.INTER_AREA)
        return self._resized[resolution]

    def volume(self, resolution: tuple[int, int], level: int) -> np.ndarray:
        key = (resolution[0], resolution[1], level)
        if key not in self._volumes:
            if self.external is not None:
                vol = self.external.level(level)
            else:
                vol = ft.extract_level(self.resized(resolution), self.config, level)
            self._volumes[key] = vol
        return self._volumes[key]

    def keypoints(self, resolution: tuple[int, int]) -> ft.KeypointSet:
        if resolution not in self._keypoints:
            self._keypoints[resolution] = ft.detect_keypoints(self.resized(resolution))
        return self._keypoints[resolution]


def _make_candidate_scorer(scorer: str, ctx: _QueryContext, plan: StepPlan, patch_window: float, smooth_window: int):
    """Bind the per-step query context into a view -> score function."""
    if scorer == "dense":
        qvol = ctx.volume(plan.resolution, plan.level)

        def score(view: RenderedView) -> float:
            return ft.dense_volume_score(qvol, ft.extract_level(view.image, ctx.config, plan.level))

    elif scorer == "implicit":
        qvol = ctx.volume(plan.resolution, plan.level)

        def score(view: RenderedView) -> float:
            return ft.implicit_volume_score(
                qvol, ft.extract_level(view.image, ctx.config, plan.level), smooth_window
            )

    elif scorer == "exhaustive":
        qkp = ctx.keypoints(plan.resolution)

        def score(view: RenderedView) -> float:
            return ft.match_score_exhaustive(qkp, ft.detect_keypoints(view.image))

    elif scorer == "patchwise":
        qkp = ctx.keypoints(plan.resolution)

        def score(view: RenderedView) -> float:
            return ft.match_score_patchwise(qkp, ft.detect_keypoints(view.image), patch_window)

    else:
        raise ValueError(f"unknown scorer '{scorer}' (valid: {', '.join(SCORERS)})")
    return score


def refine(
    query: np.ndarray,
    init: Pose,
    scene: Scene,
    intr: Intrinsics,
    sched: Schedule,
    scorer: str = "dense",
    extractor: ft.PyramidConfig | None = None,
    shading: ShadingMode = ShadingMode.TEXTURED,
    external_query: ft.FeaturePyramid | None = None,
    patch_window: float = 16.0,
    smooth_window: int = 5,
    threads: int = 1,
) -> RefineResult:
    """Refine `init` toward the pose that best re-renders the query image.

    `query` is an (H,W,3) image in [0,1] whose aspect ratio must match the
    intrinsics. Candidates are rendered with `shading`. `external_query`
    substitutes precomputed query-side feature volumes for the built-in
    extractor (their level shapes must match what the schedule renders).
    Runs are deterministic for a fixed schedule seed, also across `threads`.
    """
    if scorer not in SCORERS:
        raise ValueError(f"unknown scorer '{scorer}' (valid: {', '.join(SCORERS)})")
    if scene.n_triangles == 0:
        raise ValueError("scene has no triangles; refusing to refine against nothing")
    query = np.asarray(query, dtype=np.float32)
    if query.ndim != 3 or query.shape[2] != 3:
        raise ValueError("query must be an (H,W,3) image")
    aspect_q = query.shape[0] / query.shape[1]
    aspect_i = intr.height / intr.width
    if abs(aspect_q - aspect_i) > 0.02 * aspect_i:
        raise ValueError(
            f"query aspect ratio {aspect_q:.4f} incompatible with intrinsics {aspect_i:.4f}"
        )
    config = extractor if extractor is not None else ft.PyramidConfig(n_levels=sched.n_levels)
    if config.n_levels < sched.n_levels:
        raise ValueError("extractor has fewer levels than the schedule uses")
    sched = sched.resolved(scene.diagonal)
    ctx = _QueryContext(query, config, external_query)

    t0 = time.perf_counter()
    beams = make_beams(init, sched.beams, sched.seed)
    trajectory: list[TrajectoryPoint] = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 and sched.beams > 1 else None
    try:
        for step in range(sched.total_steps):
            if step > 0 and step % sched.resample_interval == 0:
                beams = resample_beams(beams)
            plan = schedule_at(sched, step)
            step_intr = intr.scaled(plan.resolution[0], plan.resolution[1])
            score_fn = _make_candidate_scorer(scorer, ctx, plan, patch_window, smooth_window)

            def advance(beam: Beam) -> None:
                candidates = sample_candidates(beam, plan)
                scores = [score_fn(render(scene, pose, step_intr, shading)) for pose in candidates]
                rank_and_update(beam, candidates, scores)

            if pool is not None:
                list(pool.map(advance, beams))
            else:
                for beam in beams:
                    advance(beam)

            best = beams[0].best
            for beam in beams[1:]:
                if beam.best.weight < best.weight:
                    best = beam.best
            trajectory.append(TrajectoryPoint(step, best.pose, best.weight, plan.level, plan.resolution))
    finally:
        if pool is not None:
            pool.shutdown()

    return RefineResult(trajectory[-1].pose, tuple(trajectory), time.perf_counter() - t0)


def derive_query_seed(master_seed: int, query: np.ndarray, init: Pose) -> int:
    """Per-query seed from the master seed and the query content.

    Content-keyed (not position-keyed) so reordering a batch permutes its
    results; identical (query, init) pairs share a stream.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(np.int64(master_seed).tobytes())
    h.update(np.ascontiguousarray(query, dtype=np.float32).tobytes())
    h.update(init.quat.tobytes())
    h.update(init.center.tobytes())
    return int.from_bytes(h.digest(), "little")


def refine_batch(
    queries: list[np.ndarray],
    inits: list[Pose],
    scene: Scene,
    intr: Intrinsics,
    sched: Schedule,
    **kwargs,
) -> list[RefineResult]:
    """Refine a batch of queries; results align with the input order."""
    if len(queries) != len(inits):
        raise ValueError(f"{len(queries)} queries vs {len(inits)} initial poses")
    results = []
    for query, init in zip(queries, inits):
        qsched = replace(sched, seed=derive_query_seed(sched.seed, query, init))
        results.append(refine(query, init, scene, intr, qsched, **kwargs))
    return results
