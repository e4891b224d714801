"""Outer refinement loop and the ablation modes.

``hierarchical``  pyramid, then pose graph over all window constraints
``direct_assign``  pyramid, then optimized upper poses pushed straight down
``original_ba``   one bundle adjustment over every frame
``reduced_ba``    as ``original_ba`` but each LM system keeps only diagonal
                  blocks of ``s`` poses

Every mode repeats its refinement, re-voxelizing with the updated poses, until
the final BA cost stops decreasing by more than ``rel_cost_tol`` (relative) or
drops below ``abs_cost_tol``, or ``max_passes`` is reached.
"""
from __future__ import annotations

import csv
import logging
import resource
import time
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .ba import BaConfig, solve_window
from .errors import ConfigError, HbaError
from .posegraph import GraphConfig, build_graph, optimize
from .pyramid import PyramidConfig, build_pyramid, direct_assign

log = logging.getLogger(__name__)

MODES = ("hierarchical", "original_ba", "reduced_ba", "direct_assign")


@dataclass
class PipelineConfig:
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    ba: BaConfig = field(default_factory=BaConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    max_passes: int = 5
    rel_cost_tol: float = 1e-3
    abs_cost_tol: float = 1e-12
    mode: str = "hierarchical"

    def validate(self):
        if self.max_passes < 1:
            raise ConfigError("max_passes must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        self.pyramid.validate()
        return self


@dataclass
class PassReport:
    pass_index: int
    cost_ba: float
    cost_pg: float
    t_voxel_s: float
    t_ba_s: float
    t_pg_s: float
    rss_mb_estimate: float
    mode: str = "hierarchical"
    layers: int = 1
    ba_iterations: int = 0
    converged: bool = True

    CSV_FIELDS = ("pass", "cost_ba", "cost_pg", "t_voxel_s", "t_ba_s", "t_pg_s",
                  "rss_mb_estimate", "mode", "layers", "ba_iterations", "converged")

    def row(self):
        return [self.pass_index, f"{self.cost_ba:.6e}", f"{self.cost_pg:.6e}",
                f"{self.t_voxel_s:.3f}", f"{self.t_ba_s:.3f}", f"{self.t_pg_s:.3f}",
                f"{self.rss_mb_estimate:.1f}", self.mode, self.layers, self.ba_iterations,
                int(self.converged)]


class RunResult(NamedTuple):
    trajectory: list
    reports: list
    error: HbaError | None = None


def _rss_mb():
    own = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    kids = resource.getrusage(resource.RUSAGE_CHILDREN).ru_maxrss
    return (own + kids) / 1024.0


def _pyramid_pass(frames, config: PipelineConfig, k):
    pyr = build_pyramid(frames, config.pyramid, config.ba)
    results = [r for layer in pyr.layers for r in layer.results]
    if pyr.top is not None:
        results.append(pyr.top)
    # summed over windows, so with several workers these exceed wall time
    t_voxel = sum(r.t_voxel for r in results)
    t_ba = sum(r.t_ba for r in results)
    poses = direct_assign(pyr)
    cost_pg, t_pg = float("nan"), 0.0
    if config.mode == "hierarchical":
        t1 = time.perf_counter()
        graph = build_graph(pyr, poses)
        res = optimize(graph, config.graph)
        poses, cost_pg = res.poses, res.cost
        t_pg = time.perf_counter() - t1
    top = pyr.top
    report = PassReport(k, top.cost if top else 0.0, cost_pg, t_voxel, t_ba, t_pg, _rss_mb(),
                        config.mode, len(pyr.layers), top.iterations if top else 0,
                        top.converged if top else True)
    return poses, report, top.initial_cost if top else 0.0


def _full_ba_pass(frames, config: PipelineConfig, k):
    ba = config.ba
    if config.mode == "reduced_ba":
        ba = replace(ba, block_size=config.pyramid.s)
    res = solve_window(frames, [f.pose for f in frames], ba, config.pyramid.voxel_config(),
                       keep_map=False)
    base = frames[0].pose
    poses = [base.compose(p) for p in res.poses]
    report = PassReport(k, res.cost, float("nan"), res.t_voxel, res.t_ba, 0.0, _rss_mb(), config.mode, 1, res.iterations, res.converged)
    return poses, report, res.initial_cost


def run(frames, trajectory=None, config: PipelineConfig | None = None) -> RunResult:
    """Refine the poses of ``frames`` (or ``trajectory`` if given); inputs are not modified."""
    config = (config or PipelineConfig()).validate()
    if len(frames) < 2:
        raise ConfigError("need at least 2 frames")
    poses = list(trajectory) if trajectory is not None else [f.pose for f in frames]
    if len(poses) != len(frames):
        raise ConfigError(f"{len(frames)} frames but {len(poses)} poses")
    step = _full_ba_pass if config.mode in ("original_ba", "reduced_ba") else _pyramid_pass
    reports = []
    prev = None
    for k in range(1, config.max_passes + 1):
        current = [f.with_pose(p) for f, p in zip(frames, poses)]
        try:
            new_poses, report, _ = step(current, config, k)
        except HbaError as exc:
            log.error("pass %d failed in %s: %s", k, exc.stage, exc)
            return RunResult(poses, reports, exc)
        poses = new_poses
        reports.append(report)
        log.info("pass %d: ba cost %.6e, graph cost %.6e", k, report.cost_ba, report.cost_pg)
        cost = report.cost_ba
        if cost < config.abs_cost_tol:
            break
        if prev is not None and (prev - cost) < config.rel_cost_tol * prev:
            break
        prev = cost
    return RunResult(poses, reports, None)


def run_original_ba(frames, trajectory=None, config: PipelineConfig | None = None):
    config = replace(config or PipelineConfig(), mode="original_ba")
    return run(frames, trajectory, config)


def run_reduced_ba(frames, trajectory=None, config: PipelineConfig | None = None):
    config = replace(config or PipelineConfig(), mode="reduced_ba")
    return run(frames, trajectory, config)


def run_direct_assign(frames, trajectory=None, config: PipelineConfig | None = None):
    config = replace(config or PipelineConfig(), mode="direct_assign")
    return run(frames, trajectory, config)


def write_report(reports, path_or_file):
    """One CSV row per pass."""
    own = isinstance(path_or_file, str)
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh)
        w.writerow(PassReport.CSV_FIELDS)
        for r in reports:
            w.writerow(r.row())
    finally:
        if own:
            fh.close()


def max_adjacent_discontinuity(estimate, ground_truth):
    """Largest adjacent relative-pose error against ground truth, as ``(rad, m)``."""
    rot, trans = 0.0, 0.0
    for k in range(len(estimate) - 1):
        e = ground_truth[k].relative(ground_truth[k + 1]).inverse().compose(
            estimate[k].relative(estimate[k + 1])).log()
        rot = max(rot, float(np.linalg.norm(e[:3])))
        trans = max(trans, float(np.linalg.norm(e[3:])))
    return rot, trans
