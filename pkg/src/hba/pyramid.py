"""Bottom-up layer hierarchy of windowed bundle adjustments.

Layer ``i`` is cut into overlapping windows of ``w`` frames with stride ``s``.
Each window is bundle-adjusted on its own; its plane points, moved into the
window's first frame by the optimized relative poses, form one keyframe of
layer ``i + 1``. Keyframe ``j`` therefore sits at the pose of frame ``s j`` of
the layer below, which is what lets every upper-layer constraint be attached
to a first-layer pose. The top layer is solved as one global window.
"""
from __future__ import annotations

import gc
import logging
import math
import multiprocessing
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ba import (BaConfig, VoxelConfig, WindowResult, covariance, identity_window_result,
                 relative_pose_information, solve_window)
from .errors import ConfigError, HbaError, NoFeatures
from .geometry import Pose
from .io import Frame, filter_points

log = logging.getLogger(__name__)


@dataclass
class PyramidConfig:
    w: int = 10
    s: int = 5
    n: int = 8
    l: int = 0                      # 0 selects the layer count automatically
    theta_local: float = 0.05
    voxel_local: float = 4.0
    theta_global: float = 0.1
    voxel_global: float = 4.0
    min_points: int = 20
    max_depth: int = 3
    keyframe_downsample: float = 0.0   # > 0 thins keyframe points to one per cube of this size

    def validate(self):
        if self.s < 2:
            raise ConfigError(f"stride s={self.s} must be >= 2")
        if self.s >= self.w:
            raise ConfigError(f"stride s={self.s} must be smaller than window w={self.w}")
        if self.n < 1:
            raise ConfigError("worker count n must be >= 1")
        if self.l < 0:
            raise ConfigError("layer count l must be >= 0")
        for name in ("theta_local", "theta_global", "voxel_local", "voxel_global"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        return self

    def voxel_config(self, top=False):
        return VoxelConfig(self.voxel_global if top else self.voxel_local,
                           self.theta_global if top else self.theta_local,
                           self.min_points, self.max_depth)


@dataclass
class Factor:
    """Relative-pose measurement between two first-layer nodes ``a < b``."""

    a: int
    b: int
    Z: Pose
    info: np.ndarray
    layer: int


@dataclass
class Layer:
    index: int                      # 1-based
    frames: list
    windows: list = field(default_factory=list)   # (start, length)
    results: list = field(default_factory=list)   # WindowResult per window
    factors: list = field(default_factory=list)   # per window: [(j, Z, info)] in window-local j


@dataclass
class Pyramid:
    layers: list
    top: WindowResult | None
    top_factors: list
    s: int

    @property
    def top_layer(self):
        return self.layers[-1]

    def node(self, layer, j):
        """First-layer frame index of frame ``j`` of ``layer`` (1-based)."""
        return self.s ** (layer - 1) * j


def partition_windows(n_frames, w, s):
    """Window ``(start, length)`` pairs covering ``n_frames`` frames; the last absorbs the tail."""
    if n_frames < 2:
        raise ValueError("need at least 2 frames")
    if n_frames < w:
        return [(0, n_frames)]
    count = (n_frames - w) // s + 1
    out = [(s * j, w) for j in range(count)]
    start = out[-1][0]
    out[-1] = (start, n_frames - start)
    return out


def predict_cost(N, w, s, n, l):
    """Planning-model time ``T_l`` of an ``l``-layer hierarchy over ``N`` frames."""
    if l < 1:
        raise ValueError("l must be >= 1")
    if l == 1:
        return float(N) ** 3
    local = (w**3 / n) * sum(N / s**i for i in range(1, l))
    return local + (N / s ** (l - 1)) ** 3


def layer_cap(N, w, s):
    """Largest ``l`` whose top layer still holds about ``w`` frames: ``1 + floor(log_s(N / w))``."""
    if N < w:
        return 1
    cap = 1
    while N / s**cap >= w:
        cap += 1
    return cap


def closed_form_l(N, w, s, n):
    """Stationary point of the planning model, ``floor(log_s(3 N^2 (s^3 - s) n / w^3) / 2)``."""
    return int(math.floor(0.5 * math.log(3 * N**2 * (s**3 - s) * n / w**3, s)))


def select_layers(N, w, s, n):
    """Integer argmin of :func:`predict_cost` over ``1..layer_cap``; ties go to fewer layers."""
    if N < w:
        return 1
    best, best_cost = 1, predict_cost(N, w, s, n, 1)
    for l in range(2, layer_cap(N, w, s) + 1):
        c = predict_cost(N, w, s, n, l)
        if c < best_cost:
            best, best_cost = l, c
    return best


def _window_outcome(frames, ba_config, voxel_config, keyframe_downsample):
    """Solve one window; returns (result without map, keyframe points, factor list)."""
    try:
        result = solve_window(frames, [f.pose for f in frames], ba_config, voxel_config)
    except NoFeatures as exc:
        warnings.warn(f"{exc}; keeping initial poses", RuntimeWarning, stacklevel=2)
        result = identity_window_result(frames)
    vmap = result.voxel_map
    chunks = []
    for k, (f, rel) in enumerate(zip(frames, result.poses)):
        pts = f.points if vmap is None else f.points[vmap.plane_point_mask(k)]
        chunks.append(rel.apply(pts))
    points = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    if keyframe_downsample > 0 and len(points):
        points = filter_points(points, keyframe_downsample)
    sigma = None
    factors = []
    if not result.no_features:
        try:
            sigma = covariance(result)
        except (HbaError, np.linalg.LinAlgError):
            sigma = None            # each pair then falls back on its own
    for j in range(result.size - 1):
        Z, info = relative_pose_information(result, j, sigma=sigma)
        factors.append((j, Z, info))
    result.voxel_map = None
    return result, points, factors


_POOL_STATE = {}


def _pool_task(idx):
    st = _POOL_STATE
    start, length = st["windows"][idx]
    return _window_outcome(st["frames"][start:start + length], st["ba"], st["vox"], st["kds"])


def _run_windows(frames, windows, ba_config, voxel_config, kds, workers):
    if workers <= 1 or len(windows) <= 1:
        return [_window_outcome(frames[a:a + n], ba_config, voxel_config, kds) for a, n in windows]
    _POOL_STATE.update(frames=frames, windows=windows, ba=ba_config, vox=voxel_config, kds=kds)
    gc.collect()
    gc.freeze()     # keep the children from copying every page the collector would touch
    try:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=min(workers, len(windows)), mp_context=ctx) as pool:
            return list(pool.map(_pool_task, range(len(windows))))
    finally:
        _POOL_STATE.clear()
        gc.unfreeze()


def build_layer(layer: Layer, config: PyramidConfig, ba_config: BaConfig):
    """Solve all windows of ``layer`` and return the keyframes of the next layer."""
    frames = layer.frames
    layer.windows = partition_windows(len(frames), config.w, config.s)
    outcomes = _run_windows(frames, layer.windows, ba_config, config.voxel_config(),
                            config.keyframe_downsample, config.n)
    layer.results = [o[0] for o in outcomes]
    layer.factors = [o[2] for o in outcomes]
    keyframes = []
    pose = frames[0].pose
    for j, ((start, _), (result, points, _)) in enumerate(zip(layer.windows, outcomes)):
        if j > 0:
            # chain through the previous window: its frame s sits at this window's start
            prev = layer.results[j - 1]
            pose = pose.compose(prev.poses[0].relative(prev.poses[config.s]))
        keyframes.append(Frame(j, points, pose, layer=layer.index + 1,
                               meta={"source": start}))
    return keyframes


def build_pyramid(frames, config: PyramidConfig | None = None, ba_config: BaConfig | None = None,
                  layers: int | None = None) -> Pyramid:
    """Layers ``1..l`` of windowed BA plus one global BA on the top layer."""
    config = (config or PyramidConfig()).validate()
    ba_config = ba_config or BaConfig()
    if len(frames) < 2:
        raise ValueError("need at least 2 frames")
    l = layers if layers is not None else (config.l or select_layers(len(frames), config.w,
                                                                     config.s, config.n))
    stack = [Layer(1, list(frames))]
    while len(stack) < l:
        cur = stack[-1]
        if len(cur.frames) < 2:
            break
        nxt = build_layer(cur, config, ba_config)
        log.info("layer %d: %d frames, %d windows", cur.index, len(cur.frames), len(cur.windows))
        stack.append(Layer(cur.index + 1, nxt))
    top_layer = stack[-1]
    top, top_factors = None, []
    if len(top_layer.frames) >= 2:
        result, _, top_factors = _window_outcome(top_layer.frames, ba_config,
                                                 config.voxel_config(top=True), 0.0)
        top = result
        log.info("top layer %d: %d frames, cost %.3e -> %.3e", top_layer.index,
                 len(top_layer.frames), result.initial_cost, result.cost)
    return Pyramid(stack, top, top_factors, config.s)


def collect_factors(pyramid: Pyramid):
    """All relative-pose factors mapped onto first-layer nodes, in layer/window/pair order."""
    out = []
    for layer in pyramid.layers[:-1]:
        for (start, _), facs in zip(layer.windows, layer.factors):
            for j, Z, info in facs:
                out.append(Factor(pyramid.node(layer.index, start + j),
                                  pyramid.node(layer.index, start + j + 1), Z, info, layer.index))
    top = pyramid.top_layer
    for j, Z, info in pyramid.top_factors:
        out.append(Factor(pyramid.node(top.index, j), pyramid.node(top.index, j + 1), Z, info,
                          top.index))
    return out


def direct_assign(pyramid: Pyramid):
    """First-layer poses obtained by pushing optimized upper poses straight down.

    The top layer takes the global BA poses; then frame ``f`` of each lower
    layer gets ``T_upper[j] * rel_j[f - start_j]`` from the window ``j`` whose
    stride block contains it (the last window also takes the tail).
    """
    top_layer = pyramid.top_layer
    if pyramid.top is not None:
        base = top_layer.frames[0].pose
        poses = [base.compose(p) for p in pyramid.top.poses]
    else:
        poses = [f.pose for f in top_layer.frames]
    for layer in reversed(pyramid.layers[:-1]):
        lower = []
        n_win = len(layer.windows)
        for f in range(len(layer.frames)):
            j = min(f // pyramid.s, n_win - 1)
            start = layer.windows[j][0]
            lower.append(poses[j].compose(layer.results[j].poses[f - start]))
        poses = lower
    return poses
