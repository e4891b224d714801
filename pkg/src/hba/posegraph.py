"""Pose graph over first-layer poses built from windowed BA results.

Each factor measures ``Z ~ Ta^-1 Tb`` with residual ``e = Log(Z^-1 Ta^-1 Tb)``
and cost ``e' L e``. Node 0 carries a strong prior at its initial pose, which
fixes the gauge. The normal equations are sparse (a band from overlapping
windows plus the longer edges of upper layers) and solved with SuperLU.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .errors import DisconnectedGraph, NonFiniteCost
from .geometry import (Pose, adjoint, compose_arrays, inverse_arrays, se3_exp, se3_log,
                       se3_right_jacobian_inv, stack_poses, unstack_poses)
from .pyramid import Factor, collect_factors

log = logging.getLogger(__name__)

PRIOR_WEIGHT = 1e6


@dataclass
class GraphConfig:
    max_iter: int = 50
    grad_tol: float = 1e-8
    step_tol: float = 1e-12
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_dn: float = 10.0
    max_retries: int = 12


@dataclass
class FactorGraph:
    nodes: list                 # initial first-layer poses
    factors: list               # Factor
    prior: Pose | None = None   # anchor of node 0; defaults to nodes[0]
    prior_info: np.ndarray = field(default_factory=lambda: PRIOR_WEIGHT * np.eye(6))

    def __post_init__(self):
        if self.prior is None:
            self.prior = self.nodes[0]
        n = len(self.nodes)
        self.a = np.array([f.a for f in self.factors], dtype=np.int64)
        self.b = np.array([f.b for f in self.factors], dtype=np.int64)
        if len(self.factors) and (self.a.min() < 0 or self.b.max() >= n):
            raise IndexError("factor references a missing node")
        self.ZinvR, self.Zinvt = inverse_arrays(*stack_poses([f.Z for f in self.factors]))
        self.L = (np.stack([f.info for f in self.factors]) if self.factors
                  else np.zeros((0, 6, 6)))

    def check_connected(self):
        n = len(self.nodes)
        if n == 1:
            return
        adj = sp.coo_matrix((np.ones(len(self.a)), (self.a, self.b)), shape=(n, n))
        count, labels = connected_components(adj, directed=False)
        if count > 1:
            lost = np.flatnonzero(labels != labels[0])
            raise DisconnectedGraph(f"{count} components; node {lost[0]} unreachable from node 0")


@dataclass
class GraphResult:
    poses: list
    cost: float
    initial_cost: float
    iterations: int
    converged: bool


def factor_residual(factor: Factor, Ta: Pose, Tb: Pose):
    """``(e, e' L e)`` of one factor."""
    e = factor.Z.inverse().compose(Ta.inverse()).compose(Tb).log()
    return e, float(e @ factor.info @ e)


def _residuals(graph: FactorGraph, R, t):
    Ra, ta = R[graph.a], t[graph.a]
    Rb, tb = R[graph.b], t[graph.b]
    Rai, tai = inverse_arrays(Ra, ta)
    ER, Et = compose_arrays(*compose_arrays(graph.ZinvR, graph.Zinvt, Rai, tai), Rb, tb)
    e = se3_log(ER, Et)
    PR, Pt = inverse_arrays(graph.prior.rotation, graph.prior.translation)
    e0 = se3_log(*compose_arrays(PR, Pt, R[0], t[0]))
    return e, e0, (Ra, ta, Rb, tb)


def graph_cost(graph: FactorGraph, R=None, t=None):
    if R is None:
        R, t = stack_poses(graph.nodes)
    e, e0, _ = _residuals(graph, R, t)
    return float(np.einsum("ki,kij,kj->", e, graph.L, e) + e0 @ graph.prior_info @ e0)


def _linearize(graph: FactorGraph, R, t):
    """Cost, gradient half ``J' L e`` and sparse ``J' L J``."""
    n = len(R)
    e, e0, (Ra, ta, Rb, tb) = _residuals(graph, R, t)
    cost = float(np.einsum("ki,kij,kj->", e, graph.L, e) + e0 @ graph.prior_info @ e0)
    Jri = se3_right_jacobian_inv(e)
    Jb = Jri
    Ja = -Jri @ adjoint(*compose_arrays(*inverse_arrays(Rb, tb), Ra, ta))
    LJa = graph.L @ Ja
    LJb = graph.L @ Jb
    Le = np.einsum("kij,kj->ki", graph.L, e)
    g = np.zeros((n, 6))
    np.add.at(g, graph.a, np.einsum("kji,kj->ki", Ja, Le))
    np.add.at(g, graph.b, np.einsum("kji,kj->ki", Jb, Le))
    J0 = se3_right_jacobian_inv(e0)
    g[0] += J0.T @ graph.prior_info @ e0
    blocks = [np.swapaxes(Ja, 1, 2) @ LJa, np.swapaxes(Ja, 1, 2) @ LJb,
              np.swapaxes(Jb, 1, 2) @ LJa, np.swapaxes(Jb, 1, 2) @ LJb,
              (J0.T @ graph.prior_info @ J0)[None]]
    rows_n = [graph.a, graph.a, graph.b, graph.b, np.zeros(1, dtype=np.int64)]
    cols_n = [graph.a, graph.b, graph.a, graph.b, np.zeros(1, dtype=np.int64)]
    ii, jj = np.meshgrid(np.arange(6), np.arange(6), indexing="ij")
    rows = np.concatenate([(6 * r)[:, None, None] + ii for r in rows_n]).ravel()
    cols = np.concatenate([(6 * c)[:, None, None] + jj for c in cols_n]).ravel()
    vals = np.concatenate(blocks).ravel()
    H = sp.csc_matrix((vals, (rows, cols)), shape=(6 * n, 6 * n))
    return cost, g.ravel(), H


def optimize(graph: FactorGraph, config: GraphConfig | None = None) -> GraphResult:
    """Levenberg-Marquardt on the graph; accepted steps never raise the cost."""
    config = config or GraphConfig()
    graph.check_connected()
    R, t = stack_poses(graph.nodes)
    n = len(R)
    cost, g, H = _linearize(graph, R, t)
    if not np.isfinite(cost):
        raise NonFiniteCost(f"pose graph initial cost is {cost}")
    initial = cost
    lam = config.lambda_init
    eye = sp.identity(6 * n, format="csc")
    iterations, converged = 0, False
    while iterations < config.max_iter:
        if np.max(np.abs(g)) < config.grad_tol:
            converged = True
            break
        iterations += 1
        accepted = small = False
        for _ in range(config.max_retries):
            delta = -spsolve(H + lam * eye, g)
            if not np.all(np.isfinite(delta)):
                lam *= config.lambda_up
                continue
            if np.max(np.abs(delta)) < config.step_tol:
                small = True
                break
            dR, dt = se3_exp(delta.reshape(n, 6))
            R_new, t_new = compose_arrays(R, t, dR, dt)
            new_cost = graph_cost(graph, R_new, t_new)
            if np.isfinite(new_cost) and new_cost < cost:
                R, t, cost = R_new, t_new, new_cost
                lam = max(lam / config.lambda_dn, 1e-15)
                accepted = True
                break
            lam *= config.lambda_up
        if small or not accepted:
            converged = small or np.max(np.abs(g)) < config.grad_tol
            break
        cost, g, H = _linearize(graph, R, t)
    else:
        converged = np.max(np.abs(g)) < config.grad_tol
    if not converged:
        log.warning("pose graph stopped after %d iterations (|g| = %.2e)", iterations,
                    np.max(np.abs(g)))
    return GraphResult(unstack_poses(R, t), cost, initial, iterations, bool(converged))


def build_graph(pyramid, nodes) -> FactorGraph:
    """Graph over ``nodes`` (first-layer poses) with every factor of ``pyramid``."""
    graph = FactorGraph(list(nodes), collect_factors(pyramid))
    graph.check_connected()
    return graph


def write_edges(graph: FactorGraph, path):
    """One line per factor: ``a b layer`` + Z as 12 KITTI numbers + upper triangle of L."""
    iu = np.triu_indices(6)
    with open(path, "w") as fh:
        for f in graph.factors:
            M = f.Z.matrix()[:3].ravel()
            vals = " ".join(f"{x:.12e}" for x in np.concatenate([M, f.info[iu]]))
            fh.write(f"{f.a} {f.b} {f.layer} {vals}\n")
