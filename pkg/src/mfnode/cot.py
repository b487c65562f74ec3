"""Conditional optimal transport distance between discretized parameter measures.

d(mu, nu)^2 is the slice average of W_2^2(mu(.|s_k), nu(.|s_k)).  With equal
particle counts each slice problem is a linear assignment on squared
Euclidean costs; an entropic (Sinkhorn) solver covers unequal counts and is
only ever an upper bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .model import ParameterMeasure

MAX_JOINT_ATOMS = 512


@dataclass(frozen=True)
class Sinkhorn:
    eps: float = 1e-2
    max_iter: int = 10_000
    tol: float = 1e-9


@dataclass(frozen=True)
class CouplingPlan:
    """Per-slice plans (row/column sums 1/m) with their transport costs."""

    plans: tuple[np.ndarray, ...]
    slice_costs: np.ndarray
    perms: np.ndarray | None = None  # (S, m) matched column per row, exact solver only
    exact: bool = True

    @property
    def total_cost(self) -> float:
        return math.fsum(self.slice_costs) / len(self.slice_costs)


def _theta(mu) -> np.ndarray:
    return mu.theta if isinstance(mu, ParameterMeasure) else np.asarray(mu, dtype=float)


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sum(diff * diff, axis=-1)


def _assign(cost: np.ndarray) -> np.ndarray:
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[0], dtype=int)
    perm[rows] = cols
    return perm


def sinkhorn_plan(cost: np.ndarray, eps: float, max_iter: int = 10_000,
                  tol: float = 1e-9) -> tuple[np.ndarray, int]:
    """Log-domain Sinkhorn with eps-scaling from 1.0 down to ``eps`` (factor 0.5).

    Returns the plan and the number of iterations used.  Marginals are uniform.
    """
    n, k = cost.shape
    log_a = np.full(n, -math.log(n))
    log_b = np.full(k, -math.log(k))
    f = np.zeros(n)
    g = np.zeros(k)
    schedule = []
    e = 1.0
    while e > eps:
        schedule.append(e)
        e *= 0.5
    schedule.append(eps)
    iters = 0
    used = schedule[0]
    for level, e in enumerate(schedule):
        if iters >= max_iter:
            break
        used = e
        last = level == len(schedule) - 1
        while iters < max_iter:
            f = -e * logsumexp((g[None, :] - cost) / e + log_b[None, :], axis=1)
            g = -e * logsumexp((f[:, None] - cost) / e + log_a[:, None], axis=0)
            iters += 1
            logp = (f[:, None] + g[None, :] - cost) / e + log_a[:, None] + log_b[None, :]
            viol = np.max(np.abs(np.exp(logsumexp(logp, axis=1)) - 1.0 / n))
            if viol < tol or (not last and viol < 1e-3):
                break
    plan = np.exp((f[:, None] + g[None, :] - cost) / used + log_a[:, None] + log_b[None, :])
    return plan, iters


def cot_distance(mu, nu, solver: str | Sinkhorn = "exact") -> tuple[float, CouplingPlan]:
    """Conditional OT distance and the per-slice coupling realizing it."""
    a, b = _theta(mu), _theta(nu)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"slice counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[2] != b.shape[2]:
        raise ValueError("particle dimensions differ")
    S = a.shape[0]
    costs = np.empty(S)
    plans = []
    if isinstance(solver, str):
        if solver.lower() != "exact":
            raise ValueError(f"unknown solver {solver!r}")
        if a.shape[1] != b.shape[1]:
            raise ValueError("the exact solver needs equal particle counts; use Sinkhorn")
        m = a.shape[1]
        perms = np.empty((S, m), dtype=int)
        for k in range(S):
            C = _sqdist(a[k], b[k])
            perm = _assign(C)
            perms[k] = perm
            # fsum is correctly rounded, so d(a, b) == d(b, a) bit for bit
            costs[k] = math.fsum(C[np.arange(m), perm]) / m
            P = np.zeros((m, m))
            P[np.arange(m), perm] = 1.0 / m
            plans.append(P)
        plan = CouplingPlan(tuple(plans), costs, perms, exact=True)
    else:
        for k in range(S):
            C = _sqdist(a[k], b[k])
            P, _ = sinkhorn_plan(C, solver.eps, solver.max_iter, solver.tol)
            plans.append(P)
            costs[k] = float(np.sum(P * C))
        plan = CouplingPlan(tuple(plans), costs, None, exact=False)
    return math.sqrt(max(plan.total_cost, 0.0)), plan


def diagonal_cost(mu, nu, plan: CouplingPlan) -> float:
    """Cost of the same plan written as a coupling of the joint (s, omega) clouds.

    The plan is lifted to the block-diagonal joint coupling (atoms only move
    inside their own slice) and integrated against ||omega - omega'||^2.
    """
    a, b = _theta(mu), _theta(nu)
    S, m, p = a.shape
    mb = b.shape[1]
    big = np.zeros((S * m, S * mb))
    for k, P in enumerate(plan.plans):
        big[k * m:(k + 1) * m, k * mb:(k + 1) * mb] = P / S
    return float(np.sum(big * _sqdist(a.reshape(-1, p), b.reshape(-1, p))))


def same_measure(mu, nu, tol: float = 1e-12) -> bool:
    """Slice-wise multiset equality via sorted lexicographic comparison."""
    a, b = _theta(mu), _theta(nu)
    if a.shape != b.shape:
        return False
    for k in range(a.shape[0]):
        sa = a[k][np.lexsort(a[k].T[::-1])]
        sb = b[k][np.lexsort(b[k].T[::-1])]
        if np.max(np.abs(sa - sb)) > tol:
            return False
    return True


def slice_coordinates(S: int) -> np.ndarray:
    return (np.arange(S) + 0.5) / S


def wasserstein_lower_bound(mu, nu) -> float:
    """W_2 between the joint clouds {(s_k, theta)} by one global assignment."""
    a, b = _theta(mu), _theta(nu)
    S, m, p = a.shape
    if b.shape[0] * b.shape[1] != S * m or b.shape[2] != p:
        raise ValueError("joint clouds must hold the same number of atoms")
    if S * m > MAX_JOINT_ATOMS:
        raise ValueError(f"joint assignment capped at {MAX_JOINT_ATOMS} atoms, got {S * m}")
    sa = np.repeat(slice_coordinates(S), m)
    sb = np.repeat(slice_coordinates(b.shape[0]), b.shape[1])
    C = _sqdist(a.reshape(-1, p), b.reshape(-1, p)) + (sa[:, None] - sb[None, :]) ** 2
    perm = _assign(C)
    return math.sqrt(float(np.mean(C[np.arange(S * m), perm])))


def displacement(mu, nu, t: float):
    """McCann interpolation along the optimal per-slice matching."""
    a, b = _theta(mu), _theta(nu)
    _, plan = cot_distance(a, b)
    matched = np.take_along_axis(b, plan.perms[:, :, None], axis=1)
    out = (1.0 - t) * a + t * matched
    return mu.with_theta(out) if isinstance(mu, ParameterMeasure) else out


def _velocity_at(velocity, theta):
    return velocity(theta) if callable(velocity) else np.asarray(velocity, dtype=float)


def tangent_approximation_residual(mu, velocity, h: float, substeps: int = 16) -> float:
    """d(push(mu, h v), mu_h) / |h|.

    ``velocity`` is either a fixed per-particle array (the curve is then the
    straight translation theta + t v) or a callable ``theta -> v`` that is
    re-evaluated along the curve.  ``mu_h`` integrates the curve over [0, h]
    with ``substeps`` explicit micro-steps.
    """
    if h == 0:
        raise ValueError("h must be non-zero")
    a = _theta(mu)
    pushed = a + h * _velocity_at(velocity, a)
    cur = a.copy()
    dt = h / substeps
    for _ in range(substeps):
        cur = cur + dt * _velocity_at(velocity, cur)
    dist, _ = cot_distance(pushed, cur)
    return dist / abs(h)


@dataclass(frozen=True)
class DerivativeReport:
    times: np.ndarray
    finite_difference: np.ndarray
    pairing: np.ndarray
    max_rel_discrepancy: float


def distance_derivative_check(curve: Sequence, reference, velocities: Sequence,
                              dt: float) -> DerivativeReport:
    """Compare d/dt d(mu_t, ref)^2 by central differences with 2 <omega - omega', v_t>.

    ``curve`` holds measures at equally spaced times ``dt`` apart and
    ``velocities`` the particle velocities logged at those times.  The pairing
    is averaged under the optimal plan at the central time.
    """
    thetas = [_theta(c) for c in curve]
    ref = _theta(reference)
    if len(thetas) < 3:
        raise ValueError("need at least three curve points")
    if len(velocities) != len(thetas):
        raise ValueError("one velocity per curve point is required")
    sq = np.array([cot_distance(t, ref)[0] ** 2 for t in thetas])
    fd, pair, times = [], [], []
    for n in range(1, len(thetas) - 1):
        fd.append((sq[n + 1] - sq[n - 1]) / (2.0 * dt))
        _, plan = cot_distance(thetas[n], ref)
        matched = np.take_along_axis(ref, plan.perms[:, :, None], axis=1)
        v = np.asarray(velocities[n], dtype=float)
        pair.append(2.0 * float(np.mean(np.sum((thetas[n] - matched) * v, axis=-1))))
        times.append(n * dt)
    fd, pair = np.array(fd), np.array(pair)
    scale = np.maximum(np.maximum(np.abs(fd), np.abs(pair)), 1e-300)
    disc = np.where(np.maximum(np.abs(fd), np.abs(pair)) == 0.0, 0.0, np.abs(fd - pair) / scale)
    return DerivativeReport(np.array(times), fd, pair, float(np.max(disc)))


def perturb(mu, scale: float, rng: np.random.Generator, direction: np.ndarray | None = None):
    """Shift every particle along a random direction of L2(mu) norm ``scale``.

    The identity coupling gives d(mu, result) <= scale.
    """
    a = _theta(mu)
    v = rng.standard_normal(a.shape) if direction is None else np.asarray(direction, float)
    norm = math.sqrt(float(np.mean(np.sum(v * v, axis=-1))))
    out = a + (scale / norm) * v if norm > 0 else a.copy()
    return mu.with_theta(out) if isinstance(mu, ParameterMeasure) else out


VelocityField = Callable[[np.ndarray], np.ndarray]

__all__ = [
    "CouplingPlan", "DerivativeReport", "Sinkhorn", "cot_distance", "diagonal_cost",
    "displacement", "distance_derivative_check", "perturb", "same_measure",
    "sinkhorn_plan", "slice_coordinates", "tangent_approximation_residual",
    "wasserstein_lower_bound",
]
