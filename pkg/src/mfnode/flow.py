"""Forward NODE integration, discrete adjoint, resolvent and the adjoint gradient.

The depth interval [0, 1] is cut into S slices of width h = 1/S.  On slice k
the velocity field is F_k(x) = (1/m) sum_j u_j sigma(w_j.x + b_j), evaluated
with the particles of that slice (left-endpoint convention).

The adjoint is the exact transpose of the explicit Euler recursion, so the
gradient returned by :func:`gradient` is the exact derivative of the
discrete risk.  Because the Euler step of slice k maps x_k to x_{k+1}, the
co-state that multiplies the parameters of slice k is p_{k+1}.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .model import ParameterMeasure, energy, split_particles

Scheme = Literal["euler", "rk4"]


class FlowError(RuntimeError):
    """Numerical failure during integration; ``diagnostic`` is JSON-serializable."""

    def __init__(self, message: str, **diagnostic):
        super().__init__(message)
        self.diagnostic = {"error": message, **diagnostic}


@dataclass(frozen=True)
class FlowState:
    xs: np.ndarray  # (N, S+1, D)
    scheme: str = "euler"

    @property
    def S(self) -> int:
        return self.xs.shape[1] - 1

    @property
    def h(self) -> float:
        return 1.0 / self.S

    @property
    def final(self) -> np.ndarray:
        return self.xs[:, -1]

    def at(self, k: int) -> np.ndarray:
        return self.xs[:, k]


@dataclass(frozen=True)
class AdjointState:
    ps: np.ndarray  # (N, S+1, D)

    @property
    def terminal(self) -> np.ndarray:
        return self.ps[:, -1]

    def costate(self, k: int) -> np.ndarray:
        """Co-state paired with slice ``k`` (the one after its Euler step)."""
        return self.ps[:, k + 1]


@dataclass(frozen=True)
class Resolvent:
    Phi: np.ndarray  # (S+1, D, D)
    cond: np.ndarray  # (S+1,)


@dataclass(frozen=True)
class GradientField:
    g: np.ndarray  # (S, m, 2D+1), L2(mu) gradient at every particle
    norm_sq: float
    risk: float = float("nan")
    flow: FlowState | None = field(default=None, repr=False)
    adjoint: AdjointState | None = field(default=None, repr=False)

    @property
    def u(self):
        return self.g[..., :self._dim]

    @property
    def wb(self):
        return self.g[..., self._dim:]

    @property
    def _dim(self) -> int:
        return (self.g.shape[-1] - 1) // 2


def _slice_velocity(theta_k, sigma, X, m):
    dim = X.shape[1]
    u, w, b = split_particles(theta_k, dim)
    return sigma(X @ w.T + b) @ u / m


def slice_jacobian(mu: ParameterMeasure, k: int, X: np.ndarray) -> np.ndarray:
    """D_x F_k at each row of X, shape (N, D, D)."""
    u, w, b = split_particles(mu.theta[k], mu.dim)
    ds = mu.sigma.d1(X @ w.T + b)
    return np.einsum("nj,jd,je->nde", ds, u, w) / mu.m


def _check_finite(X, k):
    bad = ~np.all(np.isfinite(X), axis=1)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise FlowError("non-finite state during forward integration",
                        sample=i, slice=int(k))


def growth_bound(mu: ParameterMeasure, x0: np.ndarray) -> np.ndarray:
    """exp(M(1+E_2)) (|x0| + M(1+E_2)) for each initial point."""
    c = mu.sigma.bound * (1.0 + energy(mu))
    return np.exp(c) * (np.linalg.norm(x0, axis=-1) + c)


def forward(mu: ParameterMeasure, data, scheme: Scheme = "euler",
            check_growth: bool = True) -> FlowState:
    """Integrate every input of ``data`` (Dataset or LiftedProblem) through the NODE."""
    X = np.asarray(getattr(data, "inputs", data), dtype=float)
    if X.ndim != 2 or X.shape[1] != mu.dim:
        raise ValueError(f"inputs of dimension {X.shape[-1]} do not match measure dimension {mu.dim}")
    scheme = scheme.lower()
    if scheme not in ("euler", "rk4"):
        raise ValueError(f"unknown scheme {scheme!r}")
    S, m, sigma = mu.S, mu.m, mu.sigma
    h = 1.0 / S
    xs = np.empty((X.shape[0], S + 1, X.shape[1]))
    xs[:, 0] = X
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(S):
            th = mu.theta[k]
            x = xs[:, k]
            if scheme == "euler":
                nxt = x + h * _slice_velocity(th, sigma, x, m)
            else:
                k1 = _slice_velocity(th, sigma, x, m)
                k2 = _slice_velocity(th, sigma, x + 0.5 * h * k1, m)
                k3 = _slice_velocity(th, sigma, x + 0.5 * h * k2, m)
                k4 = _slice_velocity(th, sigma, x + h * k3, m)
                nxt = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            _check_finite(nxt, k)
            xs[:, k + 1] = nxt
    if check_growth:
        peak = np.max(np.linalg.norm(xs, axis=-1), axis=1)
        bound = growth_bound(mu, X)
        over = peak > bound * (1.0 + 1e-12)
        if np.any(over):
            i = int(np.argmax(over))
            raise FlowError("trajectory exceeds the flow growth bound", sample=i,
                            peak=float(peak[i]), bound=float(bound[i]))
    xs.setflags(write=False)
    return FlowState(xs, scheme)


def node_output(mu: ParameterMeasure, x, scheme: Scheme = "euler") -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, float))
    return forward(mu, x, scheme).final


def risk(flow: FlowState, data) -> float:
    """Empirical risk (1/N) sum_i loss(x^i(1), y^i)."""
    return float(np.mean(data.losses(flow.final)))


def adjoint(mu: ParameterMeasure, flow: FlowState, data) -> AdjointState:
    """Backward recursion p_k = p_{k+1} + h D_xF_k(x_k)^T p_{k+1}, p_S = grad loss."""
    if flow.scheme != "euler":
        raise ValueError("the discrete adjoint transposes the Euler scheme only")
    S, dim, m, sigma = mu.S, mu.dim, mu.m, mu.sigma
    h = 1.0 / S
    N = flow.xs.shape[0]
    ps = np.empty((N, S + 1, dim))
    ps[:, S] = data.loss_grad(flow.final)
    for k in range(S - 1, -1, -1):
        u, w, b = split_particles(mu.theta[k], dim)
        p = ps[:, k + 1]
        ds = sigma.d1(flow.xs[:, k] @ w.T + b)
        ps[:, k] = p + h * ((ds * (p @ u.T)) @ w) / m
    ps.setflags(write=False)
    return AdjointState(ps)


def resolvent(mu: ParameterMeasure, flow: FlowState, sample_index: int,
              max_cond: float = 1e12) -> Resolvent:
    """Phi_{k+1} = (I + h D_xF_k(x_k)) Phi_k with Phi_0 = I, for one sample."""
    S, dim = mu.S, mu.dim
    h = 1.0 / S
    Phi = np.empty((S + 1, dim, dim))
    Phi[0] = np.eye(dim)
    for k in range(S):
        J = slice_jacobian(mu, k, flow.xs[sample_index, k][None, :])[0]
        Phi[k + 1] = (np.eye(dim) + h * J) @ Phi[k]
    cond = np.linalg.cond(Phi)
    if np.any(~np.isfinite(cond) | (cond > max_cond)):
        k = int(np.argmax(np.where(np.isfinite(cond), cond, np.inf)))
        raise FlowError("resolvent is numerically singular", sample=int(sample_index),
                        slice=k, cond=float(cond[k]))
    return Resolvent(Phi, cond)


def adjoint_from_resolvent(res: Resolvent, terminal_grad: np.ndarray) -> np.ndarray:
    """p_k = Phi_k^{-T} Phi_S^T grad, for every grid node; shape (S+1, D)."""
    rhs = res.Phi[-1].T @ np.asarray(terminal_grad, float)
    return np.stack([np.linalg.solve(P.T, rhs) for P in res.Phi])


def gradient(mu: ParameterMeasure, data) -> GradientField:
    """L2(mu) gradient of the risk at every particle.

    g[k, j] = (1/N) sum_i D_omega phi(theta[k, j], x^i_k)^T p^i_{k+1}.  The
    Euclidean derivative of the discrete risk with respect to theta[k, j] is
    g[k, j] / (S m).
    """
    flow = forward(mu, data)
    adj = adjoint(mu, flow, data)
    S, dim, sigma = mu.S, mu.dim, mu.sigma
    N = flow.xs.shape[0]
    g = np.empty_like(mu.theta)
    for k in range(S):
        u, w, b = split_particles(mu.theta[k], dim)
        X = flow.xs[:, k]
        q = adj.costate(k)
        pre = X @ w.T + b
        act = sigma(pre)
        coef = sigma.d1(pre) * (q @ u.T)  # (N, m)
        g[k, :, :dim] = act.T @ q / N
        g[k, :, dim:2 * dim] = coef.T @ X / N
        g[k, :, 2 * dim] = coef.sum(axis=0) / N
    g.setflags(write=False)
    norm_sq = float(np.mean(np.sum(g * g, axis=-1)))
    return GradientField(g, norm_sq, risk(flow, data), flow, adj)


def grad_norm_sq(field_: GradientField) -> float:
    """||grad L[mu]||^2 in L2(mu): mean squared particle gradient."""
    return float(np.mean(np.sum(field_.g * field_.g, axis=-1)))


def risk_of(mu: ParameterMeasure, data, scheme: Scheme = "euler") -> float:
    return risk(forward(mu, data, scheme), data)


__all__ = [
    "AdjointState", "FlowError", "FlowState", "GradientField", "Resolvent",
    "adjoint", "adjoint_from_resolvent", "forward", "grad_norm_sq", "gradient",
    "growth_bound", "node_output", "resolvent", "risk", "risk_of", "slice_jacobian",
]
