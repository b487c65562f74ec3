"""Feature kernels k1, K = k1 I + K2 and their matrices on point clouds.

For a slice with particles (u_j, w_j, b_j) and activation sigma:

    k1(x, y)  = (1/m) sum_j sigma(w_j.x + b_j) sigma(w_j.y + b_j)
    K2(x, y)  = (1/m) sum_j sigma'(w_j.x + b_j) sigma'(w_j.y + b_j) (x.y + 1) u_j u_j^T

With cos activation, b ~ U[0, pi] and w ~ mu_w, k1 is the translation
invariant kernel 1/2 * E cos(w.(x - y)); the closed forms below keep that 1/2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import integrate, special

from .flow import AdjointState, FlowState
from .model import ParameterMeasure, get_activation, split_particles

# relative eigenvalue floor below which a kernel matrix counts as singular
SINGULAR_RTOL = 1e-12


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelMatrix:
    kind: str  # "scalar" (N x N) or "full" (N*D x N*D)
    entries: np.ndarray
    lambda_min: float
    lambda_max: float

    @property
    def is_psd(self) -> bool:
        return self.lambda_min >= -1e-10 * max(self.lambda_max, 0.0)


def summarize(entries: np.ndarray, kind: str) -> KernelMatrix:
    A = 0.5 * (entries + entries.T)
    eig = np.linalg.eigvalsh(A)
    A.setflags(write=False)
    return KernelMatrix(kind, A, float(eig[0]), float(eig[-1]))


def _unpack(particles, points, activation):
    theta = np.asarray(particles, dtype=float)
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    dim = X.shape[1]
    if theta.ndim == 1:
        theta = theta[None, :]
    if theta.shape[-1] == dim + 1:
        # (w, b) pairs only: outer weights do not enter k1
        w, b = theta[:, :dim], theta[:, dim]
        u = np.zeros((theta.shape[0], dim))
    else:
        u, w, b = split_particles(theta, dim)
    return u, w, b, X, get_activation(activation)


def k1_matrix(particles, points, activation="cos") -> KernelMatrix:
    """N x N matrix of k1 on ``points`` for one slice of particles."""
    _, w, b, X, sigma = _unpack(particles, points, activation)
    act = sigma(X @ w.T + b)
    return summarize(act @ act.T / w.shape[0], "scalar")


def k2_blocks(particles, points, activation="cos") -> np.ndarray:
    """K2 as an (N, N, D, D) block array."""
    u, w, b, X, sigma = _unpack(particles, points, activation)
    ds = sigma.d1(X @ w.T + b)
    gram = X @ X.T + 1.0
    blocks = np.einsum("aj,cj,jd,je->acde", ds, ds, u, u) / w.shape[0]
    return blocks * gram[:, :, None, None]


def _blocks_to_matrix(blocks: np.ndarray) -> np.ndarray:
    N, _, D, _ = blocks.shape
    return blocks.transpose(0, 2, 1, 3).reshape(N * D, N * D)


def full_kernel_matrix(particles, points, activation="cos") -> KernelMatrix:
    """(N D) x (N D) matrix with blocks K(x^a, x^c) = k1 I_D + K2."""
    _, _, _, X, _ = _unpack(particles, points, activation)
    D = X.shape[1]
    k1 = k1_matrix(particles, points, activation).entries
    return summarize(np.kron(k1, np.eye(D)) + _blocks_to_matrix(k2_blocks(particles, points, activation)),
                     "full")


def k2_matrix(particles, points, activation="cos") -> KernelMatrix:
    return summarize(_blocks_to_matrix(k2_blocks(particles, points, activation)), "full")


def _clip_singular(lam_min: float, lam_max: float) -> float:
    return 0.0 if lam_min <= SINGULAR_RTOL * max(lam_max, 0.0) else lam_min


def slice_lambda_mins(mu: ParameterMeasure, flow: FlowState) -> np.ndarray:
    """lambda_min of the k1 matrix of each slice on the points x(s_k).

    Values below ``SINGULAR_RTOL * lambda_max`` are reported as exactly 0.
    """
    out = np.empty(mu.S)
    for k in range(mu.S):
        km = k1_matrix(mu.theta[k], flow.xs[:, k], mu.activation)
        out[k] = _clip_singular(km.lambda_min, km.lambda_max)
    return out


def lambda0(mu: ParameterMeasure, flow: FlowState) -> float:
    """Slice average of lambda_min(k1 matrix on the flowed points)."""
    return float(np.mean(slice_lambda_mins(mu, flow)))


def kernel_quadratic_form(mu: ParameterMeasure, flow: FlowState, adj: AdjointState) -> float:
    """(1/N^2) (1/S) sum_k <p, K[mu(.|s_k), x(s_k)] p> with the slice co-states."""
    N = flow.xs.shape[0]
    total = 0.0
    for k in range(mu.S):
        K = full_kernel_matrix(mu.theta[k], flow.xs[:, k], mu.activation).entries
        p = adj.costate(k).reshape(-1)
        total += float(p @ K @ p)
    return total / (N * N * mu.S)


# --------------------------------------------------------------------------
# Translation-invariant closed forms (cos activation, b ~ U[0, pi])
# --------------------------------------------------------------------------


def _pairwise_dist(points: np.ndarray) -> np.ndarray:
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    diff = X[:, None, :] - X[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def gaussian_kernel_value(r, rho: float):
    return 0.5 * np.exp(-0.5 * rho * rho * np.asarray(r, float) ** 2)


def _oscillatory_integral(f, period: float, rtol: float, n_head: int = 8,
                          n_chunks: int = 48) -> float:
    """int_0^inf f for an oscillating, slowly decaying f with half-period ``period``.

    The head [0, n_head * period] is integrated directly; the tail is split into
    half-periods whose partial sums are averaged repeatedly (an Euler-type
    transform), which cancels the alternating tail to high order.
    """
    head_end = n_head * period
    head, err = integrate.quad(f, 0.0, head_end, epsrel=rtol * 1e-2, epsabs=0.0, limit=500)
    edges = head_end + period * np.arange(n_chunks + 1)
    chunks = np.array([integrate.quad(f, a, b, epsrel=rtol * 1e-2, epsabs=0.0)[0]
                       for a, b in zip(edges[:-1], edges[1:])])
    if abs(chunks[-1]) > abs(chunks[0]):
        raise QuadratureError("integrand tail does not decay")
    partial = head + np.cumsum(chunks)
    prev = partial
    for _ in range(n_chunks // 2):
        prev, partial = partial, 0.5 * (partial[:-1] + partial[1:])
    value = float(partial[-1])
    spread = abs(value - float(prev[-1]))
    if not np.isfinite(value) or spread > rtol * max(abs(value), 1e-300):
        raise QuadratureError(f"oscillatory tail did not settle (spread={spread:g})")
    return value


def matern_kernel_value(r: float, nu: float, dim: int, rtol: float = 1e-8) -> float:
    """1/2 * normalized inverse Fourier transform of (1 + |w|^2)^-nu at radius r.

    Radial Hankel form: the d-dimensional transform of a radial density f is
    (2 pi)^{d/2} r^{1-d/2} int_0^inf f(t) J_{d/2-1}(r t) t^{d/2} dt, normalized
    by int f = |S^{d-1}| int_0^inf f(t) t^{d-1} dt.  The normalization uses
    adaptive Gauss-Kronrod; the oscillatory Hankel integral is summed over
    half-periods with an accelerated tail.
    """
    if nu <= dim / 2.0:
        raise ValueError(f"(1+|w|^2)^-nu is not integrable for nu <= d/2 = {dim / 2}")
    dens = lambda t: (1.0 + t * t) ** (-nu)
    mass, err = integrate.quad(lambda t: dens(t) * t ** (dim - 1), 0.0, np.inf,
                               epsrel=rtol, limit=500)
    if not np.isfinite(mass) or err > 1e3 * rtol * abs(mass):
        raise QuadratureError(f"normalization quadrature did not converge (err={err:g})")
    sphere = 2.0 * math.pi ** (dim / 2.0) / special.gamma(dim / 2.0)
    mass *= sphere
    if r == 0.0:
        return 0.5
    order = dim / 2.0 - 1.0
    val = _oscillatory_integral(lambda t: dens(t) * special.jv(order, r * t) * t ** (dim / 2.0),
                                math.pi / r, rtol)
    ft = (2.0 * math.pi) ** (dim / 2.0) * r ** (1.0 - dim / 2.0) * val
    return 0.5 * ft / mass


def fourier_kernel(points, spectral: Mapping) -> KernelMatrix:
    """Closed-form k1 matrix for ``{"kind": "gaussian", "rho": .}`` or ``{"kind": "matern", "nu": .}``."""
    R = _pairwise_dist(points)
    kind = spectral["kind"]
    if kind == "gaussian":
        return summarize(gaussian_kernel_value(R, float(spectral.get("rho", 1.0))), "scalar")
    if kind == "matern":
        dim = np.atleast_2d(np.asarray(points, float)).shape[1] if np.ndim(points) > 1 else 1
        nu = float(spectral["nu"])
        cache: dict[float, float] = {}
        A = np.empty_like(R)
        for idx, r in np.ndenumerate(R):
            key = float(r)
            if key not in cache:
                cache[key] = matern_kernel_value(key, nu, dim)
            A[idx] = cache[key]
        return summarize(A, "scalar")
    raise ValueError(f"unknown spectral family {kind!r}")


__all__ = [
    "KernelMatrix", "QuadratureError", "SINGULAR_RTOL", "fourier_kernel", "full_kernel_matrix",
    "gaussian_kernel_value", "k1_matrix", "k2_blocks", "k2_matrix", "kernel_quadratic_form",
    "lambda0", "matern_kernel_value", "slice_lambda_mins", "summarize",
]
