"""Empirical local Polyak-Lojasiewicz certificates and the alpha search.

The certificate measures lambda_0 at the initialization, probes a ball of
measures around it to find a radius R on which lambda_0 stays above half its
value, and measures the adjoint amplification constant C.  With

    m = 2 alpha^2 exp(-C) lambda_0 / N

it passes when L(mu_0) < m R^2 / 4.  All constants are measured, so the
result is labelled "empirical"; it is not a proof.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .cot import perturb
from .flow import FlowError, adjoint, forward, risk
from .kernels import lambda0 as lambda0_of
from .model import Dataset, LiftedProblem, ParameterMeasure, pairwise_separation

SCHEMA_VERSION = 1
N_DIRECTIONS = 32
RADII = tuple(float(r) for r in np.geomspace(1e-3, 1.0, 6))


class CertificationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Certificate:
    lambda0: float
    pl_constant: float
    radius: float
    initial_risk: float
    condition_lhs: float
    condition_rhs: float
    surrogate_C: float
    alpha: float
    N: int
    passed: bool
    reason: str = ""
    cubic_form_rhs: float = 0.0  # N^-3 lambda_0^3 with the unknown constant set to 1
    cubic_form_passed: bool = False
    label: str = "empirical"
    probe_min_lambda0: tuple[float, ...] = ()
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> str:
        out = asdict(self)
        out["schema_version"] = SCHEMA_VERSION
        return json.dumps(out, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Certificate":
        raw = json.loads(text)
        version = raw.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported certificate schema {version!r}")
        raw["probe_min_lambda0"] = tuple(raw["probe_min_lambda0"])
        return cls(**raw)

    def table(self) -> str:
        rows = [
            ("label", self.label),
            ("passed", str(self.passed) + (f" ({self.reason})" if self.reason else "")),
            ("lambda0", f"{self.lambda0:.6g}"),
            ("surrogate C", f"{self.surrogate_C:.6g}"),
            ("alpha", f"{self.alpha:.6g}"),
            ("P-L constant m", f"{self.pl_constant:.6g}"),
            ("radius R", f"{self.radius:.6g}"),
            ("L(mu0)", f"{self.initial_risk:.6g}"),
            ("m R^2 / 4", f"{self.condition_rhs:.6g}"),
            ("N^-3 lambda0^3", f"{self.cubic_form_rhs:.6g} (scaling only)"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def separation(dataset) -> float:
    """Exact minimum pairwise distance between the inputs."""
    xs = dataset.xs if isinstance(dataset, Dataset) else getattr(dataset, "base", dataset)
    xs = xs.xs if isinstance(xs, Dataset) else np.asarray(xs, float)
    if xs.shape[0] < 2:
        raise ValueError("separation needs N >= 2")
    return pairwise_separation(xs)


def _alpha_of(data) -> float:
    return data.alpha if isinstance(data, LiftedProblem) else 1.0


def amplification(mu: ParameterMeasure, data) -> float:
    """max over samples and grid nodes of log(|p(1)|^2 / |p(s)|^2), clipped at 0.

    Samples whose terminal co-state vanishes carry no loss and are skipped.
    """
    flow = forward(mu, data)
    ps = adjoint(mu, flow, data).ps
    sq = np.sum(ps * ps, axis=-1)  # (N, S+1)
    term = sq[:, -1]
    live = term > 0
    if not np.any(live):
        return 0.0
    sq = sq[live]
    if np.any(sq <= 0):
        return math.inf
    return max(0.0, float(np.max(np.log(term[live][:, None] / sq))))


def _probe(mu0, data, r, direction):
    mu = perturb(mu0, r, np.random.default_rng(0), direction=direction)
    try:
        lam = lambda0_of(mu, forward(mu, data))
        c = amplification(mu, data)
    except FlowError:
        return 0.0, math.inf
    return lam, c


def probe_radius(mu0: ParameterMeasure, data, lam0: float, *, n_directions: int = N_DIRECTIONS,
                 radii=RADII, seed: int = 0, threads: int = 1):
    """Largest probed radius on which every probe keeps lambda_0 >= lam0 / 2.

    Returns ``(R, min_lambda_per_radius, C_per_radius)``.  Probe directions
    are drawn once from ``seed`` and reused for every radius.
    """
    rng = np.random.default_rng(seed)
    dirs = [rng.standard_normal(mu0.theta.shape) for _ in range(n_directions)]
    jobs = [(r, v) for r in radii for v in dirs]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda job: _probe(mu0, data, *job), jobs))
    else:
        results = [_probe(mu0, data, *job) for job in jobs]
    lam = np.array([x[0] for x in results]).reshape(len(radii), n_directions)
    cs = np.array([x[1] for x in results]).reshape(len(radii), n_directions)
    min_lam = lam.min(axis=1)
    max_c = cs.max(axis=1)
    R = 0.0
    for r, lo in zip(radii, min_lam):
        if lo >= 0.5 * lam0:
            R = float(r)
        else:
            break
    return R, tuple(float(x) for x in min_lam), tuple(float(x) for x in max_c)


def certify(mu0: ParameterMeasure, data, *, n_directions: int = N_DIRECTIONS, radii=RADII,
            seed: int = 0, threads: int = 1) -> Certificate:
    """Empirical P-L certificate for training ``mu0`` on ``data`` (Dataset or LiftedProblem)."""
    flow = forward(mu0, data)
    L0 = risk(flow, data)
    lam0 = lambda0_of(mu0, flow)
    N = data.N
    alpha = _alpha_of(data)
    provenance = {
        "measure_seed": mu0.seed, "probe_seed": seed, "S": mu0.S, "m": mu0.m, "dim": mu0.dim,
        "activation": mu0.activation, "alpha": alpha, "N": N,
        "n_directions": n_directions, "radii": list(radii),
        "separation": float(data.separation) if N >= 2 else None,
    }
    cubic_rhs = float(lam0 ** 3 / N ** 3)
    if lam0 <= 0.0:
        return Certificate(lam0, 0.0, 0.0, L0, L0, 0.0, math.inf, alpha, N, False,
                           "lambda0 = 0", cubic_rhs, L0 < cubic_rhs, provenance=provenance)
    R, min_lam, cs = probe_radius(mu0, data, lam0, n_directions=n_directions, radii=radii,
                                  seed=seed, threads=threads)
    C = amplification(mu0, data)
    for r, c in zip(radii, cs):
        if r <= R:
            C = max(C, c)
    m = 2.0 * alpha ** 2 * math.exp(-C) * lam0 / N
    rhs = m * R * R / 4.0
    passed = L0 < rhs
    reason = "" if passed else ("no probed radius keeps lambda0 >= lambda0/2" if R == 0.0
                                else "L0 >= m R^2 / 4")
    return Certificate(lam0, m, R, L0, L0, rhs, C, alpha, N, passed, reason,
                       cubic_rhs, L0 < cubic_rhs, "empirical", min_lam, provenance)


def select_alpha(lifted: LiftedProblem, mu0: ParameterMeasure, budget: int = 20,
                 **certify_kwargs) -> tuple[float, Certificate]:
    """Double alpha from 1 until :func:`certify` passes on the lifted problem.

    Raises :class:`CertificationError` when lambda_0 = 0 (no alpha can help)
    or after ``budget`` doublings.
    """
    alpha = 1.0
    for _ in range(budget + 1):
        cert = certify(mu0, lifted.with_alpha(alpha), **certify_kwargs)
        if cert.lambda0 <= 0.0:
            raise CertificationError("lambda0 = 0: the condition fails for every alpha")
        if cert.passed:
            return alpha, cert
        alpha *= 2.0
    raise CertificationError(f"no passing alpha within {budget} doublings")


def kernel_lower_bounds(dataset, family: dict) -> float:
    """Scaling of the lambda_min lower bound in the separation delta, constant set to 1.

    ``{"kind": "sobolev", "nu": .}`` gives delta^(2 nu - d) and
    ``{"kind": "gaussian"}`` gives delta^-d exp(-delta^-2).  Scaling only:
    never used to gate a certificate.
    """
    if isinstance(dataset, (int, float)):
        delta, d = float(dataset), int(family.get("dim", 1))
    else:
        base = dataset.base if isinstance(dataset, LiftedProblem) else dataset
        delta, d = separation(base), base.d
    if delta <= 0.0:
        raise ValueError("separation is zero")
    kind = family["kind"]
    if kind == "sobolev":
        return float(delta ** (2.0 * float(family["nu"]) - d))
    if kind == "gaussian":
        return float(delta ** (-d) * math.exp(-delta ** -2))
    raise ValueError(f"unknown family {kind!r}")


__all__ = [
    "Certificate", "CertificationError", "RADII", "SCHEMA_VERSION", "amplification",
    "certify", "kernel_lower_bounds", "probe_radius", "select_alpha", "separation",
]
