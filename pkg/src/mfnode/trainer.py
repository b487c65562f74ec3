"""Gradient flow of the risk in the conditional OT geometry, integrated on particles.

Every particle keeps its depth slice and moves with velocity -grad L[mu]
(explicit Euler in optimization time).  The loop logs loss, squared gradient
norm, energy, lambda_0, the energy-dissipation residual, support radius and
distance to the initialization.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .cot import cot_distance, perturb
from .flow import FlowError, GradientField, gradient
from .kernels import lambda0 as lambda0_of
from .model import ParameterMeasure, energy

log = logging.getLogger(__name__)

MONITORS = frozenset({"loss", "grad_norm", "energy", "lambda0", "ede", "support_radius"})
LOSS_TOL = 1e-10
GRAD_TOL = 1e-12
DIVERGENCE_FACTOR = 1e6


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, log_: "TrajectoryLog", **diagnostic):
        super().__init__(message)
        self.log = log_
        self.diagnostic = {"error": message, **diagnostic}


@dataclass(frozen=True)
class TrainerConfig:
    eta0: float = 1e-2
    t_max: float = 1.0
    adaptive: bool = True
    monitors: frozenset = MONITORS
    checkpoint_every: int = 0
    distance_every: int = 0
    max_steps: int = 1_000_000
    seed: int = 0

    def __post_init__(self):
        if not self.eta0 > 0:
            raise ValueError("eta0 must be positive")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")
        unknown = set(self.monitors) - MONITORS
        if unknown:
            raise ValueError(f"unknown monitors {sorted(unknown)}")
        object.__setattr__(self, "monitors", frozenset(self.monitors))


@dataclass
class StepRecord:
    step: int
    t: float
    eta: float
    loss: float
    grad_norm_sq: float
    energy: float | None = None
    lambda0: float | None = None
    ede_residual: float | None = None
    support_radius: float | None = None
    dist_init: float | None = None  # identity-coupling distance, an upper bound on d
    dist_init_exact: float | None = None


@dataclass
class TrajectoryLog:
    records: list[StepRecord] = field(default_factory=list)
    status: str = "running"

    def append(self, rec: StepRecord) -> None:
        if self.records and not rec.t > self.records[-1].t:
            raise ValueError("log times must be strictly increasing")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) if getattr(r, name) is not None else np.nan
                         for r in self.records], dtype=float)

    @property
    def steps(self) -> int:
        return max(len(self.records) - 1, 0)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r)) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "TrajectoryLog":
        out = cls(status="loaded")
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    out.records.append(StepRecord(**json.loads(line)))
        return out

    def to_csv(self, path: str | Path) -> None:
        names = list(StepRecord.__dataclass_fields__)
        with open(path, "w") as fh:
            fh.write(",".join(names) + "\n")
            for r in self.records:
                fh.write(",".join("" if getattr(r, n) is None else repr(getattr(r, n))
                                  for n in names) + "\n")


def step(mu: ParameterMeasure, data, eta: float, field_: GradientField | None = None) -> ParameterMeasure:
    """One explicit Euler step of the particle system: theta <- theta - eta g."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    g = (field_ or gradient(mu, data)).g
    new = mu.theta - eta * g
    if not np.all(np.isfinite(new)):
        raise FlowError("non-finite particle update", eta=eta)
    return mu.with_theta(new)


def gradient_velocity(data, template: ParameterMeasure):
    """theta -> -grad L[mu_theta], for use as a velocity field."""
    def velocity(theta):
        return -gradient(template.with_theta(theta), data).g
    return velocity


def _identity_distance(a: np.ndarray, b: np.ndarray) -> float:
    diff = a - b
    return math.sqrt(float(np.mean(np.sum(diff * diff, axis=-1))))


class _Recorder:
    def __init__(self, mu0, data, config, sink):
        self.mu0 = mu0
        self.data = data
        self.config = config
        self.sink = sink
        self.log = TrajectoryLog()
        self.L0 = None
        self.dissipated = 0.0
        self.prev_gn = None
        self.prev_t = 0.0

    def record(self, n, t, eta, mu, gf):
        cfg = self.config
        mon = cfg.monitors
        if self.L0 is None:
            self.L0 = gf.risk
        if self.prev_gn is not None:
            self.dissipated += 0.5 * (t - self.prev_t) * (self.prev_gn + gf.norm_sq)
        self.prev_gn, self.prev_t = gf.norm_sq, t
        rec = StepRecord(step=n, t=t, eta=eta, loss=gf.risk, grad_norm_sq=gf.norm_sq)
        if "energy" in mon:
            rec.energy = energy(mu)
        if "lambda0" in mon:
            rec.lambda0 = lambda0_of(mu, gf.flow)
        if "ede" in mon:
            rec.ede_residual = (abs(self.L0 - gf.risk - self.dissipated) / self.L0
                                if self.L0 > 0 else 0.0)
        if "support_radius" in mon:
            rec.support_radius = float(np.max(np.linalg.norm(mu.theta, axis=-1)))
        rec.dist_init = _identity_distance(mu.theta, self.mu0.theta)
        if cfg.distance_every and n % cfg.distance_every == 0:
            rec.dist_init_exact = cot_distance(mu, self.mu0)[0]
        self.log.append(rec)
        if self.sink is not None:
            self.sink.write(json.dumps(asdict(rec)) + "\n")
            self.sink.flush()
        return rec


def train(mu0: ParameterMeasure, data, config: TrainerConfig | None = None, *,
          jsonl_path: str | Path | None = None,
          checkpoint_dir: str | Path | None = None,
          keep_velocities: bool = False):
    """Run the particle gradient flow; returns ``(mu_final, TrajectoryLog)``.

    Adaptive rule: a step that increases the loss is rejected and eta halves;
    after 10 consecutive accepted steps eta grows by 1.1 (capped at eta0).
    Stops at ``t_max``, loss < 1e-10 or gradient norm < 1e-12.  A loss above
    1e6 L0 raises :class:`TrainingDiverged` carrying the log so far.
    With ``keep_velocities`` the log gains ``thetas`` and ``velocities`` lists.
    """
    config = config or TrainerConfig()
    sink = open(jsonl_path, "w") if jsonl_path is not None else None
    try:
        return _train(mu0, data, config, sink, checkpoint_dir, keep_velocities)
    finally:
        if sink is not None:
            sink.close()


def _train(mu0, data, config, sink, checkpoint_dir, keep_velocities):
    rec = _Recorder(mu0, data, config, sink)
    mu = mu0
    gf = gradient(mu, data)
    eta = config.eta0
    t = 0.0
    n = 0
    rec.record(n, t, 0.0, mu, gf)
    L0 = gf.risk
    if keep_velocities:
        rec.log.thetas = [mu.theta]
        rec.log.velocities = [-gf.g]
    clean = 0
    status = "t_max"
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    while True:
        if gf.risk < LOSS_TOL:
            status = "loss_tol"
            break
        if math.sqrt(gf.norm_sq) < GRAD_TOL:
            status = "grad_tol"
            break
        if t >= config.t_max * (1.0 - 1e-12):
            status = "t_max"
            break
        if n >= config.max_steps:
            status = "max_steps"
            break
        h = min(eta, config.t_max - t)
        trial = step(mu, data, h, gf)
        try:
            gf_new = gradient(trial, data)
        except FlowError:
            if not config.adaptive:
                raise
            eta *= 0.5
            clean = 0
            continue
        if gf_new.risk > DIVERGENCE_FACTOR * L0:
            rec.log.status = "diverged"
            raise TrainingDiverged("loss exceeded 1e6 times the initial risk", rec.log,
                                   step=n + 1, t=t + h, loss=gf_new.risk, initial_loss=L0)
        if config.adaptive and gf_new.risk > gf.risk:
            eta *= 0.5
            clean = 0
            if eta < 1e-300:
                raise TrainingDiverged("step size underflow", rec.log, step=n, t=t)
            continue
        mu, gf = trial, gf_new
        t += h
        n += 1
        rec.record(n, t, h, mu, gf)
        if keep_velocities:
            rec.log.thetas.append(mu.theta)
            rec.log.velocities.append(-gf.g)
        if checkpoint_dir is not None and config.checkpoint_every and n % config.checkpoint_every == 0:
            mu.save(Path(checkpoint_dir) / f"step_{n:08d}.ckpt")
        if config.adaptive:
            clean += 1
            if clean >= 10:
                eta = min(eta * 1.1, config.eta0)
                clean = 0
    rec.log.status = status
    log.info("training stopped (%s) after %d steps at t=%.4g, loss=%.3e", status, n, t, gf.risk)
    return mu, rec.log


# --------------------------------------------------------------------------
# Post-hoc checks on trajectories
# --------------------------------------------------------------------------


def fit_growth_constant(times, values, tol: float = 1e-12, c_max: float = 1e6) -> float:
    """Smallest C >= 0 with values(t) <= e^{Ct} (values(0) + C t) for all t."""
    t = np.asarray(times, float)
    v = np.asarray(values, float)
    v0 = v[0]
    if not np.all(np.isfinite(v)):
        return math.inf

    def ok(c):
        with np.errstate(over="ignore", invalid="ignore"):
            return bool(np.all(v <= np.exp(c * t) * (v0 + c * t) * (1 + tol) + tol))

    if ok(0.0):
        return 0.0
    if not ok(c_max):
        return math.inf
    lo, hi = 0.0, 1.0
    while not ok(hi):
        lo, hi = hi, hi * 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-12 * hi:
            break
    return hi


def energy_constant(log_: TrajectoryLog) -> float:
    """Fitted constant for both the energy and the support-radius envelopes."""
    t = log_.column("t")
    c_e = fit_growth_constant(t, log_.column("energy"))
    c_r = fit_growth_constant(t, log_.column("support_radius"))
    return max(c_e, c_r)


def energy_monitor_check(log_: TrajectoryLog) -> bool:
    if not log_.records or log_.records[0].energy is None or log_.records[0].support_radius is None:
        raise ValueError("energy and support_radius monitors must be enabled")
    return math.isfinite(energy_constant(log_))


def ede_residual(log_: TrajectoryLog) -> float:
    """|L(t_0) - L(t_n) - int ||grad L||^2 dt| / L(t_0), trapezoid over the log."""
    t, L, g = log_.column("t"), log_.column("loss"), log_.column("grad_norm_sq")
    if L[0] == 0:
        return 0.0
    dissipated = float(np.sum(0.5 * np.diff(t) * (g[1:] + g[:-1])))
    return abs(L[0] - L[-1] - dissipated) / L[0]


def pl_rate(log_: TrajectoryLog, loss_floor: float = 0.0) -> float:
    """min ||grad L||^2 / L over logged steps with L > loss_floor."""
    L, g = log_.column("loss"), log_.column("grad_norm_sq")
    keep = L > loss_floor
    return float(np.min(g[keep] / L[keep]))


@dataclass(frozen=True)
class StabilityReport:
    scales: tuple[float, ...]
    ratios: tuple[float, ...]
    initial_distances: tuple[float, ...]
    final_distances: tuple[float, ...]
    identical_when_unperturbed: bool | None


def _fixed_run(mu, data, eta, T):
    cfg = TrainerConfig(eta0=eta, t_max=T, adaptive=False,
                        monitors=frozenset({"loss", "grad_norm"}))
    return train(mu, data, cfg)


def stability_experiment(mu0: ParameterMeasure, scales: Iterable[float], data, T: float, *,
                         eta: float = 1e-2, n_directions: int = 1, seed: int = 0) -> StabilityReport:
    """Co-train mu0 and perturbations of it; ratios d(mu_T, mu_T') / d(mu_0, mu_0').

    The same random directions are used for every scale.  A zero scale checks
    that re-running from identical inputs reproduces the trajectory exactly.
    """
    scales = tuple(float(s) for s in scales)
    if any(s < 0 for s in scales):
        raise ValueError("scales must be non-negative")
    base_T, base_log = _fixed_run(mu0, data, eta, T)
    rng = np.random.default_rng(seed)
    directions = [rng.standard_normal(mu0.theta.shape) for _ in range(n_directions)]
    ratios, d0s, dTs = [], [], []
    identical = None
    for eps in scales:
        if eps == 0.0:
            again_T, again_log = _fixed_run(mu0, data, eta, T)
            identical = (again_T == base_T and
                         [asdict(r) for r in again_log.records] == [asdict(r) for r in base_log.records])
            ratios.append(0.0)
            d0s.append(0.0)
            dTs.append(cot_distance(again_T, base_T)[0])
            continue
        best = (-1.0, 0.0, 0.0)
        for v in directions:
            mu0p = perturb(mu0, eps, rng, direction=v)
            d0 = cot_distance(mu0, mu0p)[0]
            muTp, _ = _fixed_run(mu0p, data, eta, T)
            dT = cot_distance(base_T, muTp)[0]
            ratio = dT / d0
            if ratio > best[0]:
                best = (ratio, d0, dT)
        ratios.append(best[0])
        d0s.append(best[1])
        dTs.append(best[2])
    return StabilityReport(scales, tuple(ratios), tuple(d0s), tuple(dTs), identical)


__all__ = [
    "MONITORS", "StabilityReport", "StepRecord", "TrainerConfig", "TrainingDiverged",
    "TrajectoryLog", "ede_residual", "energy_constant", "energy_monitor_check",
    "fit_growth_constant", "gradient_velocity", "pl_rate", "stability_experiment", "step", "train",
]
