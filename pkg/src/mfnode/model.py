"""Parameter measures, datasets, activations and the lifted problem.

A parameter measure on [0, 1] x Omega is stored as ``S`` uniform depth slices,
each holding ``m`` equally weighted particles.  Particles live in
Omega = R^D x R^D x R with the flat layout ``[u (D), w (D), b]``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy.special import erf

CHECKPOINT_VERSION = 1

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------------
# Activations
# --------------------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_d1(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def _gelu_d2(x):
    return _INV_SQRT2PI * np.exp(-0.5 * x * x) * (2.0 - x * x)


def _swish(x):
    return x * _sigmoid(x)


def _swish_d1(x):
    s = _sigmoid(x)
    return s + x * s * (1.0 - s)


def _swish_d2(x):
    s = _sigmoid(x)
    return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))


_TABLE: dict[str, tuple[Callable, Callable, Callable]] = {
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2,
             lambda x: -2.0 * np.tanh(x) * (1.0 - np.tanh(x) ** 2)),
    "gelu": (_gelu, _gelu_d1, _gelu_d2),
    "swish": (_swish, _swish_d1, _swish_d2),
    "cos": (np.cos, lambda x: -np.sin(x), lambda x: -np.cos(x)),
    "identity": (lambda x: np.asarray(x, dtype=float) * 1.0,
                 lambda x: np.ones_like(np.asarray(x, dtype=float)),
                 lambda x: np.zeros_like(np.asarray(x, dtype=float))),
}

ACTIVATIONS = tuple(_TABLE)


@dataclass(frozen=True)
class Activation:
    """Smooth scalar activation with its first two derivatives.

    ``bound`` is M = |sigma(0)| + sup |sigma'|, with the supremum taken by
    grid search over [-50, 50].
    """

    kind: str

    def __post_init__(self):
        if self.kind not in _TABLE:
            raise ValueError(f"unknown activation {self.kind!r}; expected one of {ACTIVATIONS}")

    def __call__(self, x):
        return _TABLE[self.kind][0](x)

    def d1(self, x):
        return _TABLE[self.kind][1](x)

    def d2(self, x):
        return _TABLE[self.kind][2](x)

    @cached_property
    def bound(self) -> float:
        grid = np.linspace(-50.0, 50.0, 200_001)
        return float(abs(self(np.array(0.0))) + np.max(np.abs(self.d1(grid))))

    @property
    def is_polynomial(self) -> bool:
        return self.kind == "identity"


@lru_cache(maxsize=None)
def _activation_by_name(name: str) -> Activation:
    return Activation(name)


def get_activation(activation: str | Activation) -> Activation:
    if isinstance(activation, Activation):
        return activation
    return _activation_by_name(activation.lower())


# --------------------------------------------------------------------------
# Particle layout helpers
# --------------------------------------------------------------------------


def param_dim(dim: int) -> int:
    """Size of one particle (u, w, b) for a state of dimension ``dim``."""
    return 2 * dim + 1


def split_particles(theta: np.ndarray, dim: int):
    """Views (u, w, b) on a ``(..., 2*dim+1)`` particle array."""
    return theta[..., :dim], theta[..., dim:2 * dim], theta[..., 2 * dim]


def join_particles(u, w, b) -> np.ndarray:
    b = np.asarray(b, dtype=float)[..., None]
    return np.concatenate([np.asarray(u, float), np.asarray(w, float), b], axis=-1)


# --------------------------------------------------------------------------
# ParameterMeasure
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ParameterMeasure:
    """Discretized measure: ``theta[k, j]`` is particle ``j`` of depth slice ``k``.

    Slice ``k`` covers s in [k/S, (k+1)/S); every particle has weight 1/(S*m).
    """

    theta: np.ndarray
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64, copy=True)
        if theta.ndim != 3:
            raise ValueError(f"theta must have shape (S, m, 2D+1), got {theta.shape}")
        if theta.shape[0] < 1 or theta.shape[1] < 1:
            raise ValueError("need S >= 1 and m >= 1")
        if theta.shape[2] % 2 != 1:
            raise ValueError(f"particle size must be odd (2D+1), got {theta.shape[2]}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta contains non-finite entries")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "activation", get_activation(self.activation).kind)
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def S(self) -> int:
        return self.theta.shape[0]

    @property
    def m(self) -> int:
        return self.theta.shape[1]

    @property
    def dim(self) -> int:
        return (self.theta.shape[2] - 1) // 2

    @property
    def sigma(self) -> Activation:
        return get_activation(self.activation)

    @property
    def u(self):
        return self.theta[..., :self.dim]

    @property
    def w(self):
        return self.theta[..., self.dim:2 * self.dim]

    @property
    def b(self):
        return self.theta[..., 2 * self.dim]

    def with_theta(self, theta: np.ndarray) -> "ParameterMeasure":
        return ParameterMeasure(theta, activation=self.activation, seed=self.seed)

    def __eq__(self, other):
        if not isinstance(other, ParameterMeasure):
            return NotImplemented
        return (self.activation == other.activation and self.seed == other.seed
                and self.theta.shape == other.theta.shape
                and np.array_equal(self.theta, other.theta))

    __hash__ = None

    # checkpoint I/O -------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = {
            "version": CHECKPOINT_VERSION,
            "S": self.S,
            "m": self.m,
            "d": self.dim,
            "activation": self.activation,
            "seed": self.seed,
        }
        payload = np.ascontiguousarray(self.theta, dtype="<f8").tobytes(order="C")
        return json.dumps(header, sort_keys=True).encode() + b"\n" + payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParameterMeasure":
        head, sep, payload = data.partition(b"\n")
        if not sep:
            raise ValueError("checkpoint has no header line")
        header = json.loads(head)
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
        S, m, d = int(header["S"]), int(header["m"]), int(header["d"])
        expected = S * m * param_dim(d) * 8
        if len(payload) != expected:
            raise ValueError(f"checkpoint payload has {len(payload)} bytes, expected {expected}")
        theta = np.frombuffer(payload, dtype="<f8").reshape(S, m, param_dim(d))
        return cls(theta, activation=header["activation"], seed=header["seed"])

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "ParameterMeasure":
        return cls.from_bytes(Path(path).read_bytes())


def energy(mu: ParameterMeasure | np.ndarray) -> float:
    """Second moment E_2: mean squared particle norm over all slices and particles."""
    theta = mu.theta if isinstance(mu, ParameterMeasure) else np.asarray(mu, float)
    return float(np.mean(np.sum(theta * theta, axis=-1)))


# --------------------------------------------------------------------------
# Datasets and the lifted problem
# --------------------------------------------------------------------------


def pairwise_separation(points: np.ndarray) -> float:
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if n < 2:
        raise ValueError("separation needs at least two points")
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    return float(np.min(dist[np.triu_indices(n, k=1)]))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Empirical data distribution with quadratic loss 1/2 ||x(1) - y||^2."""

    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        xs = np.array(self.xs, dtype=np.float64, copy=True)
        ys = np.array(self.ys, dtype=np.float64, copy=True)
        if xs.ndim == 1:
            xs = xs[:, None]
        if ys.ndim == 1:
            ys = ys[:, None]
        if xs.shape[0] != ys.shape[0] or xs.shape[0] < 1:
            raise ValueError("xs and ys must hold the same positive number of samples")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
            raise ValueError("dataset contains non-finite values")
        xs.setflags(write=False)
        ys.setflags(write=False)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @property
    def N(self) -> int:
        return self.xs.shape[0]

    @property
    def d(self) -> int:
        return self.xs.shape[1]

    @property
    def d_prime(self) -> int:
        return self.ys.shape[1]

    @cached_property
    def separation(self) -> float:
        return pairwise_separation(self.xs) if self.N >= 2 else math.inf

    # Loss interface shared with LiftedProblem ------------------------------

    @property
    def inputs(self) -> np.ndarray:
        return self.xs

    @property
    def state_dim(self) -> int:
        return self.d

    def losses(self, final: np.ndarray) -> np.ndarray:
        self._check_square()
        r = final - self.ys
        return 0.5 * np.sum(r * r, axis=-1)

    def loss_grad(self, final: np.ndarray) -> np.ndarray:
        self._check_square()
        return final - self.ys

    def _check_square(self):
        if self.d != self.d_prime:
            raise ValueError(
                f"quadratic loss on the raw state needs d == d' (got {self.d}, {self.d_prime}); "
                "use lift() for d != d'")

    # CSV -------------------------------------------------------------------

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x{i + 1}" for i in range(self.d)]
                        + [f"y{i + 1}" for i in range(self.d_prime)])
        for x, y in zip(self.xs, self.ys):
            writer.writerow([repr(float(v)) for v in x] + [repr(float(v)) for v in y])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path: str | Path, input_dim: int | None = None) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"{path}: empty CSV (a header row is required)")
        header, body = rows[0], rows[1:]
        if input_dim is None:
            input_dim = sum(1 for h in header if h.strip().lower().startswith("x"))
            if input_dim == 0:
                raise ValueError(f"{path}: cannot infer input columns from header {header}")
        try:
            data = np.array([[float(v) for v in row] for row in body if row], dtype=float)
        except ValueError as exc:
            raise ValueError(f"{path}: non-numeric value ({exc})") from None
        if data.ndim != 2 or data.shape[1] != len(header) or data.shape[1] <= input_dim:
            raise ValueError(f"{path}: expected {len(header)} columns with {input_dim} inputs")
        return cls(data[:, :input_dim], data[:, input_dim:])


@dataclass(frozen=True, eq=False)
class LiftedProblem:
    """Inputs embedded as z = A x in R^{d+d'}; loss 1/2 ||alpha B z - y||^2."""

    base: Dataset
    alpha: float

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        object.__setattr__(self, "alpha", float(self.alpha))

    @cached_property
    def A(self) -> np.ndarray:
        d, dp = self.base.d, self.base.d_prime
        return np.vstack([np.eye(d), np.zeros((dp, d))])

    @cached_property
    def B(self) -> np.ndarray:
        d, dp = self.base.d, self.base.d_prime
        return np.hstack([np.zeros((dp, d)), np.eye(dp)])

    @property
    def N(self) -> int:
        return self.base.N

    @property
    def ys(self) -> np.ndarray:
        return self.base.ys

    @property
    def state_dim(self) -> int:
        return self.base.d + self.base.d_prime

    @cached_property
    def inputs(self) -> np.ndarray:
        z = self.base.xs @ self.A.T
        z.setflags(write=False)
        return z

    @property
    def separation(self) -> float:
        return self.base.separation

    def with_alpha(self, alpha: float) -> "LiftedProblem":
        return LiftedProblem(self.base, alpha)

    def losses(self, final: np.ndarray) -> np.ndarray:
        r = self.alpha * final @ self.B.T - self.ys
        return 0.5 * np.sum(r * r, axis=-1)

    def loss_grad(self, final: np.ndarray) -> np.ndarray:
        r = self.alpha * final @ self.B.T - self.ys
        return self.alpha * r @ self.B


def lift(dataset: Dataset, alpha: float) -> LiftedProblem:
    return LiftedProblem(dataset, alpha)


def lifted_loss(z, y, alpha: float) -> float:
    """Scalar helper for a single pair: 1/2 ||alpha * (last d' coords of z) - y||^2."""
    z = np.atleast_1d(np.asarray(z, float))
    y = np.atleast_1d(np.asarray(y, float))
    r = alpha * z[z.shape[0] - y.shape[0]:] - y
    return 0.5 * float(r @ r)


# --------------------------------------------------------------------------
# Initialization
# --------------------------------------------------------------------------


FEATURE_KINDS = ("gaussian", "matern", "sphere_uniform", "grid")


def slice_rng(seed: int, slice_index: int) -> np.random.Generator:
    """Counter-based (Philox) stream keyed by ``(seed, slice)``.

    Particles of a slice are drawn in index order from this stream, so each
    draw is a pure function of ``(seed, slice, particle)``.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(slice_index)])
    return np.random.Generator(np.random.Philox(ss))


def _draw_bias(rng, m: int, activation: str) -> np.ndarray:
    if activation == "cos":
        return rng.uniform(0.0, math.pi, size=m)
    return rng.standard_normal(m)


def _draw_features(rng, m: int, dim: int, spec: Mapping, activation: str):
    kind = spec["kind"]
    if kind == "gaussian":
        rho = float(spec.get("rho", 1.0))
        if rho <= 0:
            raise ValueError("gaussian features need rho > 0")
        w = rho * rng.standard_normal((m, dim))
        return w, _draw_bias(rng, m, activation)
    if kind == "matern":
        nu = float(spec["nu"])
        dof = 2.0 * nu - dim
        if dof <= 0:
            raise ValueError(f"matern density (1+|w|^2)^-nu needs nu > dim/2 = {dim / 2}")
        # (1+|w|^2)^-nu is a multivariate Student-t with dof 2nu-dim and scale I/dof
        z = rng.standard_normal((m, dim))
        g = rng.chisquare(dof, size=m)
        return z / np.sqrt(g)[:, None], _draw_bias(rng, m, activation)
    if kind == "sphere_uniform":
        radius = float(spec.get("radius", 1.0))
        v = rng.standard_normal((m, dim + 1))
        v *= radius / np.linalg.norm(v, axis=1, keepdims=True)
        return v[:, :dim], v[:, dim]
    if kind == "grid":
        scale = float(spec.get("scale", 1.0))
        per_axis = max(2, math.ceil(m ** (1.0 / dim)))
        axis = np.linspace(-scale, scale, per_axis)
        mesh = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
        w = mesh[np.linspace(0, mesh.shape[0] - 1, m).round().astype(int)]
        q = (np.arange(m) + 0.5) / m
        if activation == "cos":
            b = math.pi * q
        else:
            from scipy.special import ndtri
            b = ndtri(q)
        return w, b
    raise ValueError(f"unknown feature distribution {kind!r}; expected one of {FEATURE_KINDS}")


def init_fixup(S: int, m: int, dim: int, feature_dist: Mapping | None = None, *,
               activation: str = "cos", seed: int = 0,
               tied_slices: bool = False) -> ParameterMeasure:
    """Identity initialization: u = 0, (w, b) drawn i.i.d. from ``feature_dist``.

    ``feature_dist`` is a mapping such as ``{"kind": "gaussian", "rho": 1.0}``,
    ``{"kind": "matern", "nu": 4.0}``, ``{"kind": "sphere_uniform"}`` or
    ``{"kind": "grid", "scale": 2.0}``.  With ``tied_slices`` one draw is
    replicated over every slice.
    """
    if S < 1 or m < 1 or dim < 1:
        raise ValueError("S, m and dim must be positive")
    spec = dict(feature_dist or {"kind": "gaussian", "rho": 1.0})
    if "kind" not in spec:
        raise ValueError("feature distribution needs a 'kind'")
    activation = get_activation(activation).kind
    theta = np.zeros((S, m, param_dim(dim)))
    for k in range(S):
        if tied_slices and k > 0:
            theta[k] = theta[0]
            continue
        w, b = _draw_features(slice_rng(seed, k), m, dim, spec, activation)
        theta[k, :, dim:2 * dim] = w
        theta[k, :, 2 * dim] = b
    return ParameterMeasure(theta, activation=activation, seed=seed)


def init_random(S: int, m: int, dim: int, *, scale: float = 1.0, activation: str = "tanh",
                seed: int = 0) -> ParameterMeasure:
    """All particle coordinates i.i.d. N(0, scale^2); used for generic test measures."""
    theta = np.stack([scale * slice_rng(seed, k).standard_normal((m, param_dim(dim)))
                      for k in range(S)])
    return ParameterMeasure(theta, activation=activation, seed=seed)


def residual_field(mu: ParameterMeasure, slice_index: int, x: np.ndarray) -> np.ndarray:
    """F_{mu(.|s_k)}(x) for a batch of points ``x`` of shape (N, D)."""
    theta = mu.theta[slice_index]
    u, w, b = split_particles(theta, mu.dim)
    act = mu.sigma(np.asarray(x, float) @ w.T + b)
    return act @ u / mu.m




def _uniform_ball(rng, dim: int, radius: float) -> np.ndarray:
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    return radius * rng.uniform() ** (1.0 / dim) * v


def synthetic_dataset(N: int, d: int, d_prime: int, *, ball_radius: float = 1.0,
                      min_separation: float = 0.0, seed: int = 0,
                      max_attempts: int = 100_000) -> Dataset:
    """Inputs uniform in the ball of radius ``ball_radius``, targets uniform in the unit ball.

    Inputs are accepted one at a time only if they keep every pairwise
    distance >= ``min_separation``; more than ``max_attempts`` draws raise.
    """
    if N < 1 or d < 1 or d_prime < 1:
        raise ValueError("N, d and d_prime must be positive")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    xs: list[np.ndarray] = []
    attempts = 0
    while len(xs) < N:
        if attempts >= max_attempts:
            raise RuntimeError(f"rejection sampling placed {len(xs)} of {N} points "
                               f"in {max_attempts} attempts")
        attempts += 1
        cand = _uniform_ball(rng, d, ball_radius)
        if all(np.linalg.norm(cand - x) >= min_separation for x in xs):
            xs.append(cand)
    ys = np.stack([_uniform_ball(rng, d_prime, 1.0) for _ in range(N)])
    return Dataset(np.stack(xs), ys)


__all__ = [
    "ACTIVATIONS", "Activation", "Dataset", "FEATURE_KINDS", "LiftedProblem",
    "ParameterMeasure", "energy", "get_activation", "init_fixup", "init_random",
    "join_particles", "lift", "lifted_loss", "pairwise_separation", "param_dim",
    "residual_field", "slice_rng", "split_particles", "synthetic_dataset",
]
