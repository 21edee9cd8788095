"""Joint least-squares estimation of parameters and latent marginals.

The unknowns are the model parameters and, for every day, the compartment
probabilities that the aggregates leave free. The criterion is the sum over
days of the squared Euclidean gap between ``p(t)`` and the one-step
prediction ``P[p(t-1); theta]' p(t-1)``. Observation constraints
``A p(t) = A_hat_t`` are built into a smooth parametrisation of each day's
feasible slice of the simplex, so the search itself is unconstrained.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import least_squares

from . import kernels
from .markov_core import (
    AggregationMatrix,
    ModelDomainError,
    TransitionModel,
    autocovariance,
    bayes_step,
    empirical_frequencies,
    simulate_panel,
)
from .model_zoo import ModelFamily

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-9
_PROB_FLOOR = 1e-300


class DataError(ValueError):
    """Observations are inconsistent with the aggregation constraints."""


class EstimationError(RuntimeError):
    """No start produced a finite criterion."""


@dataclass(frozen=True, eq=False)
class ObservationSet:
    A: AggregationMatrix
    a_hat: np.ndarray
    dates: tuple[str, ...] = ()
    population: int = 1
    series_names: tuple[str, ...] = ()

    def __post_init__(self):
        a_hat = np.array(self.a_hat, dtype=float)
        if a_hat.ndim == 1:
            a_hat = a_hat[:, None]
        if a_hat.shape[1] != self.A.K:
            raise DataError(f"a_hat has {a_hat.shape[1]} columns, A has {self.A.K} rows")
        if a_hat.shape[0] < 2:
            raise DataError("need at least two observation days")
        dates = tuple(self.dates) or tuple(str(t) for t in range(a_hat.shape[0]))
        if len(dates) != a_hat.shape[0]:
            raise DataError(f"{len(dates)} dates for {a_hat.shape[0]} days")
        if np.any(~np.isfinite(a_hat)) or np.any(a_hat < -FEAS_TOL) or np.any(a_hat > 1 + FEAS_TOL):
            t = int(np.argmax(np.any((a_hat < -FEAS_TOL) | (a_hat > 1 + FEAS_TOL) | ~np.isfinite(a_hat), axis=1)))
            raise DataError(f"aggregate outside [0, 1] on {dates[t]}")
        if self.A.is_disjoint:
            over = a_hat.sum(axis=1) > 1 + FEAS_TOL
            if np.any(over):
                raise DataError(f"aggregates sum above 1 on {dates[int(np.argmax(over))]}")
        a_hat.setflags(write=False)
        object.__setattr__(self, "a_hat", a_hat)
        object.__setattr__(self, "dates", dates)

    @property
    def T(self) -> int:
        return self.a_hat.shape[0]

    @property
    def K(self) -> int:
        return self.A.K

    def with_a_hat(self, a_hat) -> "ObservationSet":
        return replace(self, a_hat=a_hat)


class LatentParametrization:
    """Smooth map from free reals onto ``{p >= 0 : A p = a, sum(p) = 1}``.

    For aggregation matrices whose rows have disjoint supports (selections,
    country totals) each aggregate's mass is split over its states with a
    softmax, and the left-over mass over the never-observed states likewise;
    the image is the relative interior of the slice and the map is exactly
    invertible there. Overlapping rows fall back to an affine null-space
    parametrisation; its nonnegativity is enforced by the estimator with an
    exterior penalty.
    """

    def __init__(self, A: AggregationMatrix):
        self.A = A
        rows = A.rows
        J = A.J
        self.affine = not A.is_disjoint
        if self.affine:
            C = np.vstack([rows, np.ones((1, J))])
            self._C = C
            self._C_pinv = np.linalg.pinv(C)
            self._N = null_space(C)
            self.free_dim = self._N.shape[1]
            return
        self.blocks = [tuple(np.flatnonzero(r)) for r in rows]
        self.rest = tuple(j for j in range(J) if rows[:, j].sum() == 0)
        self.free_dim = sum(len(b) - 1 for b in self.blocks) + max(len(self.rest) - 1, 0)

    @property
    def J(self) -> int:
        return self.A.J

    def _groups(self, a):
        """(states, mass) pairs for one day; ``a`` holds that day's aggregates."""
        out = [(b, a[k]) for k, b in enumerate(self.blocks)]
        rest_mass = 1.0 - float(np.sum(a))
        if self.rest:
            out.append((self.rest, rest_mass))
        elif abs(rest_mass) > FEAS_TOL:
            raise DataError(f"aggregates sum to {1 - rest_mass:.12g} but cover every state")
        return out

    def check(self, a, date="") -> None:
        a = np.asarray(a, dtype=float)
        if self.affine:
            p = self._C_pinv @ np.append(a, 1.0)
            if np.linalg.norm(self._C @ p - np.append(a, 1.0)) > FEAS_TOL:
                raise DataError(f"aggregates on {date} are inconsistent with A")
            return
        try:
            groups = self._groups(a)
        except DataError as exc:
            raise DataError(f"{date}: {exc}") from None
        if any(m < -FEAS_TOL for _, m in groups):
            raise DataError(f"aggregates sum above 1 on {date}")

    def embed(self, a, z) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        z = np.asarray(z, dtype=float)
        if z.shape != (self.free_dim,):
            raise ValueError(f"expected {self.free_dim} free coordinates, got {z.shape}")
        if self.affine:
            return self._C_pinv @ np.append(a, 1.0) + self._N @ z
        p = np.zeros(self.J)
        pos = 0
        for states, mass in self._groups(a):
            n = len(states)
            logits = np.concatenate([[0.0], z[pos:pos + n - 1]])
            pos += n - 1
            w = np.exp(logits - logits.max())
            p[list(states)] = max(mass, 0.0) * w / w.sum()
        return p

    def embed_path(self, a_hat, Z) -> np.ndarray:
        a_hat = np.asarray(a_hat, dtype=float)
        Z = np.asarray(Z, dtype=float).reshape(a_hat.shape[0], self.free_dim)
        if self.affine:
            rhs = np.hstack([a_hat, np.ones((a_hat.shape[0], 1))])
            return rhs @ self._C_pinv.T + Z @ self._N.T
        T = a_hat.shape[0]
        p = np.zeros((T, self.J))
        pos = 0
        masses = [a_hat[:, k] for k in range(len(self.blocks))]
        groups = list(zip(self.blocks, masses))
        if self.rest:
            groups.append((self.rest, 1.0 - a_hat.sum(axis=1)))
        for states, mass in groups:
            n = len(states)
            logits = np.hstack([np.zeros((T, 1)), Z[:, pos:pos + n - 1]])
            pos += n - 1
            w = np.exp(logits - logits.max(axis=1, keepdims=True))
            p[:, list(states)] = np.maximum(mass, 0.0)[:, None] * w / w.sum(axis=1, keepdims=True)
        return p

    def invert(self, a, p) -> np.ndarray:
        """Free coordinates of ``p`` (interior points; zeros are floored)."""
        p = np.asarray(p, dtype=float)
        if self.affine:
            return self._N.T @ (p - self._C_pinv @ np.append(np.asarray(a, float), 1.0))
        z = []
        for states, mass in self._groups(np.asarray(a, dtype=float)):
            if len(states) < 2:
                continue
            if mass <= 0:
                z.extend([0.0] * (len(states) - 1))
                continue
            sub = np.maximum(p[list(states)], _PROB_FLOOR)
            z.extend(np.log(sub[1:] / sub[0]))
        return np.asarray(z, dtype=float)

    def project(self, a, q) -> np.ndarray:
        """Move a probability vector onto the day's slice (heuristic)."""
        q = np.clip(np.asarray(q, dtype=float), 0.0, None)
        if self.affine:
            rhs = np.append(np.asarray(a, float), 1.0)
            return q + self._C_pinv @ (rhs - self._C @ q)
        p = np.zeros(self.J)
        for states, mass in self._groups(np.asarray(a, dtype=float)):
            idx = list(states)
            s = q[idx].sum()
            share = q[idx] / s if s > 0 else np.full(len(idx), 1.0 / len(idx))
            p[idx] = max(mass, 0.0) * share
        return p


def feasible_embed(observations: ObservationSet, t: int, free_coords) -> np.ndarray:
    """Point of day ``t``'s constraint slice addressed by ``free_coords``."""
    lp = LatentParametrization(observations.A)
    lp.check(observations.a_hat[t], observations.dates[t])
    return lp.embed(observations.a_hat[t], free_coords)


def bayes_residuals(model: TransitionModel, p_path) -> np.ndarray:
    """``p(t) - P[p(t-1)]' p(t-1)`` for t = 1..T-1, shape ``(T-1, J)``."""
    p_path = np.asarray(p_path, dtype=float)
    P = model.matrix(p_path[:-1])
    return p_path[1:] - np.einsum("tij,ti->tj", P, p_path[:-1])


def objective_value(model_family, theta, p_path, observations: ObservationSet | None = None) -> float:
    """Sum of squared one-step residuals along ``p_path``.

    ``model_family`` is a :class:`ModelFamily` (then ``theta`` is required) or
    an already built :class:`TransitionModel` (``theta`` may be ``None``).
    The aggregation constraint is not checked here.
    """
    p_path = np.asarray(p_path, dtype=float)
    if observations is not None and len(p_path) != observations.T:
        raise ValueError(f"path has {len(p_path)} days, observations {observations.T}")
    if p_path.ndim != 2 or len(p_path) < 2:
        raise ValueError("need a (T, J) path with T >= 2")
    if isinstance(model_family, TransitionModel):
        model = model_family if theta is None else model_family.with_theta(theta)
    else:
        model = model_family.build(theta)
    r = bayes_residuals(model, p_path)
    return float(np.sum(r * r))


class ThetaMap:
    """Unconstrained coordinates for the free parameters of a family.

    Real parameters map to themselves. Off-diagonal probabilities of a row
    share the mass left by the row's fixed entries through a softmax with
    the implied diagonal as reference category.
    """

    def __init__(self, family: ModelFamily, theta_ref, fixed: Sequence[str] = ()):
        self.family = family
        self.theta_ref = np.asarray(theta_ref, dtype=float).copy()
        unknown = set(fixed) - set(family.param_names)
        if unknown:
            raise KeyError(f"unknown fixed parameters {sorted(unknown)}")
        fixed_mask = np.array([n in fixed for n in family.param_names])
        self.fixed_mask = fixed_mask
        self.plan = []
        free_names = []
        for g in family.groups:
            free = [i for i in g.indices if not fixed_mask[i]]
            fixed_idx = [i for i in g.indices if fixed_mask[i]]
            if free:
                self.plan.append((g.kind, tuple(free), tuple(fixed_idx)))
                free_names.extend(family.param_names[i] for i in free)
        self.free_names = tuple(free_names)
        self.free_index = tuple(family.param_names.index(n) for n in free_names)
        self.dim = len(free_names)

    def encode(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        u = []
        for kind, free, fixed_idx in self.plan:
            if kind == "real":
                u.extend(theta[list(free)])
                continue
            diag = 1.0 - theta[list(fixed_idx)].sum() - theta[list(free)].sum()
            diag = max(diag, 1e-300)
            u.extend(np.log(np.maximum(theta[list(free)], 1e-300) / diag))
        return np.asarray(u, dtype=float)

    def decode(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        theta = self.theta_ref.copy()
        pos = 0
        for kind, free, fixed_idx in self.plan:
            n = len(free)
            block = u[pos:pos + n]
            pos += n
            if kind == "real":
                theta[list(free)] = block
                continue
            mass = 1.0 - theta[list(fixed_idx)].sum()
            m = max(0.0, block.max())
            w = np.exp(block - m)
            theta[list(free)] = mass * w / (np.exp(-m) + w.sum())
        return theta


@dataclass
class EstimationProblem:
    family: ModelFamily
    observations: ObservationSet
    theta_init: np.ndarray
    fixed: tuple[str, ...] = ()
    latent_init: str = "forward"
    p1_guess: np.ndarray | None = None
    p_init: np.ndarray | None = None
    n_starts: int = 8
    seed: int = 0
    jitter: float = 0.1
    max_nfev: int = 5000
    tol: float = 1e-15
    weighting: str = "plain"
    bounds: dict = field(default_factory=dict)
    penalty: float = 1e3

    def __post_init__(self):
        self.theta_init = np.asarray(self.theta_init, dtype=float)
        if self.theta_init.size != self.family.dim:
            raise ValueError(f"{self.family.name} has {self.family.dim} parameters")
        if self.latent_init not in ("forward", "uniform", "given"):
            raise ValueError(f"unknown latent_init {self.latent_init!r}")
        if self.latent_init == "given" and self.p_init is None:
            raise ValueError("latent_init='given' needs p_init")
        if self.weighting not in ("plain", "gls"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")


@dataclass
class CovarianceEstimate:
    names: tuple[str, ...]
    matrix: np.ndarray
    method: str
    n: int
    reliable: bool = True
    notes: dict = field(default_factory=dict)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.matrix), 0.0, None))


@dataclass
class EstimateResult:
    family: str
    param_names: tuple[str, ...]
    free_names: tuple[str, ...]
    theta_hat: np.ndarray
    p_hat: np.ndarray
    objective: float
    converged: bool
    n_starts_used: int
    residuals: np.ndarray
    labels: tuple[str, ...] = ()
    dates: tuple[str, ...] = ()
    start_objectives: tuple[float, ...] = ()
    n_distinct_optima: int = 1
    message: str = ""
    covariance: CovarianceEstimate | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def params(self) -> dict:
        return dict(zip(self.param_names, self.theta_hat.tolist()))


class _Criterion:
    """Residual vector over (free theta coordinates, latent coordinates)."""

    def __init__(self, problem: EstimationProblem, a_hat=None):
        self.problem = problem
        self.family = problem.family
        self.obs = problem.observations
        self.a_hat = self.obs.a_hat if a_hat is None else np.asarray(a_hat, dtype=float)
        self.tmap = ThetaMap(self.family, problem.theta_init, problem.fixed)
        self.lp = LatentParametrization(self.obs.A)
        for t in range(self.a_hat.shape[0]):
            self.lp.check(self.a_hat[t], self.obs.dates[t])
        self.T = self.a_hat.shape[0]
        self.J = self.lp.J
        self.n_theta = self.tmap.dim
        self.n_latent = self.T * self.lp.free_dim
        self.n_res = (self.T - 1) * self.J + (self.T * self.J if self.lp.affine else 0)
        self.n_evals = 0

    def unpack(self, x):
        theta = self.tmap.decode(x[: self.n_theta])
        p = self.lp.embed_path(self.a_hat, x[self.n_theta:])
        return theta, p

    def __call__(self, x):
        self.n_evals += 1
        theta, p = self.unpack(x)
        try:
            model = self.family.build(theta)
            r = bayes_residuals(model, p)
        except (ModelDomainError, ValueError, FloatingPointError):
            return np.full(self.n_res, 1e3)
        if self.problem.weighting == "gls":
            pred = p[1:] - r
            r = r / np.sqrt(np.clip(pred, 0.0, None) + 1e-12)
        r = r.ravel()
        if self.lp.affine:
            r = np.concatenate([r, self.problem.penalty * np.minimum(p.ravel(), 0.0)])
        if not np.all(np.isfinite(r)):
            return np.full(self.n_res, 1e3)
        return r

    def pack(self, theta, p_path) -> np.ndarray:
        z = np.concatenate([self.lp.invert(self.a_hat[t], p_path[t]) for t in range(self.T)]) if self.lp.free_dim else np.zeros(0)
        return np.concatenate([self.tmap.encode(theta), z])

    def forward_path(self, theta, p1=None) -> np.ndarray:
        """Latent initialisation: propagate and project onto each day's slice."""
        lp = self.lp
        if p1 is None:
            p = lp.embed(self.a_hat[0], np.zeros(lp.free_dim))
        else:
            p = lp.project(self.a_hat[0], p1)
        path = [p]
        try:
            model = self.family.build(theta)
        except ValueError:
            model = None
        for t in range(1, self.T):
            if model is not None:
                try:
                    q = bayes_step(model, np.clip(p, 0.0, None) / max(np.clip(p, 0.0, None).sum(), 1e-300))
                except (ModelDomainError, ValueError):
                    q = p
            else:
                q = p
            p = lp.project(self.a_hat[t], q)
            path.append(p)
        return np.array(path)

    def uniform_path(self) -> np.ndarray:
        return self.lp.embed_path(self.a_hat, np.zeros((self.T, self.lp.free_dim)))

    def sparsity(self):
        """Jacobian pattern: day-t latent coordinates touch residual days t and t+1."""
        from scipy.sparse import lil_matrix

        J, m, T = self.J, self.lp.free_dim, self.T
        S = lil_matrix((self.n_res, self.n_theta + self.n_latent), dtype=np.int8)
        S[: (T - 1) * J, : self.n_theta] = 1
        for t in range(T):
            cols = slice(self.n_theta + t * m, self.n_theta + (t + 1) * m)
            rows = slice(max(t - 1, 0) * J, min(t + 1, T - 1) * J)
            S[rows, cols] = 1
            if self.lp.affine:
                off = (T - 1) * J
                S[off + t * J: off + (t + 1) * J, cols] = 1
        return S

    def bounds(self):
        lo = np.full(self.n_theta + self.n_latent, -np.inf)
        hi = np.full(self.n_theta + self.n_latent, np.inf)
        for name, (a, b) in self.problem.bounds.items():
            if name not in self.tmap.free_names:
                continue
            k = self.tmap.free_names.index(name)
            idx = self.family.param_names.index(name)
            if not any(kind == "real" and idx in free for kind, free, _ in self.tmap.plan):
                raise ValueError(f"bounds only apply to real-valued parameters, not {name}")
            lo[k] = -np.inf if a is None else a
            hi[k] = np.inf if b is None else b
        return lo, hi


def _solve(crit: _Criterion, x0, problem: EstimationProblem):
    lo, hi = crit.bounds()
    if np.any(np.isfinite(lo)) or np.any(np.isfinite(hi)):
        x0 = np.clip(x0, lo + 1e-12 * (np.abs(lo) + 1), hi - 1e-12 * (np.abs(hi) + 1))
    if x0.size == 0:
        r = crit(x0)
        return x0, float(r @ r), True, "nothing to estimate"
    sol = least_squares(
        crit,
        x0,
        jac="2-point",
        jac_sparsity=crit.sparsity() if crit.n_latent else None,
        bounds=(lo, hi),
        method="trf",
        x_scale="jac",
        ftol=problem.tol,
        xtol=problem.tol,
        gtol=problem.tol,
        max_nfev=problem.max_nfev,
    )
    return sol.x, float(2.0 * sol.cost), bool(sol.status > 0), str(sol.message)


def _start_points(crit: _Criterion, problem: EstimationProblem):
    """Deterministic sequence of starts; start k depends only on (seed, k)."""
    u0 = crit.tmap.encode(problem.theta_init)
    theta0 = crit.tmap.decode(u0)
    for k in range(problem.n_starts):
        if k == 0:
            u = u0
            theta = theta0
        else:
            rng = np.random.default_rng([int(problem.seed) & 0xFFFFFFFF, k])
            u = u0.copy()
            for j, idx in enumerate(crit.tmap.free_index):
                real = any(kind == "real" and idx in free for kind, free, _ in crit.tmap.plan)
                eps = rng.standard_normal()
                u[j] = u0[j] * (1.0 + problem.jitter * eps) if real else u0[j] + problem.jitter * eps
            theta = crit.tmap.decode(u)
        if problem.latent_init == "given":
            path = np.asarray(problem.p_init, dtype=float)
        elif problem.latent_init == "uniform":
            path = crit.uniform_path()
        else:
            path = crit.forward_path(theta, problem.p1_guess)
        z = crit.pack(theta, path)[crit.n_theta:]
        if k > 0 and z.size:
            rng = np.random.default_rng([int(problem.seed) & 0xFFFFFFFF, k, 1])
            z = z + 0.5 * problem.jitter * rng.standard_normal(z.size)
        yield np.concatenate([u, z])


def estimate(problem: EstimationProblem) -> EstimateResult:
    """Multistart least-squares fit of parameters and latent marginals."""
    crit = _Criterion(problem)
    best = None
    objectives = []
    solutions = []
    for x0 in _start_points(crit, problem):
        r0 = crit(x0)
        if np.all(r0 == 1e3):
            objectives.append(float("inf"))
            continue
        x, obj, ok, msg = _solve(crit, x0, problem)
        objectives.append(obj)
        solutions.append((obj, x))
        if best is None or obj < best[0]:
            best = (obj, x, ok, msg)
    if best is None:
        raise EstimationError(f"criterion not finite at any of {problem.n_starts} starts")
    obj, x, ok, msg = best
    theta, p = crit.unpack(x)
    model = problem.family.build(theta)
    res = bayes_residuals(model, p)
    obj = float(np.sum(res * res))

    tol = max(1e-10 * obj, 1e-24)
    thetas = [crit.unpack(xx)[0] for o, xx in solutions if o - obj <= tol]
    distinct = []
    for th in thetas:
        if not any(np.allclose(th, d, rtol=1e-6, atol=1e-10) for d in distinct):
            distinct.append(th)

    return EstimateResult(
        family=problem.family.name,
        param_names=problem.family.param_names,
        free_names=crit.tmap.free_names,
        theta_hat=theta,
        p_hat=p,
        objective=obj,
        converged=ok,
        n_starts_used=len(objectives),
        residuals=res,
        labels=problem.family.labels,
        dates=problem.observations.dates,
        start_objectives=tuple(objectives),
        n_distinct_optima=len(distinct),
        message=msg,
        metadata={"covariate_scale": model.metadata.get("covariate_scale", 1.0)},
    )


def _warm_refit(problem: EstimationProblem, result: EstimateResult, a_hat):
    """Single local re-fit from the result's coordinates under new aggregates."""
    base = _Criterion(replace(problem, theta_init=result.theta_hat))
    x_ref = base.pack(result.theta_hat, result.p_hat)
    crit = _Criterion(replace(problem, theta_init=result.theta_hat), a_hat=a_hat)
    x, obj, ok, _ = _solve(crit, x_ref, problem)
    theta, p = crit.unpack(x)
    return theta, p, ok


def frequency_covariance(model: TransitionModel, p_path, A) -> np.ndarray:
    """Covariance of the stacked ``sqrt(N) (A f(t) - A p(t))``, shape ``(T K, T K)``.

    Block ``(t, s)`` with ``t >= s`` is ``A Omega_{t,s} A'``.
    """
    A = A.rows if isinstance(A, AggregationMatrix) else np.asarray(A, dtype=float)
    p_path = np.asarray(p_path, dtype=float)
    T = len(p_path)
    K = A.shape[0]
    out = np.zeros((T * K, T * K))
    for t in range(T):
        for s in range(t + 1):
            block = A @ autocovariance(model, p_path, t, t - s) @ A.T
            out[t * K:(t + 1) * K, s * K:(s + 1) * K] = block
            out[s * K:(s + 1) * K, t * K:(t + 1) * K] = block.T
    return out


def _tangent_basis(A: AggregationMatrix, T: int) -> np.ndarray:
    """Orthonormal directions of admissible data perturbations, stacked over days.

    When the all-ones vector lies in the row space of ``A`` the aggregates
    of one day sum to one and only directions keeping that sum are kept.
    """
    K = A.K
    c, *_ = np.linalg.lstsq(A.rows.T, np.ones(A.J), rcond=None)
    if np.allclose(A.rows.T @ c, 1.0, atol=1e-12):
        day = null_space(c[None, :])
    else:
        day = np.eye(K)
    m = day.shape[1]
    U = np.zeros((T * K, T * m))
    for t in range(T):
        U[t * K:(t + 1) * K, t * m:(t + 1) * m] = day
    return U


def delta_method_covariance(
    problem: EstimationProblem,
    result: EstimateResult,
    N: int | None = None,
    rel_step: float = 1e-5,
    latent: Sequence[tuple[int, str]] | None = None,
    asym_tol: float = 1e-2,
) -> CovarianceEstimate:
    """Delta-method covariance of (free parameters, selected latent marginals).

    The estimator map ``A_hat -> (theta_hat, p_hat)`` is differentiated by
    central differences, each perturbed data set being re-fitted from the
    result (warm start). ``latent`` lists ``(day, state label)`` entries of
    ``p_hat`` to include; by default the unobserved states on the last day.
    """
    obs = problem.observations
    N = int(obs.population if N is None else N)
    labels = problem.family.labels
    if latent is None:
        observed = set(np.flatnonzero(obs.A.rows.sum(axis=0)))
        latent = [(obs.T - 1, labels[j]) for j in range(len(labels)) if j not in observed]
    lat_idx = [(t, labels.index(lab)) for t, lab in latent]
    tmap = ThetaMap(problem.family, result.theta_hat, problem.fixed)
    names = tmap.free_names + tuple(f"p[{t}]{lab}" for t, lab in latent)

    def output(theta, p):
        return np.concatenate([theta[list(tmap.free_index)], [p[t, j] for t, j in lat_idx]])

    U = _tangent_basis(obs.A, obs.T)
    y0 = obs.a_hat.ravel()
    scale = np.abs(y0)
    G = np.zeros((len(names), U.shape[1]))
    failures = []
    worst_asym = 0.0
    for k in range(U.shape[1]):
        d = U[:, k]
        support = np.abs(d) > 0
        h = rel_step * max(np.max(scale[support]), 1e-8)
        outs = {}
        for sign in (1.0, -1.0):
            y = y0 + sign * h * d
            try:
                theta, p, ok = _warm_refit(problem, result, y.reshape(obs.a_hat.shape))
            except DataError:
                continue
            if not ok:
                failures.append(k)
            outs[sign] = output(theta, p)
        center = output(result.theta_hat, result.p_hat)
        if 1.0 in outs and -1.0 in outs:
            G[:, k] = (outs[1.0] - outs[-1.0]) / (2 * h)
            fwd = (outs[1.0] - center) / h
            bwd = (center - outs[-1.0]) / h
            denom = np.maximum(np.abs(G[:, k]), 1e-12 * (1 + np.abs(center)))
            worst_asym = max(worst_asym, float(np.max(np.abs(fwd - bwd) / denom)))
        elif 1.0 in outs:
            G[:, k] = (outs[1.0] - center) / h
        elif -1.0 in outs:
            G[:, k] = (center - outs[-1.0]) / h
        else:
            failures.append(k)

    model = problem.family.build(result.theta_hat)
    sigma = frequency_covariance(model, result.p_hat, obs.A)
    V = G @ (U.T @ sigma @ U) @ G.T / N
    V = 0.5 * (V + V.T)
    return CovarianceEstimate(
        names,
        V,
        "delta",
        N,
        reliable=not failures,
        notes={
            "refit_failures": len(failures),
            "jacobian_asymmetry": worst_asym,
            "asymmetry_flag": worst_asym > asym_tol,
            "jacobian": G @ U.T,
        },
    )


def bootstrap_covariance(
    problem: EstimationProblem,
    result: EstimateResult,
    B: int,
    seed: int,
    N: int | None = None,
    same_seed: bool = False,
    feedback: str = "realized",
    num_threads: int = 1,
) -> CovarianceEstimate:
    """Parametric bootstrap covariance of the free parameters.

    Each replicate simulates a panel of ``N`` individuals from the fitted
    model started at ``p_hat[0]``, aggregates it with ``A`` and re-fits from
    the result. Replicate ``b`` uses a seed derived from ``(seed, b)``.
    """
    if B < 2:
        raise ValueError("need B >= 2 replicates")
    obs = problem.observations
    N = int(obs.population if N is None else N)
    model = problem.family.build(result.theta_hat)
    tmap = ThetaMap(problem.family, result.theta_hat, problem.fixed)
    p0 = np.clip(result.p_hat[0], 0.0, None)
    p0 = p0 / p0.sum()
    draws = []
    failures = 0
    for b in range(B):
        rep_seed = seed if same_seed else kernels.stream_key(seed, b)
        panel = simulate_panel(model, p0, N, obs.T, rep_seed, feedback=feedback, num_threads=num_threads)
        f = empirical_frequencies(panel, model.J)
        a_hat = f @ obs.A.rows.T
        try:
            theta, _, ok = _warm_refit(problem, result, a_hat)
        except (DataError, EstimationError, ModelDomainError):
            failures += 1
            continue
        if not ok:
            failures += 1
        draws.append(theta[list(tmap.free_index)])
    draws = np.array(draws)
    if len(draws) >= 2:
        V = np.cov(draws, rowvar=False, ddof=1).reshape(len(tmap.free_names), -1)
    else:
        V = np.full((len(tmap.free_names),) * 2, np.nan)
    return CovarianceEstimate(
        tmap.free_names,
        V,
        "bootstrap",
        N,
        reliable=failures <= 0.2 * B,
        notes={"replicates": B, "failures": failures, "draws": draws},
    )
