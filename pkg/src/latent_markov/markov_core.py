"""State spaces, transition models and the marginal-probability recursion.

Marginal distributions are plain float arrays of length J (one row per day
when stacked); a ``TransitionModel`` wraps a vectorised builder
``(p, theta) -> P`` where ``P[i, j]`` is the one-day probability of moving
from compartment ``i`` to ``j`` given yesterday's marginal ``p``.

Days are 0-based everywhere in the API: ``p_path[0]`` is the first day.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-12
CLAMP_TOL = 1e-9


class ModelDomainError(ValueError):
    """A builder was evaluated outside the domain where it is defined."""


class SimplexError(ValueError):
    """A vector is not a probability vector (or a matrix not row-stochastic)."""


@dataclass(frozen=True)
class StateSpace:
    labels: tuple[str, ...]

    def __post_init__(self):
        labels = tuple(str(x) for x in self.labels)
        object.__setattr__(self, "labels", labels)
        if len(labels) < 2:
            raise ValueError("a state space needs at least two compartments")
        if any(not lab for lab in labels):
            raise ValueError("compartment labels must be nonempty")
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate compartment labels in {labels}")

    @property
    def J(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown compartment {label!r}; have {self.labels}") from None


def as_prob_vector(values, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate and return a float copy of a probability vector."""
    p = np.array(values, dtype=float)
    if p.ndim != 1:
        raise SimplexError(f"expected a 1-d probability vector, got shape {p.shape}")
    if np.any(~np.isfinite(p)) or np.any(p < -tol) or np.any(p > 1 + tol):
        raise SimplexError(f"entries outside [0, 1]: {p}")
    if abs(p.sum() - 1.0) > tol:
        raise SimplexError(f"entries sum to {p.sum():.17g}, not 1")
    return p


def as_transition_matrix(entries, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate and return a float copy of a row-stochastic matrix."""
    P = np.array(entries, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise SimplexError(f"transition matrix must be square, got shape {P.shape}")
    if np.any(~np.isfinite(P)) or np.any(P < -tol) or np.any(P > 1 + tol):
        raise SimplexError("transition probabilities must lie in [0, 1]")
    dev = np.abs(P.sum(axis=1) - 1.0)
    if np.any(dev > tol):
        row = int(np.argmax(dev))
        raise SimplexError(f"row {row} sums to {P[row].sum():.17g}")
    return P


@dataclass(frozen=True, eq=False)
class TransitionModel:
    """Parametric map ``(p(t-1), theta) -> P``.

    ``builder`` must broadcast over leading axes of ``p``: a ``(J,)`` input
    gives ``(J, J)``, a ``(T, J)`` input gives ``(T, J, J)``.
    """

    state_space: StateSpace
    param_names: tuple[str, ...]
    theta: np.ndarray
    builder: Callable[[np.ndarray, np.ndarray], np.ndarray]
    zero_pattern: np.ndarray
    name: str = ""
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(-1)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        zp = np.array(self.zero_pattern, dtype=bool)
        zp.setflags(write=False)
        object.__setattr__(self, "zero_pattern", zp)
        if len(self.param_names) != theta.size:
            raise ValueError(
                f"{len(self.param_names)} parameter names for {theta.size} values"
            )
        J = self.state_space.J
        if zp.shape != (J, J):
            raise ValueError(f"zero_pattern must be {J}x{J}")

    @property
    def J(self) -> int:
        return self.state_space.J

    @property
    def params(self) -> dict:
        return dict(zip(self.param_names, self.theta.tolist()))

    def matrix(self, p) -> np.ndarray:
        return self.builder(np.asarray(p, dtype=float), self.theta)

    def with_theta(self, theta) -> "TransitionModel":
        return replace(self, theta=np.asarray(theta, dtype=float))

    def with_params(self, **updates) -> "TransitionModel":
        theta = self.theta.copy()
        for key, val in updates.items():
            theta[self.param_names.index(key)] = val
        return self.with_theta(theta)


def constant_model(P, labels: Sequence[str] | None = None, name: str = "constant") -> TransitionModel:
    """Homogeneous chain with a fixed matrix and no parameters."""
    P = as_transition_matrix(P)
    J = P.shape[0]
    labels = tuple(labels) if labels is not None else tuple(f"s{j + 1}" for j in range(J))
    P.setflags(write=False)

    def builder(p, theta):
        return np.broadcast_to(P, p.shape[:-1] + (J, J)).copy()

    return TransitionModel(StateSpace(labels), (), np.zeros(0), builder, P == 0.0, name=name)


@dataclass(frozen=True, eq=False)
class TrajectoryPanel:
    """Individual histories, ``histories[i, t]`` is the state of ``i`` on day ``t``."""

    histories: np.ndarray
    seed: int
    labels: tuple[str, ...] = ()

    @property
    def N(self) -> int:
        return self.histories.shape[0]

    @property
    def T(self) -> int:
        return self.histories.shape[1]


@dataclass(frozen=True, eq=False)
class AggregationMatrix:
    """Known 0/1 matrix mapping J compartment frequencies to K aggregates."""

    rows: np.ndarray

    def __post_init__(self):
        A = np.array(self.rows, dtype=float)
        if A.ndim != 2:
            raise ValueError("aggregation matrix must be 2-d")
        if not np.all((A == 0) | (A == 1)):
            raise ValueError("aggregation matrix entries must be 0 or 1")
        K, J = A.shape
        if K > J:
            raise ValueError(f"K={K} aggregates exceed J={J} states")
        if np.linalg.matrix_rank(A) != K:
            raise ValueError("aggregation matrix must have full row rank")
        A.setflags(write=False)
        object.__setattr__(self, "rows", A)

    @classmethod
    def selection(cls, J: int, observed: Sequence[int]) -> "AggregationMatrix":
        A = np.zeros((len(observed), J))
        for k, j in enumerate(observed):
            A[k, j] = 1.0
        return cls(A)

    @property
    def K(self) -> int:
        return self.rows.shape[0]

    @property
    def J(self) -> int:
        return self.rows.shape[1]

    @property
    def is_selection(self) -> bool:
        return bool(np.all(self.rows.sum(axis=1) == 1))

    @property
    def is_disjoint(self) -> bool:
        """No state feeds more than one aggregate."""
        return bool(np.all(self.rows.sum(axis=0) <= 1))

    def __matmul__(self, other):
        return self.rows @ other


def _check_simplex_output(q: np.ndarray, context: str) -> np.ndarray:
    if np.any(~np.isfinite(q)):
        raise ModelDomainError(f"non-finite marginal {context}")
    low = q.min()
    if low < -CLAMP_TOL:
        j = int(np.argmin(q))
        raise ModelDomainError(f"negative probability {low:.3g} in state {j} {context}")
    if low < 0.0:
        q = np.where(q < 0.0, 0.0, q)
        q = q / q.sum()
    drift = abs(q.sum() - 1.0)
    if drift > SIMPLEX_TOL:
        logger.debug("renormalising marginal %s (drift %.3g)", context, drift)
        q = q / q.sum()
    return q


def bayes_step(model: TransitionModel, p_prev) -> np.ndarray:
    """One day of the recursion ``p(t) = P[p(t-1); theta]' p(t-1)``."""
    p_prev = np.asarray(p_prev, dtype=float)
    P = model.matrix(p_prev)
    return _check_simplex_output(P.T @ p_prev, "after one step")


def propagate(model: TransitionModel, p0, horizon: int) -> np.ndarray:
    """Deterministic marginals for days ``0..horizon``, shape ``(horizon+1, J)``."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    p = as_prob_vector(p0)
    path = np.empty((horizon + 1, p.size))
    path[0] = p
    for t in range(1, horizon + 1):
        try:
            p = bayes_step(model, p)
        except ModelDomainError as exc:
            raise ModelDomainError(f"day {t}: {exc}") from exc
        path[t] = p
    return path


def cumulative_rows(P: np.ndarray) -> np.ndarray:
    """Row-wise CDFs for inverse-transform sampling.

    Each row is closed at 1.0 from its last positive entry on, so rounding in
    the cumulative sum can never select a structurally zero transition.
    """
    P = np.asarray(P, dtype=float)
    cum = np.cumsum(P, axis=-1)
    J = P.shape[-1]
    positive = P > 0
    last = J - 1 - np.argmax(positive[..., ::-1], axis=-1)
    cols = np.arange(J)
    cum = np.where(cols >= last[..., None], 1.0, cum)
    return np.ascontiguousarray(cum)


def simulate_panel(
    model: TransitionModel,
    p0,
    N: int,
    T: int,
    seed: int,
    feedback: str = "realized",
    num_threads: int = 1,
) -> TrajectoryPanel:
    """Simulate N independent histories over T days.

    Day-0 states are drawn from ``p0``; afterwards the transition rows are
    built from yesterday's realised cross-sectional frequency
    (``feedback="realized"``) or from the deterministic path
    (``feedback="deterministic"``). Draws come from a counter-based stream
    keyed by ``(seed, day)`` and indexed by individual, so the panel does not
    depend on the thread count.
    """
    if N < 1 or T < 1:
        raise ValueError("N and T must be positive")
    if feedback not in ("realized", "deterministic"):
        raise ValueError(f"unknown feedback mode {feedback!r}")
    p0 = as_prob_vector(p0)
    J = model.J
    seed = int(seed) & ((1 << 64) - 1)
    det_path = propagate(model, p0, T - 1) if (feedback == "deterministic" and T > 1) else None

    hist = np.empty((T, N), dtype=np.int64)
    hist[0] = kernels.categorical_step(
        np.zeros(N, dtype=np.int64), cumulative_rows(p0[None, :]), seed, 0, num_threads
    )
    for t in range(1, T):
        if det_path is None:
            f_prev = np.bincount(hist[t - 1], minlength=J) / N
        else:
            f_prev = det_path[t - 1]
        try:
            P = model.matrix(f_prev)
        except ModelDomainError as exc:
            raise ModelDomainError(f"day {t}: {exc}") from exc
        hist[t] = kernels.categorical_step(hist[t - 1], cumulative_rows(P), seed, t, num_threads)
    dtype = np.int8 if J < 128 else np.int32
    return TrajectoryPanel(np.ascontiguousarray(hist.T.astype(dtype)), seed, model.state_space.labels)


def empirical_frequencies(panel: TrajectoryPanel, J: int | None = None) -> np.ndarray:
    """Cross-sectional frequencies ``f(t)``, shape ``(T, J)``."""
    if J is None:
        J = len(panel.labels) if panel.labels else int(panel.histories.max()) + 1
    counts = np.stack(
        [np.bincount(panel.histories[:, t], minlength=J) for t in range(panel.T)]
    )
    return counts / panel.N


def autocovariance(model: TransitionModel, p_path, t: int, h: int) -> np.ndarray:
    """``Cov(Z_t, Z_{t-h})`` of the one-hot state indicators.

    Equals ``Pi diag(p(t-h)) - p(t) p(t-h)'`` where ``Pi`` chains the
    (transposed) transition matrices built along ``p_path`` from day ``t-h``
    to day ``t``.
    """
    p_path = np.asarray(p_path, dtype=float)
    if h < 0 or t - h < 0 or t >= len(p_path):
        raise IndexError(f"need 0 <= t-h <= t < {len(p_path)}, got t={t}, h={h}")
    J = p_path.shape[1]
    Pi = np.eye(J)
    for s in range(t - h, t):
        Pi = model.matrix(p_path[s]).T @ Pi
    return Pi * p_path[t - h][None, :] - np.outer(p_path[t], p_path[t - h])


class StationaryDistribution(NamedTuple):
    distribution: np.ndarray
    degenerate: bool
    multiplicity: int


def stationary_distribution(P, sv_tol: float = 1e-10) -> StationaryDistribution:
    """Solve ``pi = P' pi`` on the simplex.

    ``degenerate`` is set when ``P' - I`` has more than one singular value
    below ``sv_tol``; one valid solution is still returned.
    """
    from scipy.optimize import nnls

    P = as_transition_matrix(P)
    J = P.shape[0]
    M = P.T - np.eye(J)
    sv = np.linalg.svd(M, compute_uv=False)
    multiplicity = int(np.sum(sv < sv_tol))
    system = np.vstack([M, np.ones((1, J))])
    rhs = np.zeros(J + 1)
    rhs[-1] = 1.0
    pi, _ = nnls(system, rhs)
    pi = pi / pi.sum()
    # polish with one least-squares refinement on the null space when unique
    if multiplicity <= 1:
        _, _, vt = np.linalg.svd(M)
        v = vt[-1]
        v = v / v.sum()
        if np.all(v >= -1e-14):
            pi = np.clip(v, 0.0, None)
            pi = pi / pi.sum()
    return StationaryDistribution(pi, multiplicity > 1, max(multiplicity, 1))
