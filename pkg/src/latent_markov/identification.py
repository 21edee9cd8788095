"""Order and rank diagnostics for partially observed chains.

For the homogeneous 3-state chain observed only through ``p3(t)``, the
observed series obeys an affine order-2 recursion

    p3(t) = a + b p3(t-1) + c p3(t-2)

whose coefficients are closed-form functions of the transition matrix
(state indices are 1-based in the formulas below, 0-based in code):

    a = p12 (p23 - p13) + p13 (1 - p22 + p12)
    b = p22 - p12 + p33 - p13
    c = (p22 - p12)(p13 - p33) + (p23 - p13)(p32 - p12)
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.special import expit

from .markov_core import as_transition_matrix
from .model_zoo import SidParams

SCALAR_TOL = 1e-12
REL_SV_TOL = 1e-10
# central differences of the quadratic (a, b, c) carry ~1e-9 rounding noise at h=1e-7
JAC_SV_TOL = 1e-6
FD_STEP = 1e-7


class IdentificationError(ValueError):
    """A genericity condition fails; ``condition`` names it."""

    def __init__(self, condition: str, detail: str):
        super().__init__(f"{condition}: {detail}")
        self.condition = condition


@dataclass
class IdentificationReport:
    J: int
    K: int
    T: int
    dim_theta: int
    moment_count: int
    param_count: int
    order_satisfied: bool
    shortcut_satisfied: bool
    conditions: dict = field(default_factory=dict)
    abc: tuple[float, float, float] | None = None
    underid_order: int | None = None
    overid_order: int | None = None
    notes: list = field(default_factory=list)

    def check_counts(self) -> bool:
        return (
            self.moment_count == (self.J - 1) * (self.T - 1)
            and self.param_count == (self.J - self.K - 1) * self.T + self.dim_theta
        )

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["abc"] = list(self.abc) if self.abc is not None else None
        return out


def order_condition(J: int, K: int, T: int, dim_theta: int) -> IdentificationReport:
    """Count moments against unknowns.

    ``order_satisfied`` compares the two counts literally; the
    ``K*T >= dim_theta`` shortcut is reported separately because the two
    differ by ``J - 1``.
    """
    if J < 2 or not 1 <= K <= J - 1 or T < 2 or dim_theta < 0:
        raise ValueError(f"need J>=2, 1<=K<=J-1, T>=2, dim_theta>=0; got {J, K, T, dim_theta}")
    moments = (J - 1) * (T - 1)
    params = (J - K - 1) * T + dim_theta
    rep = IdentificationReport(
        J=J,
        K=K,
        T=T,
        dim_theta=dim_theta,
        moment_count=moments,
        param_count=params,
        order_satisfied=moments >= params,
        shortcut_satisfied=K * T >= dim_theta,
    )
    if rep.order_satisfied != rep.shortcut_satisfied:
        rep.notes.append(
            "count comparison and K*T >= dim_theta shortcut disagree (they differ by J-1)"
        )
    return rep


def _entries(P):
    P = np.asarray(P, dtype=float)
    return {f"p{i + 1}{j + 1}": P[i, j] for i in range(3) for j in range(3)}


def _abc(e):
    a = e["p12"] * (e["p23"] - e["p13"]) + e["p13"] * (1 - e["p22"] + e["p12"])
    b = e["p22"] - e["p12"] + e["p33"] - e["p13"]
    c = (e["p22"] - e["p12"]) * (e["p13"] - e["p33"]) + (e["p23"] - e["p13"]) * (e["p32"] - e["p12"])
    return a, b, c


def recursion_coefficients(P) -> tuple[float, float, float]:
    """Closed-form ``(a, b, c)`` of the order-2 recursion for ``p3``."""
    P = as_transition_matrix(P)
    if P.shape != (3, 3):
        raise ValueError("recursion coefficients are defined for 3x3 matrices")
    e = _entries(P)
    if abs(e["p23"] - e["p13"]) <= SCALAR_TOL:
        raise IdentificationError("condition 1", "p23 equals p13")
    return _abc(e)


def _regressors(series):
    x = np.asarray(series, dtype=float)
    X = np.column_stack([np.ones(len(x) - 2), x[1:-1], x[:-2]])
    return X, x[2:]


def fit_order2_recursion(series):
    """Least-squares ``(a, b, c, rmse)`` for ``x_t = a + b x_{t-1} + c x_{t-2}``."""
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or len(x) < 5:
        raise ValueError("need a series of length >= 5")
    X, y = _regressors(x)
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[-1] <= REL_SV_TOL * sv[0]:
        raise IdentificationError(
            "condition 3", f"regressor matrix rank deficient (sv ratio {sv[-1] / sv[0]:.3g})"
        )
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    rmse = float(np.sqrt(np.mean((y - X @ coef) ** 2)))
    return float(coef[0]), float(coef[1]), float(coef[2]), rmse


_FREE = ((0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1))


def _matrix_from_free(v):
    P = np.zeros((3, 3))
    for (i, j), val in zip(_FREE, v):
        P[i, j] = val
    for i in range(3):
        P[i, i] = 1.0 - P[i].sum()
    return P


def abc_jacobian(P, free=_FREE, step: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of ``(a, b, c)`` in the off-diagonal entries.

    Diagonals move with their row so every row keeps unit mass.
    """
    P = np.asarray(P, dtype=float)
    v = np.array([P[i, j] for i, j in _FREE])
    cols = [_FREE.index(f) for f in free]
    jac = np.zeros((3, len(cols)))
    for k, c in enumerate(cols):
        up = v.copy()
        dn = v.copy()
        up[c] += step
        dn[c] -= step
        jac[:, k] = (np.array(_abc(_entries(_matrix_from_free(up)))) - np.array(_abc(_entries(_matrix_from_free(dn))))) / (2 * step)
    return jac


def _rank(M, rel_tol) -> int:
    sv = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(sv > rel_tol * sv[0])) if sv[0] > 0 else 0


def check_conditions(P, p3_series) -> IdentificationReport:
    """Evaluate the four genericity conditions for a 3-state chain.

    Failures are recorded in ``report.conditions`` rather than raised.
    An upper-triangular ``P`` is treated as the recursive case with three
    free entries instead of six.
    """
    P = as_transition_matrix(P)
    x = np.asarray(p3_series, dtype=float)
    T = len(x)
    e = _entries(P)
    recursive = e["p21"] == 0 and e["p31"] == 0 and e["p32"] == 0
    free = ((0, 1), (0, 2), (1, 2)) if recursive else _FREE

    conds = {}
    gap = abs(e["p23"] - e["p13"])
    conds["condition 1"] = {"passed": gap > SCALAR_TOL, "value": gap}
    a, b, c = _abc(e)
    conds["condition 2"] = {"passed": abs(c) > SCALAR_TOL, "value": c}
    if T >= 3:
        X, _ = _regressors(x)
        sv = np.linalg.svd(X, compute_uv=False)
        ratio = float(sv[-1] / sv[0]) if sv[0] > 0 and len(sv) == 3 else 0.0
    else:
        ratio = 0.0
    conds["condition 3"] = {"passed": ratio > REL_SV_TOL and T >= 5, "value": ratio}
    jac = abc_jacobian(P, free)
    sv = np.linalg.svd(jac, compute_uv=False)
    rank = _rank(jac, JAC_SV_TOL)
    conds["condition 4"] = {"passed": rank == 3, "value": int(rank), "singular_values": sv.tolist()}

    n_free = len(free)
    rep = order_condition(3, 1, max(T, 2), n_free)
    rep.conditions = conds
    rep.abc = (a, b, c)
    notes = rep.notes
    if recursive:
        notes.append(
            "upper-triangular (recursive) chain: three free transition probabilities; "
            "(a, b, c) then depend on p12, p13 only through p11"
        )
    notes.append("thresholds: T >= 6 for the generic result, T >= 5 implied by condition 3")
    if all(conds[k]["passed"] for k in ("condition 1", "condition 2", "condition 3")):
        rep.underid_order = n_free - rank
        rep.overid_order = T - 5
    return rep


def sid_coefficients(theta) -> np.ndarray:
    """Nine coefficients of the SID observed-death recursion.

    ``p3(t) = a1 + b1 x1 + c1 x2 + (a2 + b2 x1 + c2 x2) expit(a3 + b3 x1 + c3 x2)``
    with ``x1 = p3(t-1)``, ``x2 = p3(t-2)``; order ``[a1, b1, c1, a2, b2, c2, a3, b3, c3]``.
    """
    if isinstance(theta, SidParams):
        theta = theta.to_array()
    la1, la2, p13, p23 = np.asarray(theta, dtype=float)
    d = p23 - p13
    if abs(d) <= SCALAR_TOL:
        raise IdentificationError("condition 1", "p23 equals p13")
    # p2(t-2) recovered from the death increments: al0 + al1 x1 + al2 x2
    al0, al1, al2 = -p13 / d, 1.0 / d, -(1.0 - p13) / d
    q13, q23 = 1.0 - p13, 1.0 - p23
    return np.array(
        [
            p13 * p23,
            q13 + q23,
            -q13 * q23,
            q13 * p23,
            -q13,
            q13 * q23,
            la1 + la2 * al0,
            la2 * al1,
            la2 * al2,
        ]
    )


def _sid_predict(coef, x1, x2):
    a1, b1, c1, a2, b2, c2, a3, b3, c3 = coef
    return a1 + b1 * x1 + c1 * x2 + (a2 + b2 * x1 + c2 * x2) * expit(a3 + b3 * x1 + c3 * x2)


@dataclass
class SidFitReport:
    coefficients: np.ndarray
    implied: np.ndarray
    rmse: float
    implied_rmse: float
    overid_order: int = 5
    success: bool = True
    message: str = ""


def sid_reduced_form(theta, p3_series) -> SidFitReport:
    """Fit the nine-coefficient recursion to an observed SID death series.

    The fit starts from the coefficients implied by ``theta``; both the fitted
    and the implied root-mean-square residuals are reported.
    """
    x = np.asarray(p3_series, dtype=float)
    if len(x) < 12:
        raise ValueError("need at least 12 observations to fit nine coefficients")
    implied = sid_coefficients(theta)
    x1, x2, y = x[1:-1], x[:-2], x[2:]

    def resid(c):
        return _sid_predict(c, x1, x2) - y

    r0 = resid(implied)
    implied_rmse = float(np.sqrt(np.mean(r0 ** 2)))
    sol = least_squares(resid, implied, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
    rmse = float(np.sqrt(np.mean(sol.fun ** 2)))
    if rmse > implied_rmse:
        coef, rmse = implied, implied_rmse
    else:
        coef = sol.x
    return SidFitReport(coef, implied, rmse, implied_rmse, success=bool(sol.status > 0), message=str(sol.message))
