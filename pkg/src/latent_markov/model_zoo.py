"""Concrete transition models and reference calibrations.

Every builder is vectorised over leading axes of ``p`` (see
:class:`~latent_markov.markov_core.TransitionModel`).

Parameter layouts (natural scale):

* ``homog3``  : p12, p13, p21, p23, p31, p32
* ``sid``     : a1, a2, p13, p23
* ``siurd``   : a1, a2, b1, b2, c1, c2, p15, p23, p24, p25, p34, p35, p45
* ``two_region_si`` : alpha1, alpha2, beta11, beta12, beta21, beta22

Diagonal transition probabilities are never free: they are the remainder of
their row.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np
from scipy.special import expit

from .markov_core import AggregationMatrix, ModelDomainError, StateSpace, TransitionModel

EXP_LIMIT = 700.0


@dataclass(frozen=True)
class ParamGroup:
    """How a block of parameters is constrained.

    ``kind="real"``: unconstrained reals. ``kind="simplex"``: off-diagonal
    probabilities of one row; they must be nonnegative with sum at most 1,
    the remainder being the (implied) diagonal.
    """

    kind: str
    indices: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class ModelFamily:
    name: str
    labels: tuple[str, ...]
    param_names: tuple[str, ...]
    groups: tuple[ParamGroup, ...]
    factory: Callable[[np.ndarray], TransitionModel]

    def build(self, theta) -> TransitionModel:
        return self.factory(np.asarray(theta, dtype=float))

    @property
    def dim(self) -> int:
        return len(self.param_names)


def _check_row(name: str, probs, labels) -> None:
    probs = np.asarray(probs, dtype=float)
    if np.any(probs < 0) or np.any(probs > 1):
        bad = [lab for lab, v in zip(labels, probs) if not 0 <= v <= 1]
        raise ValueError(f"{name}: probabilities {bad} outside [0, 1]")
    if probs.sum() > 1 + 1e-12:
        raise ValueError(f"{name}: implied diagonal {1 - probs.sum():.6g} is negative")


def _as_record(cls, theta):
    return cls(*[float(v) for v in theta])


class _Record:
    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=float)

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def to_dict(self) -> dict:
        return asdict(self)


# --- homogeneous 3-state chain ------------------------------------------------


@dataclass(frozen=True)
class Homog3Params(_Record):
    p12: float = 0.0
    p13: float = 0.0
    p21: float = 0.0
    p23: float = 0.0
    p31: float = 0.0
    p32: float = 0.0

    def __post_init__(self):
        _check_row("row 1", [self.p12, self.p13], ["p12", "p13"])
        _check_row("row 2", [self.p21, self.p23], ["p21", "p23"])
        _check_row("row 3", [self.p31, self.p32], ["p31", "p32"])

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [1 - self.p12 - self.p13, self.p12, self.p13],
                [self.p21, 1 - self.p21 - self.p23, self.p23],
                [self.p31, self.p32, 1 - self.p31 - self.p32],
            ]
        )


def build_homog3(params: Homog3Params, labels=("s1", "s2", "s3")) -> TransitionModel:
    P = params.matrix()
    P.setflags(write=False)

    def builder(p, theta):
        return np.broadcast_to(_as_record(Homog3Params, theta).matrix(), p.shape[:-1] + (3, 3)).copy()

    return TransitionModel(
        StateSpace(labels), Homog3Params.names(), params.to_array(), builder, P == 0.0, name="homog3"
    )


HOMOG3 = ModelFamily(
    "homog3",
    ("s1", "s2", "s3"),
    Homog3Params.names(),
    (ParamGroup("simplex", (0, 1)), ParamGroup("simplex", (2, 3)), ParamGroup("simplex", (4, 5))),
    lambda th: build_homog3(_as_record(Homog3Params, th)),
)


# --- SID: logistic contagion, absorbing death -------------------------------------


@dataclass(frozen=True)
class SidParams(_Record):
    a1: float
    a2: float
    p13: float
    p23: float

    def __post_init__(self):
        _check_row("p13", [self.p13], ["p13"])
        _check_row("p23", [self.p23], ["p23"])
        if self.p23 <= self.p13:
            warnings.warn(
                f"SID mortality of infected p23={self.p23} does not exceed p13={self.p13}",
                stacklevel=3,
            )


SID_ZERO = np.array([[False, False, False], [True, False, False], [True, True, False]])


def _sid_builder(p, theta):
    a1, a2, p13, p23 = theta
    p = np.asarray(p, dtype=float)
    ell = expit(a1 + a2 * p[..., 1])
    P = np.zeros(p.shape[:-1] + (3, 3))
    P[..., 0, 0] = (1 - p13) * (1 - ell)
    P[..., 0, 1] = (1 - p13) * ell
    P[..., 0, 2] = p13
    P[..., 1, 1] = 1 - p23
    P[..., 1, 2] = p23
    P[..., 2, 2] = 1.0
    return P


def build_sid(params: SidParams) -> TransitionModel:
    return TransitionModel(
        StateSpace(("S", "I", "D")),
        SidParams.names(),
        params.to_array(),
        _sid_builder,
        SID_ZERO,
        name="sid",
        metadata={"cumulative_states": ("D",), "new_count_states": ("I", "D")},
    )


def _sid_factory(theta):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_sid(_as_record(SidParams, theta))


SID = ModelFamily(
    "sid",
    ("S", "I", "D"),
    SidParams.names(),
    (ParamGroup("real", (0, 1)), ParamGroup("simplex", (2,)), ParamGroup("simplex", (3,))),
    _sid_factory,
)


# --- SIURD: multinomial-logit competing contagion ---------------------------------

SIURD_LABELS = ("S", "IU", "ID", "R", "D")

SIURD_ZERO = np.array(
    [
        [False, False, False, True, False],
        [True, False, False, False, False],
        [True, True, False, False, False],
        [True, True, True, False, False],
        [True, True, True, True, False],
    ]
)


@dataclass(frozen=True)
class SiurdParams(_Record):
    a1: float
    a2: float
    b1: float
    b2: float
    c1: float
    c2: float
    p15: float
    p23: float
    p24: float
    p25: float
    p34: float
    p35: float
    p45: float

    def __post_init__(self):
        _check_row("p15", [self.p15], ["p15"])
        _check_row("row IU", [self.p23, self.p24, self.p25], ["p23", "p24", "p25"])
        _check_row("row ID", [self.p34, self.p35], ["p34", "p35"])
        _check_row("row R", [self.p45], ["p45"])

    @property
    def p22(self) -> float:
        return 1.0 - self.p23 - self.p24 - self.p25

    @property
    def p33(self) -> float:
        return 1.0 - self.p34 - self.p35

    @property
    def p44(self) -> float:
        return 1.0 - self.p45

    def scaled(self, factor: float, names=("b1", "b2", "c1", "c2")) -> "SiurdParams":
        vals = self.to_dict()
        for n in names:
            vals[n] *= factor
        return SiurdParams(**vals)


def siurd_shares(p, theta, covariate_scale: float = 1.0) -> np.ndarray:
    """Multinomial-logit shares (stay S, go IU, go ID) of the susceptible row."""
    a1, a2, b1, b2, c1, c2 = theta[:6]
    p = np.asarray(p, dtype=float)
    x2 = covariate_scale * p[..., 1]
    x3 = covariate_scale * p[..., 2]
    e2 = a1 + b1 * x2 + c1 * x3
    e3 = a2 + b2 * x2 + c2 * x3
    worst = max(np.max(e2), np.max(e3))
    if not np.isfinite(worst) or worst > EXP_LIMIT:
        which = "a1 + b1*p2 + c1*p3" if np.max(e2) >= np.max(e3) else "a2 + b2*p2 + c2*p3"
        raise ModelDomainError(f"logit index {which} = {worst:.6g} exceeds {EXP_LIMIT}")
    u2 = np.exp(e2)
    u3 = np.exp(e3)
    tot = 1.0 + u2 + u3
    return np.stack([1.0 / tot, u2 / tot, u3 / tot], axis=-1)


def _siurd_builder(covariate_scale: float):
    def builder(p, theta):
        p = np.asarray(p, dtype=float)
        pi = siurd_shares(p, theta, covariate_scale)
        p15, p23, p24, p25, p34, p35, p45 = theta[6:]
        P = np.zeros(p.shape[:-1] + (5, 5))
        P[..., 0, 0:3] = (1 - p15) * pi
        P[..., 0, 4] = p15
        P[..., 1, 1] = 1 - p23 - p24 - p25
        P[..., 1, 2] = p23
        P[..., 1, 3] = p24
        P[..., 1, 4] = p25
        P[..., 2, 2] = 1 - p34 - p35
        P[..., 2, 3] = p34
        P[..., 2, 4] = p35
        P[..., 3, 3] = 1 - p45
        P[..., 3, 4] = p45
        P[..., 4, 4] = 1.0
        return P

    return builder


def build_siurd(params: SiurdParams, covariate_scale: float = 1.0) -> TransitionModel:
    """Five-state S/IU/ID/R/D model.

    ``covariate_scale`` multiplies ``p2`` and ``p3`` inside both logits.
    """
    return TransitionModel(
        StateSpace(SIURD_LABELS),
        SiurdParams.names(),
        params.to_array(),
        _siurd_builder(float(covariate_scale)),
        SIURD_ZERO,
        name="siurd",
        metadata={
            "covariate_scale": float(covariate_scale),
            "cumulative_states": ("D",),
            "new_count_states": ("ID", "D"),
            "propagation_params": ("b1", "b2", "c1", "c2"),
        },
    )


def siurd_family(covariate_scale: float = 1.0) -> ModelFamily:
    return ModelFamily(
        "siurd",
        SIURD_LABELS,
        SiurdParams.names(),
        (
            ParamGroup("real", (0, 1, 2, 3, 4, 5)),
            ParamGroup("simplex", (6,)),
            ParamGroup("simplex", (7, 8, 9)),
            ParamGroup("simplex", (10, 11)),
            ParamGroup("simplex", (12,)),
        ),
        lambda th: build_siurd(_as_record(SiurdParams, th), covariate_scale),
    )


# --- two regions, country-level aggregates ---------------------------------------


@dataclass(frozen=True)
class TwoRegionSiParams(_Record):
    alpha1: float
    alpha2: float
    beta11: float
    beta12: float
    beta21: float
    beta22: float


TWO_REGION_LABELS = ("S1", "S2", "I1", "I2")
TWO_REGION_AGGREGATION = np.array([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]])


def _two_region_builder(p, theta):
    al1, al2, b11, b12, b21, b22 = theta
    p = np.asarray(p, dtype=float)
    i1, i2 = p[..., 2], p[..., 3]
    ell1 = expit(al1 + b11 * i1 + b12 * i2)
    ell2 = expit(al2 + b21 * i1 + b22 * i2)
    P = np.zeros(p.shape[:-1] + (4, 4))
    P[..., 0, 0] = 1 - ell1
    P[..., 0, 2] = ell1
    P[..., 1, 1] = 1 - ell2
    P[..., 1, 3] = ell2
    P[..., 2, 2] = 1.0
    P[..., 3, 3] = 1.0
    return P


def build_two_region_si(params: TwoRegionSiParams) -> TransitionModel:
    """Two-region SI model; only country totals (S1+S2, I1+I2) are observed.

    Susceptibles of region r are infected with probability
    ``expit(alpha_r + beta_r1 * p_I1 + beta_r2 * p_I2)``; infection is absorbing.
    This functional form is a modelling choice of this package.
    """
    zero = np.ones((4, 4), dtype=bool)
    zero[0, 0] = zero[0, 2] = zero[1, 1] = zero[1, 3] = zero[2, 2] = zero[3, 3] = False
    return TransitionModel(
        StateSpace(TWO_REGION_LABELS),
        TwoRegionSiParams.names(),
        params.to_array(),
        _two_region_builder,
        zero,
        name="two_region_si",
        metadata={
            "aggregation": AggregationMatrix(TWO_REGION_AGGREGATION),
            "aggregate_labels": ("S", "I"),
            "cumulative_states": ("I1", "I2"),
            "new_count_states": ("I1", "I2"),
        },
    )


TWO_REGION_SI = ModelFamily(
    "two_region_si",
    TWO_REGION_LABELS,
    TwoRegionSiParams.names(),
    (ParamGroup("real", tuple(range(6))),),
    lambda th: build_two_region_si(_as_record(TwoRegionSiParams, th)),
)


FAMILIES = {"homog3": HOMOG3, "sid": SID, "siurd": siurd_family(), "two_region_si": TWO_REGION_SI}


def get_family(name: str, covariate_scale: float = 1.0) -> ModelFamily:
    if name == "siurd":
        return siurd_family(covariate_scale)
    try:
        return FAMILIES[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(FAMILIES)}") from None


# --- reference calibrations --------------------------------------------------------

SIM_POPULATION = 60_000_000
FRANCE_POPULATION = 66_900_000

SIM_BASELINE = SiurdParams(
    a1=math.log(3e-6),
    a2=math.log(1e-6),
    b1=500.0 * math.log(25.0),
    b2=500.0 * math.log(25.0),
    c1=500.0 * math.log(25.0),
    c2=500.0 * math.log(25.0),
    p15=3e-5,
    p23=1e-6,
    p24=0.03,
    p25=0.004,
    p34=0.03,
    p35=0.013,
    p45=3e-5,
)

# Off-diagonal entries as published; diagonals follow from the row sums.
FRANCE_ESTIMATED = SiurdParams(
    a1=-8.6517,
    a2=-11.1481,
    b1=0.0034,
    b2=2.499e-5,
    c1=8.482e-5,
    c2=0.00028,
    p15=3.1575e-5,
    p23=0.0386,
    p24=0.0571,
    p25=0.00207,
    p34=0.1032,
    p35=0.0158,
    p45=1.514e-5,
)

# Published transition rows (IU, ID, R) including the printed diagonals.
FRANCE_TABLE_ROWS = np.array(
    [
        [0.0, 0.9022, 0.0386, 0.0571, 0.00207],
        [0.0, 0.0, 0.7926, 0.1032, 0.0158],
        [0.0, 0.0, 0.0, 0.9999, 1.514e-5],
    ]
)

# Projection start for "france-estimated": last fitted day (2020-04-06).
# ID and D are the bundled observations of that day; IU and R are the
# published reconstructed counts for the same day.
FRANCE_START_COUNTS = {"IU": 94_461, "ID": 29_569, "R": 107_640, "D": 49_900}

SCENARIOS = ("sim-baseline", "sim-double-prop", "sim-half-prop", "france-estimated")


def france_start() -> np.ndarray:
    c = FRANCE_START_COUNTS
    tail = np.array([c["IU"], c["ID"], c["R"], c["D"]], dtype=float) / FRANCE_POPULATION
    return np.concatenate([[1.0 - tail.sum()], tail])


def baseline_scenario(name: str, covariate_scale: float = 1.0):
    """Return ``(model, p0, population)`` for a named reference scenario."""
    if name == "sim-baseline":
        params = SIM_BASELINE
    elif name == "sim-double-prop":
        params = SIM_BASELINE.scaled(2.0)
    elif name == "sim-half-prop":
        params = SIM_BASELINE.scaled(0.5)
    elif name == "france-estimated":
        return build_siurd(FRANCE_ESTIMATED, covariate_scale), france_start(), FRANCE_POPULATION
    else:
        raise KeyError(f"unknown scenario {name!r}; choose from {SCENARIOS}")
    p0 = np.array([1.0, 0.0, 0.0, 0.0, 0.0])
    return build_siurd(params, covariate_scale), p0, SIM_POPULATION
