"""Single-round data model: behaviours, Bell functionals and count tables.

Index convention throughout the package: tensors are indexed (a, b, x, y)
with all four indices in {0, 1}.  a, b are the outputs of the two devices,
x, y their inputs.  All serialisation uses the same order.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatch, ZeroInputCount

SHAPE = (2, 2, 2, 2)

# Normalisation is checked at 1e-9; entries may dip one order below zero
# (1e-8) to absorb conic-solver feasibility noise on regularised points.
NORM_TOL = 1e-9
ENTRY_TOL = 1e-8


def _as_tensor(p, name: str) -> np.ndarray:
    arr = np.asarray(p, dtype=float)
    if arr.shape != SHAPE:
        raise DimensionMismatch(f"{name} must have shape {SHAPE}, got {arr.shape}")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Behaviour:
    """Conditional distribution P(a,b|x,y) on binary inputs and outputs."""

    p: np.ndarray

    def __post_init__(self):
        arr = _as_tensor(self.p, "p")
        if arr.min() < -ENTRY_TOL:
            raise ValueError(f"negative probability entry {arr.min():.3e}")
        sums = arr.sum(axis=(0, 1))
        if np.abs(sums - 1.0).max() > NORM_TOL:
            raise ValueError("conditionals not normalised per input pair")
        object.__setattr__(self, "p", arr)

    @staticmethod
    def uniform() -> "Behaviour":
        return Behaviour(np.full(SHAPE, 0.25))

    @staticmethod
    def from_correlators(marg_a, marg_b, corr) -> "Behaviour":
        """Build from ⟨A_x⟩, ⟨B_y⟩ and ⟨A_x B_y⟩ in the ±1-outcome picture."""
        p = np.empty(SHAPE)
        for a, b, x, y in itertools.product(range(2), repeat=4):
            p[a, b, x, y] = 0.25 * (
                1.0
                + (-1) ** a * marg_a[x]
                + (-1) ** b * marg_b[y]
                + (-1) ** (a + b) * corr[x, y]
            )
        return Behaviour(p)

    def to_json(self) -> str:
        return json.dumps({"p": self.p.tolist()})

    @staticmethod
    def from_json(text: str) -> "Behaviour":
        return Behaviour(np.array(json.loads(text)["p"]))


# The Tsirelson point: P(ab|xy) = (1 + (-1)^(a+b+xy)/sqrt(2)) / 4.
def tsirelson_behaviour() -> Behaviour:
    p = np.empty(SHAPE)
    for a, b, x, y in itertools.product(range(2), repeat=4):
        p[a, b, x, y] = (1.0 + (-1) ** ((a + b + x * y) % 2) / np.sqrt(2.0)) / 4.0
    return Behaviour(p)


def pr_box() -> Behaviour:
    """Extremal no-signalling point: P = 1/2 iff a xor b = x*y."""
    p = np.zeros(SHAPE)
    for a, b, x, y in itertools.product(range(2), repeat=4):
        if (a ^ b) == (x & y):
            p[a, b, x, y] = 0.5
    return Behaviour(p)


@dataclass(frozen=True)
class BellExpression:
    """Linear functional sum_{abxy} c_abxy P(ab|xy) with optional cached
    bounds: local bound, quantum max/min at a stated relaxation level."""

    c: np.ndarray
    local_bound: float | None = None
    quantum_max: float | None = None
    quantum_min: float | None = None
    level: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "c", _as_tensor(self.c, "c"))
        if self.quantum_max is not None and self.quantum_min is not None and self.local_bound is not None:
            # local points are quantum points, so I_Q- <= I_L <= I_Q+
            if not (self.quantum_min - 1e-7 <= self.local_bound <= self.quantum_max + 1e-7):
                raise ValueError("cached bounds violate I_Q- <= I_L <= I_Q+")

    def with_local_bound(self) -> "BellExpression":
        return replace(self, local_bound=local_bound(self))

    def scaled(self, factor: float) -> "BellExpression":
        return BellExpression(self.c * factor)

    def to_json(self) -> str:
        return json.dumps(
            {
                "c": self.c.tolist(),
                "localBound": self.local_bound,
                "quantumMax": self.quantum_max,
                "quantumMin": self.quantum_min,
                "level": self.level,
            }
        )

    @staticmethod
    def from_json(text: str) -> "BellExpression":
        d = json.loads(text)
        return BellExpression(
            np.array(d["c"]),
            local_bound=d.get("localBound"),
            quantum_max=d.get("quantumMax"),
            quantum_min=d.get("quantumMin"),
            level=d.get("level"),
        )


@dataclass(frozen=True)
class CountTable:
    """Integer counts N_abxy for n rounds drawn under input distribution pi."""

    counts: np.ndarray
    n: int
    pi: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != SHAPE:
            raise DimensionMismatch(f"counts must have shape {SHAPE}")
        if counts.min() < 0:
            raise ValueError("negative count")
        if counts.sum() != self.n:
            raise ValueError("counts do not sum to n")
        pi = np.asarray(self.pi, dtype=float)
        if pi.shape != (2, 2):
            raise DimensionMismatch("pi must have shape (2, 2)")
        if pi.min() < 0 or abs(pi.sum() - 1.0) > NORM_TOL:
            raise ValueError("pi is not a distribution")
        counts.setflags(write=False)
        pi = pi.copy()
        pi.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "pi", pi)

    def input_tally(self) -> np.ndarray:
        """N_xy, the number of rounds per input pair."""
        return self.counts.sum(axis=(0, 1))

    def to_json(self) -> str:
        return json.dumps({"counts": self.counts.tolist(), "n": int(self.n), "pi": self.pi.tolist()})

    @staticmethod
    def from_json(text: str) -> "CountTable":
        d = json.loads(text)
        return CountTable(np.array(d["counts"]), int(d["n"]), np.array(d["pi"]))


class InputPairSet(frozenset):
    """Nonempty subset of the four input pairs (x, y)."""

    def __new__(cls, members):
        pairs = frozenset((int(x), int(y)) for x, y in members)
        if not pairs:
            raise ValueError("input pair set must be nonempty")
        for x, y in pairs:
            if x not in (0, 1) or y not in (0, 1):
                raise ValueError(f"invalid input pair {(x, y)}")
        return super().__new__(cls, pairs)

    @staticmethod
    def all_pairs() -> "InputPairSet":
        return InputPairSet(itertools.product(range(2), repeat=2))

    @staticmethod
    def single(x: int, y: int) -> "InputPairSet":
        return InputPairSet([(x, y)])

    def sorted_pairs(self) -> list[tuple[int, int]]:
        return sorted(self)


CHI_ALL = InputPairSet.all_pairs()


def frequencies_from_counts(t: CountTable) -> Behaviour:
    """Observed frequencies N_abxy / N_xy.  Raises ZeroInputCount when some
    input pair never occurred (the data must be resampled)."""
    tally = t.input_tally()
    if (tally == 0).any():
        missing = [tuple(idx) for idx in np.argwhere(tally == 0)]
        raise ZeroInputCount(f"no rounds recorded for input pairs {missing}")
    return Behaviour(t.counts / tally[None, None, :, :])


def bell_value(expr: BellExpression, behaviour: Behaviour) -> float:
    return float(np.sum(expr.c * behaviour.p))


def deterministic_behaviours() -> list[Behaviour]:
    """The 16 local deterministic points: a = f(x), b = g(y)."""
    points = []
    for f0, f1, g0, g1 in itertools.product(range(2), repeat=4):
        f = (f0, f1)
        g = (g0, g1)
        p = np.zeros(SHAPE)
        for x, y in itertools.product(range(2), repeat=2):
            p[f[x], g[y], x, y] = 1.0
        points.append(Behaviour(p))
    return points


_DETERMINISTIC = None


def local_bound(expr: BellExpression) -> float:
    """Maximum of the expression over the 16 deterministic points."""
    global _DETERMINISTIC
    if _DETERMINISTIC is None:
        _DETERMINISTIC = deterministic_behaviours()
    return max(bell_value(expr, d) for d in _DETERMINISTIC)


def chsh_expression() -> BellExpression:
    """Standard CHSH coefficients c_abxy = (-1)^(xy + a + b), local bound 2."""
    c = np.empty(SHAPE)
    for a, b, x, y in itertools.product(range(2), repeat=4):
        c[a, b, x, y] = (-1.0) ** ((x * y + a + b) % 2)
    return BellExpression(c, local_bound=2.0)


def chsh_family() -> list[BellExpression]:
    """The 8 CHSH representatives: c_abxy = s * (-1)^(a+b) * s_xy with
    exactly one s_xy = -1 and overall sign s in {+1, -1}.  Each has local
    bound 2; any behaviour violates at most one of them."""
    family = []
    for xstar, ystar in itertools.product(range(2), repeat=2):
        for sign in (1.0, -1.0):
            c = np.empty(SHAPE)
            for a, b, x, y in itertools.product(range(2), repeat=4):
                s_xy = -1.0 if (x, y) == (xstar, ystar) else 1.0
                c[a, b, x, y] = sign * (-1.0) ** ((a + b) % 2) * s_xy
            family.append(BellExpression(c, local_bound=2.0))
    return family


def signalling_norm(p_raw) -> float:
    """Largest change of one party's marginal when the other party's input
    flips.  Zero iff the tensor satisfies no-signalling exactly."""
    arr = np.asarray(p_raw, dtype=float)
    if arr.shape != SHAPE:
        raise DimensionMismatch(f"expected shape {SHAPE}")
    marg_a = arr.sum(axis=1)  # [a, x, y]
    marg_b = arr.sum(axis=0)  # [b, x, y]
    dev_a = np.abs(marg_a[:, :, 0] - marg_a[:, :, 1]).max()
    dev_b = np.abs(marg_b[:, 0, :] - marg_b[:, 1, :]).max()
    return float(max(dev_a, dev_b))


def tv_distance(p, q) -> float:
    """Total variation distance (1/2) sum |P - Q| between two distributions
    on the same finite index set."""
    p = np.asarray(p, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    if p.shape != q.shape:
        raise DimensionMismatch("distributions have different supports")
    return 0.5 * float(np.abs(p - q).sum())
