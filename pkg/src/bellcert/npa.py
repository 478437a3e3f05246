"""Moment-matrix relaxation of the quantum set for two parties with binary
inputs and outputs.

Each binary measurement is represented by the projector onto outcome 0
(the outcome-1 projector is one minus it), so a party's operator words are
words over the alphabet {0, 1} of projector labels.  Idempotence collapses
repeated letters, and real (Hermitian-symmetric) moments identify a word
pair with its joint reversal.  Equal moments are aliased to a single free
variable rather than constrained, which keeps the programs small.

Level 1 uses per-party monomials {1, A_0, A_1} (matrix dimension 9, 17 free
moments); level 2 adds the length-2 words {A_0 A_1, A_1 A_0} (dimension 25,
53 free moments).  Level 2 is the product (local) hierarchy level the rest
of the package defaults to; the 5-monomial basis is the standard local
level-2 reading and is fixed here once.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import conic
from .behaviour import SHAPE, Behaviour, BellExpression
from .errors import UnsupportedLevel

Word = tuple[int, ...]

# Graded tolerance for moment-program solves: one order above the conic
# defaults.  Optimisation over an extremal face of the moment cone is
# degenerate and interior-point iterations stall with a measured gap just
# above 1e-8; requesting tighter and grading at 1e-7 keeps every solve
# honest while delivering ~1e-8 accuracy in practice.
NPA_TOL = conic.ToleranceConfig(feasibility=1e-7, gap=1e-7)


def _reduce(word) -> Word:
    out: list[int] = []
    for ch in word:
        if not out or out[-1] != ch:
            out.append(ch)
    return tuple(out)


def _party_monomials(level: int) -> list[Word]:
    if level == 1:
        return [(), (0,), (1,)]
    if level == 2:
        return [(), (0,), (1,), (0, 1), (1, 0)]
    raise UnsupportedLevel(f"level must be 1 or 2, got {level}")


@dataclass(frozen=True)
class MomentStructure:
    """Index data of the moment matrix at a given level."""

    level: int
    dim: int
    n_vars: int
    index: np.ndarray       # (dim, dim) -> free-variable id, symmetric
    unit_index: int         # id of the identity moment (trace variable)
    embedding: np.ndarray   # (2,2,2,2, n_vars): P(ab|xy) as a linear map
    monomials: tuple[Word, ...]
    # adjoint of the moment-matrix map in triangle coordinates: for each
    # free moment k, the (triangle position, multiplicity) pairs such that
    # <Lambda, M(m)> = sum_k m_k * sum_pairs mult * Lambda_tri
    adjoint: tuple[tuple[np.ndarray, np.ndarray], ...]

    def moment_matrix(self, m: np.ndarray) -> np.ndarray:
        """Assemble the numeric moment matrix from a free-variable vector."""
        return m[self.index]

    def behaviour_of(self, m: np.ndarray) -> np.ndarray:
        return np.einsum("abxyk,k->abxy", self.embedding, m)


def build_structure(level: int) -> MomentStructure:
    monomials = _party_monomials(level)
    n_mon = len(monomials)
    dim = n_mon * n_mon

    classes: dict[tuple[Word, Word], int] = {}
    index = np.empty((dim, dim), dtype=np.int64)

    def class_id(wa: Word, wb: Word) -> int:
        key = min((wa, wb), (wa[::-1], wb[::-1]))
        if key not in classes:
            classes[key] = len(classes)
        return classes[key]

    for ia, ib in itertools.product(range(n_mon), repeat=2):
        row = ia * n_mon + ib
        for ja, jb in itertools.product(range(n_mon), repeat=2):
            col = ja * n_mon + jb
            wa = _reduce(monomials[ia][::-1] + monomials[ja])
            wb = _reduce(monomials[ib][::-1] + monomials[jb])
            index[row, col] = class_id(wa, wb)

    n_vars = len(classes)
    unit = classes[((), ())]

    # P(ab|xy) from the moments of 1, A_x, B_y and A_x B_y; exact linearity
    # (no constant term) is what lets unnormalised blocks reuse the same map.
    embedding = np.zeros(SHAPE + (n_vars,))
    for x, y in itertools.product(range(2), repeat=2):
        m_a = classes[((x,), ())]
        m_b = classes[((), (y,))]
        m_ab = classes[((x,), (y,))]
        embedding[0, 0, x, y, m_ab] += 1.0
        embedding[0, 1, x, y, m_a] += 1.0
        embedding[0, 1, x, y, m_ab] -= 1.0
        embedding[1, 0, x, y, m_b] += 1.0
        embedding[1, 0, x, y, m_ab] -= 1.0
        embedding[1, 1, x, y, unit] += 1.0
        embedding[1, 1, x, y, m_a] -= 1.0
        embedding[1, 1, x, y, m_b] -= 1.0
        embedding[1, 1, x, y, m_ab] += 1.0

    # triangle enumeration matches the PSD block layout: upper triangle
    # stacked by columns
    adjoint_lists: list[list[tuple[int, float]]] = [[] for _ in range(n_vars)]
    tri = 0
    for j in range(dim):
        for i in range(j + 1):
            adjoint_lists[index[i, j]].append((tri, 1.0 if i == j else 2.0))
            tri += 1
    adjoint = tuple(
        (np.array([p for p, _ in entries], dtype=np.int64),
         np.array([c for _, c in entries]))
        for entries in adjoint_lists
    )

    index.setflags(write=False)
    embedding.setflags(write=False)
    return MomentStructure(
        level=level,
        dim=dim,
        n_vars=n_vars,
        index=index,
        unit_index=unit,
        embedding=embedding,
        monomials=tuple(monomials),
        adjoint=adjoint,
    )


@dataclass(frozen=True)
class UnnormalisedBlock:
    """One moment block inside a conic program, with free trace t >= 0.

    The trace is the identity moment; t >= 0 comes from the PSD constraint,
    and every behaviour-derived identity holds scaled by t because the
    embedding is linear.
    """

    structure: MomentStructure
    offset: int

    @property
    def trace_index(self) -> int:
        return self.offset + self.structure.unit_index

    def behaviour_term(self, a: int, b: int, x: int, y: int):
        """(columns, coefficients) of the P(ab|xy) entry of this block."""
        row = self.structure.embedding[a, b, x, y]
        cols = np.nonzero(row)[0]
        return cols + self.offset, row[cols]

    def expression_term(self, c: np.ndarray):
        """(columns, coefficients) of sum_abxy c_abxy P(ab|xy)."""
        row = np.einsum("abxy,abxyk->k", c, self.structure.embedding)
        cols = np.nonzero(row)[0]
        return cols + self.offset, row[cols]


def attach_block(builder: conic.ProgramBuilder, s: MomentStructure) -> UnnormalisedBlock:
    offset = builder.new_variables(s.n_vars)
    builder.add_psd_block(s.index + offset)
    return UnnormalisedBlock(s, offset)


@dataclass(frozen=True)
class DualBlock:
    """PSD multiplier certifying that a functional is nonnegative on the
    unnormalised relaxation cone: f is in the dual cone iff f_k equals
    <Lambda, basis_k> for some Lambda >= 0, entrywise over the free moments.
    """

    structure: MomentStructure
    offset: int  # first of dim*(dim+1)/2 triangle variables

    def adjoint_term(self, k: int):
        """(columns, coefficients) of <Lambda, M-basis of moment k>."""
        positions, mults = self.structure.adjoint[k]
        return positions + self.offset, mults


def attach_dual_block(builder: conic.ProgramBuilder, s: MomentStructure) -> DualBlock:
    n_tri = s.dim * (s.dim + 1) // 2
    offset = builder.new_variables(n_tri)
    tri_index = np.empty((s.dim, s.dim), dtype=np.int64)
    tri = 0
    for j in range(s.dim):
        for i in range(j + 1):
            tri_index[i, j] = tri_index[j, i] = offset + tri
            tri += 1
    builder.add_psd_block(tri_index)
    return DualBlock(s, offset)


def extremal_completion(expr: BellExpression, s: MomentStructure, sense: str,
                        tol: conic.ToleranceConfig = NPA_TOL) -> tuple[float, np.ndarray]:
    """Extremise the expression over the normalised relaxation, returning
    the optimal value and the optimal moment vector.

    Solved at unit coefficient scale: dual-extracted expressions can carry
    large coefficients and the extremiser is scale-invariant."""
    scale = max(float(np.abs(expr.c).max()), 1e-12)
    builder = conic.ProgramBuilder()
    blk = attach_block(builder, s)
    builder.add_equality([blk.trace_index], [1.0], 1.0)
    cols, coeffs = blk.expression_term(expr.c / scale)
    builder.add_objective(cols, coeffs)
    sol = conic.solve(builder.build(sense), tol)
    conic.require_optimal(sol, f"{sense}imisation of Bell expression at level {s.level}")
    return scale * float(sol.objective), sol.x[blk.offset:blk.offset + s.n_vars]


def max_bell(expr: BellExpression, s: MomentStructure,
             tol: conic.ToleranceConfig = NPA_TOL) -> float:
    """Maximum of the expression over the relaxation (outer bound on the
    quantum maximum)."""
    return extremal_completion(expr, s, "max", tol)[0]


def min_bell(expr: BellExpression, s: MomentStructure,
             tol: conic.ToleranceConfig = NPA_TOL) -> float:
    return extremal_completion(expr, s, "min", tol)[0]


def with_quantum_bounds(expr: BellExpression, s: MomentStructure) -> BellExpression:
    """Return a copy with local and quantum bounds cached at this level."""
    from .behaviour import local_bound
    return BellExpression(
        expr.c,
        local_bound=local_bound(expr),
        quantum_max=max_bell(expr, s),
        quantum_min=min_bell(expr, s),
        level=s.level,
    )


# Minimum-eigenvalue floor below which a completion no longer counts as a
# member of the relaxation; one order above the solver feasibility tolerance.
MEMBERSHIP_EIG_TOL = 1e-7


@dataclass(frozen=True)
class MembershipResult:
    feasible: bool
    margin: float  # largest achievable minimum eigenvalue; -inf if the
                   # linear system itself is inconsistent (signalling input)

    def __bool__(self) -> bool:
        return self.feasible


def membership(P: Behaviour, s: MomentStructure,
               tol: conic.ToleranceConfig = NPA_TOL) -> MembershipResult:
    """Search for a PSD moment completion of P, maximising the minimum
    eigenvalue of the completion.  Feasible iff that margin clears the
    eigenvalue floor."""
    from .errors import SolverFailure

    builder = conic.ProgramBuilder()
    # Moment variables without a PSD block of their own: positivity is
    # imposed on the shifted copy Z = M(m) - lam * I below, so the margin
    # lam is exactly the best achievable minimum eigenvalue.
    blk = UnnormalisedBlock(s, builder.new_variables(s.n_vars))
    lam = builder.new_variables(1)

    tri = [(i, j) for j in range(s.dim) for i in range(j + 1)]
    z0 = builder.new_variables(len(tri))
    z_index = np.empty((s.dim, s.dim), dtype=np.int64)
    for k, (i, j) in enumerate(tri):
        z_index[i, j] = z_index[j, i] = z0 + k
        m_var = blk.offset + s.index[i, j]
        if i == j:
            builder.add_equality([z0 + k, m_var, lam], [1.0, -1.0, 1.0], 0.0)
        else:
            builder.add_equality([z0 + k, m_var], [1.0, -1.0], 0.0)
    builder.add_psd_block(z_index)

    builder.add_equality([blk.trace_index], [1.0], 1.0)
    for a, b, x, y in itertools.product(range(2), repeat=4):
        cols, coeffs = blk.behaviour_term(a, b, x, y)
        builder.add_equality(cols, coeffs, P.p[a, b, x, y])
    builder.add_objective([lam], [1.0])

    sol = conic.solve(builder.build("max"), tol)
    if sol.status == "infeasible":
        return MembershipResult(False, float("-inf"))
    if sol.status != "optimal":
        raise SolverFailure(f"membership check failed: {sol.status} ({sol.message})")
    margin = float(sol.objective)
    return MembershipResult(margin >= -MEMBERSHIP_EIG_TOL, margin)
