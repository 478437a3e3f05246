"""Guessing-probability programs and the optimised Bell expression.

The adversary prepares one unnormalised relaxation member per output pair
(alpha, beta) and per input pair (gamma, delta) in chi, and maximises the
total weight placed on the guessed entries.  Constraining the blocks to sum
to a full behaviour gives the complete-information program; constraining
only a Bell value and the total trace gives the expression-restricted one.
The dual multipliers of the behaviour constraint are themselves a Bell
expression whose restricted program reproduces the complete-information
optimum, which is how the protocol obtains a tailored certificate.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import conic, npa
from .behaviour import (
    CHI_ALL,
    Behaviour,
    BellExpression,
    InputPairSet,
    bell_value,
    local_bound,
    signalling_norm,
)
from .errors import InfeasibleBehaviour, InfeasibleValue, SolverFailure

# Behaviours with more signalling than this cannot have a moment completion;
# reject before burning a solve.  Finite-n frequencies land far above it.
SIGNALLING_GUARD = 1e-6

# Guessing solves are graded one order looser than the moment extremisations:
# the feasible set thins out towards extremal behaviours and quantum
# endpoints, and the guessing values only feed log2-scale quantities with
# 1e-3 .. 1e-4 scale tolerances downstream.
RB_TOL = conic.ToleranceConfig(feasibility=1e-6, gap=1e-5)


def _constraint_functionals() -> np.ndarray:
    """Basis of the span of normalisation and signalling functionals
    (12 generators, rank 8) as rows over flattened coefficient space."""
    rows = []
    for x, y in itertools.product(range(2), repeat=2):
        v = np.zeros((2, 2, 2, 2))
        v[:, :, x, y] = 1.0
        rows.append(v.ravel())
    for a, x in itertools.product(range(2), repeat=2):
        v = np.zeros((2, 2, 2, 2))
        v[a, :, x, 0] = 1.0
        v[a, :, x, 1] = -1.0
        rows.append(v.ravel())
    for b, y in itertools.product(range(2), repeat=2):
        v = np.zeros((2, 2, 2, 2))
        v[:, b, 0, y] = 1.0
        v[:, b, 1, y] = -1.0
        rows.append(v.ravel())
    return np.array(rows)


def _projector_onto_constraints() -> np.ndarray:
    basis = _constraint_functionals()
    u, sv, _ = np.linalg.svd(basis.T, full_matrices=False)
    rank = int((sv > 1e-12).sum())
    q = u[:, :rank]
    return q @ q.T


_CONSTRAINT_PROJECTOR = _projector_onto_constraints()


def canonical_bell(expr: BellExpression) -> BellExpression:
    """Unique zero-signalling representative: the coefficient vector is
    projected orthogonally (Euclidean inner product) onto the complement of
    the span of the normalisation and signalling functionals.  Idempotent;
    on no-signalling behaviours the value changes only by the constant that
    the removed normalisation component contributed.  Cached bounds are
    dropped since they are representation-dependent."""
    flat = expr.c.ravel()
    projected = flat - _CONSTRAINT_PROJECTOR @ flat
    return BellExpression(projected.reshape(expr.c.shape))


@dataclass(frozen=True)
class GuessingResult:
    value: float                  # guessing probability G in (0, 1]
    chi: InputPairSet
    level: int
    raw_expression: BellExpression | None = None
    canonical_expression: BellExpression | None = None
    diagnostics: dict | None = None

    @property
    def bits(self) -> float:
        """-log2 G, the certified randomness of the constraint."""
        return -float(np.log2(self.value))


def _block_keys(chi: InputPairSet):
    return [(alpha, beta, gamma, delta)
            for gamma, delta in chi.sorted_pairs()
            for alpha, beta in itertools.product(range(2), repeat=2)]


def _dominance_rows(builder: conic.ProgramBuilder, s: npa.MomentStructure,
                    key, hook_cols, hook_coeffs_of):
    """Rows certifying that (hooked functional - guessed entry) is
    nonnegative on the relaxation cone, via one PSD multiplier.  Returns the
    row indices, ordered by free moment; their duals are the adversary's
    optimal block for this entry."""
    alpha, beta, gamma, delta = key
    lam = npa.attach_dual_block(builder, s)
    rows = []
    for k in range(s.n_vars):
        cols, coeffs = lam.adjoint_term(k)
        cols = list(cols) + list(hook_cols)
        coeffs = list(coeffs) + [-c[k] for c in hook_coeffs_of]
        rows.append(builder.add_equality(
            cols, coeffs, -s.embedding[alpha, beta, gamma, delta, k]))
    return rows


def guessing_full(P: Behaviour, chi: InputPairSet, s: npa.MomentStructure,
                  tol: conic.ToleranceConfig = RB_TOL) -> GuessingResult:
    """Complete-information guessing probability and the optimised Bell
    expression.

    Solved in certificate form: minimise I(P) over Bell expressions I that
    dominate every guessed entry on the relaxation cone (each dominance
    constraint carries one PSD multiplier).  This side has a strictly
    feasible point, the optimal I is the tailored expression itself, and
    the constraint duals are the adversary's optimal unnormalised blocks.
    Weak duality keeps the reported value on the safe (adversary-favouring)
    side of the solver gap.

    Raises InfeasibleBehaviour when P has no completion at this level
    (typically un-regularised signalling frequencies)."""
    sig = signalling_norm(P.p)
    if sig > SIGNALLING_GUARD:
        raise InfeasibleBehaviour(
            f"behaviour is signalling (norm {sig:.2e}); regularise it first")

    builder = conic.ProgramBuilder()
    y0 = builder.new_variables(16)
    y_cols = list(range(y0, y0 + 16))
    # y as a moment functional: rows of the embedding, one per entry (abxy)
    y_mom = [s.embedding[a, b, x, y]
             for a, b, x, y in itertools.product(range(2), repeat=4)]

    row_map = {}
    for key in _block_keys(chi):
        row_map[key] = _dominance_rows(builder, s, key, y_cols, y_mom)
    builder.add_objective(y_cols, P.p.ravel())

    sol = conic.solve(builder.build("min"), tol)
    if sol.status == "unbounded":
        raise InfeasibleBehaviour(
            "no moment completion consistent with the behaviour at this level")
    if sol.status != "optimal":
        raise SolverFailure(f"guessing_full: {sol.status} ({sol.message})")

    c_raw = np.array(sol.x[y0:y0 + 16]).reshape(2, 2, 2, 2)
    raw = BellExpression(c_raw)
    canonical = canonical_bell(raw)
    g = float(sol.objective)

    block_behaviours = {}
    recon = np.zeros((2, 2, 2, 2))
    for key, rows in row_map.items():
        m = np.array([sol.eq_duals[r] for r in rows])
        if m[s.unit_index] < 0:
            m = -m
        p_block = s.behaviour_of(m)
        block_behaviours[key] = p_block
        recon += p_block
    diagnostics = {
        "solver_status": sol.message or "optimal",
        "gap": sol.gap,
        "duality_residual": abs(float(np.sum(c_raw * P.p)) - g),
        "decomposition_residual": float(np.abs(recon - P.p).max()),
        "block_behaviours": block_behaviours,
    }
    return GuessingResult(g, chi, s.level, raw, canonical, diagnostics)


# Within this relative distance of a quantum endpoint the pinned program has
# (numerically) no interior; the optimum is read off the extremal completion
# instead of solved for.
_ENDPOINT_ZONE = 1e-6


def _endpoint_guess(expr: BellExpression, chi: InputPairSet,
                    s: npa.MomentStructure, sense: str) -> GuessingResult:
    """Guessing probability at a quantum endpoint: every block of any
    feasible decomposition is supported on the extremal face, so the best
    guessed entry of an extremal completion is attainable.  It equals the
    optimum whenever the extremiser is unique and never exceeds it, which
    keeps the derived randomness values conservative."""
    value, m = npa.extremal_completion(expr, s, sense)
    p = s.behaviour_of(m)
    g = max(p[alpha, beta, gamma, delta]
            for gamma, delta in chi
            for alpha in range(2) for beta in range(2))
    diagnostics = {"solver_status": "endpoint-extremal", "gap": 0.0,
                   "target": value}
    return GuessingResult(float(g), chi, s.level, diagnostics=diagnostics)


def guessing_bell(expr: BellExpression, istar: float, chi: InputPairSet,
                  s: npa.MomentStructure,
                  tol: conic.ToleranceConfig = RB_TOL) -> GuessingResult:
    """Guessing probability among relaxation members whose Bell value is
    istar.  Raises InfeasibleValue outside the attainable range."""
    imax = expr.quantum_max if expr.quantum_max is not None else npa.max_bell(expr, s)
    imin = expr.quantum_min if expr.quantum_min is not None else npa.min_bell(expr, s)
    span = max(1.0, imax - imin)
    if istar > imax + 1e-6 * span or istar < imin - 1e-6 * span:
        raise InfeasibleValue(
            f"value {istar:.6g} outside the attainable range [{imin:.6g}, {imax:.6g}]")
    if istar >= imax - _ENDPOINT_ZONE * span:
        return _endpoint_guess(expr, chi, s, "max")
    if istar <= imin + _ENDPOINT_ZONE * span:
        return _endpoint_guess(expr, chi, s, "min")

    # Certificate form: minimise y1 * istar + y2 over scalars such that
    # y1 * expr + y2 * trace dominates every guessed entry on the cone.
    # Solved at unit coefficient scale; the optimum is scale-invariant
    # because istar rescales along with the expression.
    scale = max(float(np.abs(expr.c).max()), 1e-12)
    builder = conic.ProgramBuilder()
    y1 = builder.new_variables(1)
    y2 = builder.new_variables(1)
    c_mom = np.einsum("abxy,abxyk->k", expr.c / scale, s.embedding)
    t_mom = np.zeros(s.n_vars)
    t_mom[s.unit_index] = 1.0
    for key in _block_keys(chi):
        _dominance_rows(builder, s, key, [y1, y2], [c_mom, t_mom])
    builder.add_objective([y1, y2], [istar / scale, 1.0])

    sol = conic.solve(builder.build("min"), tol)
    if sol.status in ("infeasible", "unbounded"):
        raise InfeasibleValue(
            f"value {istar:.6g} admits no decomposition at level {s.level}")
    if sol.status != "optimal":
        raise SolverFailure(f"guessing_bell: {sol.status} ({sol.message})")
    diagnostics = {"solver_status": sol.message or "optimal", "gap": sol.gap,
                   "target": istar,
                   "slope": float(sol.x[y1]), "offset": float(sol.x[y2])}
    return GuessingResult(float(sol.objective), chi, s.level, diagnostics=diagnostics)


@dataclass(frozen=True)
class ChiBudget:
    """Raw-phase parameters available when the input subset is chosen."""

    n_raw: int
    pi_star: float = 0.9
    eps: float = 1e-6
    eps_prime: float = 1e-6
    grid_m: int = 999
    n_tot: int | None = None


@dataclass(frozen=True)
class ChiSelection:
    chi: InputPairSet
    decision: dict


def biased_pi(chi: InputPairSet, pi_star: float) -> np.ndarray:
    """Input distribution for the raw phase: uniform for the full set,
    pi_star on the selected pair and uniform remainder for a singleton."""
    if len(chi) == 4:
        return np.full((2, 2), 0.25)
    if len(chi) != 1:
        raise ValueError("biased distributions are defined for singletons")
    ((x, y),) = chi
    pi = np.full((2, 2), (1.0 - pi_star) / 3.0)
    pi[x, y] = pi_star
    return pi


def select_chi(P_reg: Behaviour, s: npa.MomentStructure,
               budget: ChiBudget) -> ChiSelection:
    """Evaluate the complete-information program for every singleton and for
    the full input set; keep the full set unless the projected bound for the
    best singleton (under the configured bias) beats it."""
    from . import bound  # deferred: bound builds on this module

    full = guessing_full(P_reg, CHI_ALL, s)
    singles = {
        (x, y): guessing_full(P_reg, InputPairSet.single(x, y), s)
        for x, y in itertools.product(range(2), repeat=2)
    }
    # ties at solver-noise scale break lexicographically on (x, y)
    best_pair = min(singles, key=lambda k: (round(singles[k].value, 7), k))

    n_tot = budget.n_tot if budget.n_tot is not None else budget.n_raw

    def projected(result: GuessingResult, pi: np.ndarray) -> float:
        expr = npa.with_quantum_bounds(result.canonical_expression, s)
        plugin = bell_value(expr, P_reg)
        return bound.projected_rate(
            expr, result.chi, s, pi, plugin,
            n=budget.n_raw, eps=budget.eps, eps_prime=budget.eps_prime,
            grid_m=budget.grid_m, n_tot=n_tot,
        )

    rate_all = projected(full, biased_pi(CHI_ALL, budget.pi_star))
    single = singles[best_pair]
    rate_one = projected(single, biased_pi(single.chi, budget.pi_star))

    chosen = single.chi if rate_one > rate_all else CHI_ALL
    decision = {
        "g_full_all": full.value,
        "g_full_singletons": {f"{x}{y}": singles[(x, y)].value
                              for (x, y) in sorted(singles)},
        "best_singleton": best_pair,
        "projected_rate_all": rate_all,
        "projected_rate_one": rate_one,
        "pi_star": budget.pi_star,
        "chosen": sorted(chosen),
    }
    return ChiSelection(chosen, decision)
