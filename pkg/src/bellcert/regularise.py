"""Projection of observed frequencies onto the moment relaxation.

Raw frequencies are almost always signalling at finite n, so the guessing
programs reject them.  The two projections offered here return the closest
member of the relaxation: maximum-likelihood (conditional KL divergence) or
least-squares (Euclidean distance).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import conic, npa
from .behaviour import Behaviour, CountTable, frequencies_from_counts
from .errors import SolverFailure

LOG2 = math.log(2.0)


@dataclass(frozen=True)
class RegularisationResult:
    behaviour: Behaviour
    objective: float  # KL divergence in bits (ml) or Euclidean distance (ls)
    method: str       # "ml" | "ls"
    level: int
    diagnostics: dict

    def metadata(self) -> dict:
        return {
            "method": self.method,
            "objective": self.objective,
            "level": self.level,
            "margins": {
                k: self.diagnostics.get(k)
                for k in ("moment_min_eig", "clip_shift")
                if k in self.diagnostics
            },
        }


def kl_divergence_bits(phat: Behaviour, p: Behaviour, tally_weights: np.ndarray) -> float:
    """sum_abxy (N_xy/n) phat log2(phat/p) with the 0 log 0 = 0 convention.

    tally_weights is the (2, 2) array N_xy / n.
    """
    total = 0.0
    for a, b, x, y in itertools.product(range(2), repeat=4):
        ph = phat.p[a, b, x, y]
        if ph <= 0.0:
            continue
        total += tally_weights[x, y] * ph * math.log2(ph / p.p[a, b, x, y])
    return total


def _finalise_behaviour(raw: np.ndarray, diagnostics: dict) -> Behaviour:
    """Rescale the solver iterate onto exactly-normalised conditionals.

    The returned moment block carries its trace only to solver tolerance;
    dividing by the per-input sums is the projective rescaling that keeps
    the point inside the relaxation.  Boundary entries in a narrow negative
    band (solver noise) are clipped first; the total shift is recorded."""
    arr = np.array(raw)
    if arr.min() < -1e-6:
        raise SolverFailure(f"regularised point has entry {arr.min():.2e} < 0")
    arr = np.clip(arr, 0.0, None)
    sums = arr.sum(axis=(0, 1))
    arr = arr / sums[None, None, :, :]
    diagnostics["clip_shift"] = float(np.abs(arr - raw).max())
    return Behaviour(arr)


def _solve_and_extract(builder: conic.ProgramBuilder, blk, sense: str,
                       tol: conic.ToleranceConfig):
    sol = conic.solve(builder.build(sense), tol)
    if sol.status != "optimal":
        raise SolverFailure(f"regularisation solve failed: {sol.status} ({sol.message})")
    m = sol.x[blk.offset:blk.offset + blk.structure.n_vars]
    diagnostics = {
        "solver_status": sol.message or "optimal",
        "iterations": sol.iterations,
        "gap": sol.gap,
        "moment_min_eig": float(np.linalg.eigvalsh(blk.structure.moment_matrix(m)).min()),
    }
    return sol, m, diagnostics


def regularise_ml(t: CountTable, s: npa.MomentStructure,
                  tol: conic.ToleranceConfig = npa.NPA_TOL) -> RegularisationResult:
    """Minimiser of the conditional KL divergence from the observed
    frequencies over the relaxation.  Weights are N_xy / n, exactly as the
    divergence is defined on count data."""
    phat = frequencies_from_counts(t)
    weights = t.counts / t.n  # (N_xy/n) * phat(ab|xy)

    builder = conic.ProgramBuilder()
    blk = npa.attach_block(builder, s)
    builder.add_equality([blk.trace_index], [1.0], 1.0)
    one = builder.constant(1.0)

    for a, b, x, y in itertools.product(range(2), repeat=4):
        w = weights[a, b, x, y]
        if w <= 0.0:
            continue  # zero-count cells contribute nothing
        p_var = builder.new_variables(1)
        cols, coeffs = blk.behaviour_term(a, b, x, y)
        builder.add_equality(list(cols) + [p_var], list(coeffs) + [-1.0], 0.0)
        # neg_log >= -ln p, via 1 * ln(1/p) <= neg_log
        neg_log = builder.new_variables(1)
        builder.add_rel_entropy(p_var, one, neg_log)
        builder.add_objective([neg_log], [w])

    _, m, diagnostics = _solve_and_extract(builder, blk, "min", tol)
    p_reg = _finalise_behaviour(blk.structure.behaviour_of(m), diagnostics)
    tally_weights = t.input_tally() / t.n
    objective = kl_divergence_bits(phat, p_reg, tally_weights)
    return RegularisationResult(p_reg, objective, "ml", s.level, diagnostics)


def regularise_ls(t: CountTable, s: npa.MomentStructure,
                  tol: conic.ToleranceConfig = npa.NPA_TOL) -> RegularisationResult:
    """Minimiser of the Euclidean distance to the observed frequencies over
    the relaxation; unique by strict convexity of the squared distance."""
    phat = frequencies_from_counts(t)

    builder = conic.ProgramBuilder()
    blk = npa.attach_block(builder, s)
    builder.add_equality([blk.trace_index], [1.0], 1.0)

    # Residual variables d = phat - P(m), with ||d|| <= t_norm imposed by
    # the arrow-head matrix [[t, d'], [d, t*I]] being PSD.
    t_norm = builder.new_variables(1)
    d0 = builder.new_variables(16)
    for k, (a, b, x, y) in enumerate(itertools.product(range(2), repeat=4)):
        cols, coeffs = blk.behaviour_term(a, b, x, y)
        builder.add_equality(list(cols) + [d0 + k], list(coeffs) + [1.0],
                             phat.p[a, b, x, y])
    arrow = np.full((17, 17), -1, dtype=np.int64)
    arrow[0, 0] = t_norm
    for k in range(16):
        arrow[0, k + 1] = arrow[k + 1, 0] = d0 + k
        arrow[k + 1, k + 1] = t_norm
    builder.add_psd_block(arrow)
    builder.add_objective([t_norm], [1.0])

    _, m, diagnostics = _solve_and_extract(builder, blk, "min", tol)
    p_reg = _finalise_behaviour(blk.structure.behaviour_of(m), diagnostics)
    objective = float(np.linalg.norm(phat.p - p_reg.p))
    return RegularisationResult(p_reg, objective, "ls", s.level, diagnostics)


def regularise(t: CountTable, s: npa.MomentStructure, method: str,
               tol: conic.ToleranceConfig = npa.NPA_TOL) -> RegularisationResult:
    if method == "ml":
        return regularise_ml(t, s, tol)
    if method == "ls":
        return regularise_ls(t, s, tol)
    raise ValueError(f"unknown regularisation method {method!r}")
