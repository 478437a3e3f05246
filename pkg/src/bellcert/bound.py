"""Finite-statistics min-entropy bound for a realised run.

Given a Bell expression with its local and quantum bounds, the observed
average violation computed with the known input distribution, and the
confidence parameters (eps, eps_prime), the realised data earns

    n * H(J_m - mu) - gamma * eta - log2(1/eps_prime)

bits of min-entropy, where H is the randomness-bounding function of the
expression, J_m the realised violation threshold on a uniform grid from the
local bound to the quantum maximum, mu the statistical-confidence offset,
gamma the number of rounds whose input pair lies outside the certified
subset and eta the worst-case randomness over the quantum range.  The
guarantee holds up to the two confidence parameters: with probability at
least 1 - eps_prime (for distributions eps-close to the true one) either
the realised threshold event was atypical or the entropy bound holds.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
import json

import numpy as np

from . import certify, npa
from .behaviour import CHI_ALL, BellExpression, CountTable, InputPairSet
from .errors import InfeasibleValue, MissingBounds

_structure_cache: dict[int, npa.MomentStructure] = {}


def structure_for(level: int) -> npa.MomentStructure:
    if level not in _structure_cache:
        _structure_cache[level] = npa.build_structure(level)
    return _structure_cache[level]


@dataclass(frozen=True)
class BoundConfig:
    eps: float = 1e-6
    eps_prime: float = 1e-6
    grid_m: int = 999  # M: thresholds J_0 .. J_M, i.e. M+1 grid points
    level: int = 2
    chi: InputPairSet = field(default_factory=lambda: CHI_ALL)
    pi: np.ndarray = field(default_factory=lambda: np.full((2, 2), 0.25))

    def __post_init__(self):
        if not (0.0 < self.eps < 1.0 and 0.0 < self.eps_prime < 1.0):
            raise ValueError("eps and eps_prime must lie in (0, 1)")
        if self.grid_m < 1:
            raise ValueError("the grid needs at least two thresholds")
        pi = np.asarray(self.pi, dtype=float)
        if pi.shape != (2, 2) or pi.min() <= 0.0 or abs(pi.sum() - 1.0) > 1e-9:
            raise ValueError("pi must be a strictly positive distribution on inputs")
        pi = pi.copy()
        pi.setflags(write=False)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "chi", InputPairSet(self.chi))


def _require_bounds(expr: BellExpression) -> None:
    if expr.quantum_max is None or expr.quantum_min is None:
        raise MissingBounds("expression has no cached quantum bounds")


def nu(expr: BellExpression, pi) -> float:
    """Statistical sensitivity of the violation estimator: the larger of
    max c/pi - I_Q^- and I_Q^+ - min c/pi."""
    _require_bounds(expr)
    ratios = expr.c / np.asarray(pi, dtype=float)[None, None, :, :]
    return float(max(ratios.max() - expr.quantum_min,
                     expr.quantum_max - ratios.min()))


def mu(nu_value: float, n: int, eps: float) -> float:
    """Confidence offset nu * sqrt(2 ln(1/eps) / n)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return nu_value * math.sqrt(2.0 * math.log(1.0 / eps) / n)


def gamma(inputs, chi: InputPairSet) -> int:
    """Number of rounds whose input pair is outside chi.  Accepts either a
    (2, 2) tally of input pairs or an iterable of (x, y) pairs."""
    arr = np.asarray(inputs)
    if arr.shape == (2, 2):
        total = int(arr.sum())
        inside = sum(int(arr[x, y]) for x, y in chi)
        return total - inside
    return sum(1 for pair in inputs if tuple(pair) not in chi)


# Randomness-bounding values are cached per (expression, chi, level, value):
# the baseline revisits the same grid thresholds run after run.
_rb_cache: dict = {}
_eta_cache: dict = {}


def clear_caches() -> None:
    _rb_cache.clear()
    _eta_cache.clear()


def _rb_key(expr: BellExpression, chi: InputPairSet, level: int, v: float):
    return (expr.c.tobytes(), tuple(chi.sorted_pairs()), level, round(v, 9))


def raw_rb(expr: BellExpression, chi: InputPairSet, s: npa.MomentStructure,
           v: float) -> float:
    """-log2 of the expression-constrained guessing probability, without the
    below-local clamp (used for the eta endpoints).  The certificate-form
    guessing value sits on the adversary-favouring side of the solver gap,
    so the returned randomness never exceeds what the relaxation
    certifies."""
    key = _rb_key(expr, chi, s.level, v)
    if key not in _rb_cache:
        g = certify.guessing_bell(expr, v, chi, s).value
        _rb_cache[key] = -math.log2(min(max(g, 1e-12), 1.0))
    return _rb_cache[key]


def rb_eval(expr: BellExpression, chi: InputPairSet, s: npa.MomentStructure,
            v: float) -> float:
    """Randomness-bounding function H(v): zero at or below the local bound,
    -log2 G elsewhere on the quantum range.  Convex and non-decreasing on
    [I_L, I_Q^+] by construction."""
    _require_bounds(expr)
    span = max(1.0, expr.quantum_max - expr.quantum_min)
    if v > expr.quantum_max + 1e-6 * span or v < expr.quantum_min - 1e-6 * span:
        raise InfeasibleValue(f"violation {v:.6g} outside the quantum range")
    if expr.local_bound is None:
        raise MissingBounds("expression has no cached local bound")
    if v <= expr.local_bound:
        return 0.0
    return raw_rb(expr, chi, s, v)


def eta(expr: BellExpression, chi: InputPairSet, s: npa.MomentStructure) -> float:
    """Worst-case randomness over the quantum range: the larger RB value at
    the two quantum endpoints."""
    _require_bounds(expr)
    key = (expr.c.tobytes(), tuple(chi.sorted_pairs()), s.level)
    if key not in _eta_cache:
        _eta_cache[key] = max(
            raw_rb(expr, chi, s, expr.quantum_max),
            raw_rb(expr, chi, s, expr.quantum_min),
        )
    return _eta_cache[key]


def observed_violation(expr: BellExpression, counts: CountTable) -> float:
    """I-hat: sum c_abxy N_abxy / (n pi_xy), using the chosen input
    distribution in the denominator rather than the realised tallies."""
    return float(np.sum(expr.c * counts.counts / (counts.n * counts.pi[None, None, :, :])))


def thresholds(i_local: float, i_qmax: float, grid_m: int) -> np.ndarray:
    """Uniform grid J_0 = I_L < ... < J_M = I_Q^+."""
    return np.linspace(i_local, i_qmax, grid_m + 1)


@dataclass(frozen=True)
class CertificateReport:
    """Everything needed to restate (and re-derive) the certified bound."""

    expression: BellExpression      # canonical form with cached bounds
    chi: InputPairSet
    pi: np.ndarray
    n: int                          # rounds entering the bound (raw phase)
    n_total: int                    # rounds consumed overall (rate basis)
    eps: float
    eps_prime: float
    grid_m: int
    level: int
    i_hat: float
    bin_index: int | None
    threshold: float | None         # J_m of the realised bin
    h_value: float
    nu_value: float
    mu_value: float
    gamma_value: int
    eta_value: float
    eta_skipped: bool
    bound_bits: float
    rate: float
    regime: str
    counts: CountTable | None = None
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "expression": json.loads(self.expression.to_json()),
            "chi": self.chi.sorted_pairs(),
            "pi": self.pi.tolist(),
            "n": self.n,
            "nTotal": self.n_total,
            "eps": self.eps,
            "epsPrime": self.eps_prime,
            "gridM": self.grid_m,
            "level": self.level,
            "iHat": self.i_hat,
            "binIndex": self.bin_index,
            "threshold": self.threshold,
            "hValue": self.h_value,
            "nu": self.nu_value,
            "mu": self.mu_value,
            "gamma": self.gamma_value,
            "eta": self.eta_value,
            "etaSkipped": self.eta_skipped,
            "boundBits": self.bound_bits,
            "rate": self.rate,
            "regime": self.regime,
            "counts": json.loads(self.counts.to_json()) if self.counts else None,
            "metadata": self.metadata,
        }
        return json.dumps(payload, indent=2)

    @staticmethod
    def from_json(text: str) -> "CertificateReport":
        d = json.loads(text)
        counts = None
        if d.get("counts") is not None:
            counts = CountTable.from_json(json.dumps(d["counts"]))
        return CertificateReport(
            expression=BellExpression.from_json(json.dumps(d["expression"])),
            chi=InputPairSet(tuple(p) for p in d["chi"]),
            pi=np.array(d["pi"]),
            n=d["n"],
            n_total=d["nTotal"],
            eps=d["eps"],
            eps_prime=d["epsPrime"],
            grid_m=d["gridM"],
            level=d["level"],
            i_hat=d["iHat"],
            bin_index=d["binIndex"],
            threshold=d["threshold"],
            h_value=d["hValue"],
            nu_value=d["nu"],
            mu_value=d["mu"],
            gamma_value=d["gamma"],
            eta_value=d["eta"],
            eta_skipped=d["etaSkipped"],
            bound_bits=d["boundBits"],
            rate=d["rate"],
            regime=d["regime"],
            counts=counts,
            metadata=d.get("metadata", {}),
        )


def _assemble(expr, chi, pi, n, n_total, eps, eps_prime, grid_m, level,
              i_hat, gamma_value, h_of, eta_of, counts=None, metadata=None):
    """Shared skeleton: grid, bin selection, penalty terms, clamping.
    h_of(arg) and eta_of() supply the SDP-backed values so that offline
    recomputation can inject stored ones."""
    i_local = expr.local_bound
    i_qmax = expr.quantum_max
    nu_value = nu(expr, pi)
    mu_value = mu(nu_value, n, eps)
    penalty_tail = math.log2(1.0 / eps_prime)

    regime_notes = []
    bin_index = None
    threshold = None
    h_value = 0.0
    eta_value = 0.0
    eta_skipped = True

    if i_qmax - i_local <= 1e-12:
        regime_notes.append("degenerate-gap")
    elif i_hat < i_local:
        regime_notes.append("no-violation")
    else:
        grid = thresholds(i_local, i_qmax, grid_m)
        if i_hat >= i_qmax:
            bin_index = grid_m - 1
        else:
            bin_index = min(int((i_hat - i_local) / (i_qmax - i_local) * grid_m),
                            grid_m - 1)
        threshold = float(grid[bin_index])
        arg = threshold - mu_value
        if arg <= i_local:
            regime_notes.append("threshold-below-local")
        else:
            h_value = h_of(arg)
    if gamma_value > 0:
        eta_value = eta_of()
        eta_skipped = False

    raw_bound = n * h_value - gamma_value * eta_value - penalty_tail
    bound_bits = max(0.0, raw_bound)
    if raw_bound < 0.0:
        regime_notes.append("clamped-to-zero")
    regime = ",".join(regime_notes) if regime_notes else "certified"

    return CertificateReport(
        expression=expr,
        chi=chi,
        pi=pi,
        n=n,
        n_total=n_total,
        eps=eps,
        eps_prime=eps_prime,
        grid_m=grid_m,
        level=level,
        i_hat=i_hat,
        bin_index=bin_index,
        threshold=threshold,
        h_value=h_value,
        nu_value=nu_value,
        mu_value=mu_value,
        gamma_value=gamma_value,
        eta_value=eta_value,
        eta_skipped=eta_skipped,
        bound_bits=bound_bits,
        rate=bound_bits / n_total,
        regime=regime,
        counts=counts,
        metadata=metadata or {},
    )


def min_entropy_bound(expr: BellExpression, counts: CountTable,
                      cfg: BoundConfig, n_total: int | None = None,
                      metadata: dict | None = None) -> CertificateReport:
    """Apply the theorem to a realised raw phase.

    expr must carry its local bound and quantum bounds (canonical form).
    counts is the raw-phase count table; its input tally supplies gamma.
    The grid spans [I_L, I_Q^+]; the realised bin is the one containing
    I-hat (clamped to the top bin when I-hat exceeds the quantum maximum);
    only that bin's RB value is ever computed.
    """
    _require_bounds(expr)
    if expr.local_bound is None:
        raise MissingBounds("expression has no cached local bound")
    if not np.allclose(counts.pi, cfg.pi, atol=1e-12):
        raise ValueError("count table was drawn under a different input distribution")

    s = structure_for(cfg.level)
    i_hat = observed_violation(expr, counts)
    gamma_value = gamma(counts.input_tally(), cfg.chi)
    return _assemble(
        expr, cfg.chi, cfg.pi, counts.n,
        n_total if n_total is not None else counts.n,
        cfg.eps, cfg.eps_prime, cfg.grid_m, cfg.level,
        i_hat, gamma_value,
        h_of=lambda arg: rb_eval(expr, cfg.chi, s, arg),
        eta_of=lambda: eta(expr, cfg.chi, s),
        counts=counts, metadata=metadata,
    )


def recompute_report(report: CertificateReport) -> CertificateReport:
    """Re-derive a report from its own serialised ingredients without any
    solver call: stored H and eta values are injected, everything else is
    recomputed from the counts.  Emitted reports reproduce themselves
    exactly."""
    if report.counts is None:
        raise ValueError("report carries no counts to recompute from")
    i_hat = observed_violation(report.expression, report.counts)
    gamma_value = gamma(report.counts.input_tally(), report.chi)
    return _assemble(
        report.expression, report.chi, report.pi, report.n, report.n_total,
        report.eps, report.eps_prime, report.grid_m, report.level,
        i_hat, gamma_value,
        h_of=lambda arg: report.h_value,
        eta_of=lambda: report.eta_value,
        counts=report.counts, metadata=report.metadata,
    )


def projected_rate(expr: BellExpression, chi: InputPairSet,
                   s: npa.MomentStructure, pi, plugin_violation: float,
                   n: int, eps: float, eps_prime: float, grid_m: int,
                   n_tot: int) -> float:
    """Theorem right-hand side at a plug-in violation, used before the raw
    phase to compare candidate input subsets.  gamma is taken at its
    expectation n * (1 - pi(chi))."""
    _require_bounds(expr)
    if expr.local_bound is None:
        raise MissingBounds("expression has no cached local bound")
    pi = np.asarray(pi, dtype=float)
    expected_outside = n * (1.0 - sum(pi[x, y] for x, y in chi))
    i_local = expr.local_bound
    i_qmax = expr.quantum_max
    if i_qmax - i_local <= 1e-12:
        return 0.0
    i_hat = min(max(plugin_violation, i_local), i_qmax)
    nu_value = nu(expr, pi)
    mu_value = mu(nu_value, n, eps)
    grid = thresholds(i_local, i_qmax, grid_m)
    bin_index = min(int((i_hat - i_local) / (i_qmax - i_local) * grid_m), grid_m - 1)
    arg = float(grid[bin_index]) - mu_value
    h_value = 0.0 if arg <= i_local else raw_rb(expr, chi, s, arg)
    eta_value = eta(expr, chi, s) if expected_outside > 0 else 0.0
    raw_bound = n * h_value - expected_outside * eta_value - math.log2(1.0 / eps_prime)
    return max(0.0, raw_bound) / n_tot
