"""Mean-dynamics analysis of off-policy TD(0) with linear features.

The expected update is ``A w + b`` with

    A = Phi^T (gamma Qhat P - Qhat) Phi,    b = Phi^T Qhat r,

where ``P`` is the chain being evaluated and ``Qhat`` the stationary law of
the chain that generates the samples. Convergence requires ``A`` to be
negative definite; this module checks that directly and through the
closed-form sufficient bounds on ``gamma``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .chains import (
    ChainError,
    MarkovChain,
    has_reverse_support,
    perturbation_factor,
    same_structure,
    simple_walk_ratio,
)

ND_TOL = 1e-10
RANK_TOL = 1e-8
SCHEMA_VERSION = 1


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class FeatureSetup:
    """Feature matrix ``phi`` (n x K), rewards ``r`` (n) and discount ``gamma``."""

    phi: np.ndarray
    r: np.ndarray
    gamma: float

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        r = np.asarray(self.r, dtype=float)
        if phi.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {phi.shape}")
        n, k = phi.shape
        if k > n:
            raise ValueError(f"more features ({k}) than states ({n})")
        if r.shape != (n,):
            raise ValueError(f"reward vector has shape {r.shape}, expected ({n},)")
        check_full_rank(phi)
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie strictly inside (0, 1), got {self.gamma}")
        phi.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n(self) -> int:
        return self.phi.shape[0]

    @property
    def k(self) -> int:
        return self.phi.shape[1]

    def with_gamma(self, gamma: float) -> FeatureSetup:
        return FeatureSetup(self.phi, self.r, gamma)


def check_full_rank(phi: np.ndarray, rtol: float = RANK_TOL) -> None:
    s = np.linalg.svd(phi, compute_uv=False)
    if s[-1] <= rtol * s[0]:
        raise ValueError(f"feature matrix is rank deficient (singular values {s})")


def _check_pair(original: MarkovChain, perturbed: MarkovChain, n: int | None = None) -> None:
    if not same_structure(original, perturbed):
        raise ChainError("original and perturbed chains must share the same structure")
    if n is not None and original.n != n:
        raise ValueError(f"features cover {n} states but chains have {original.n}")


def stability_matrix(P: np.ndarray, q_hat: np.ndarray, phi: np.ndarray, gamma: float) -> np.ndarray:
    Qh = np.diag(q_hat)
    return phi.T @ (gamma * Qh @ P - Qh) @ phi


def assemble_A_b(original: MarkovChain, perturbed: MarkovChain, setup: FeatureSetup):
    _check_pair(original, perturbed, setup.n)
    A = stability_matrix(original.P, perturbed.q, setup.phi, setup.gamma)
    b = setup.phi.T @ (perturbed.q * setup.r)
    return A, b


def symmetrized_D(original: MarkovChain, perturbed: MarkovChain, gamma: float) -> np.ndarray:
    """Symmetric matrix with the same quadratic form as ``Qhat - gamma Qhat P``."""
    Qh = perturbed.Q
    QP = Qh @ original.P
    return Qh - 0.5 * gamma * (QP + QP.T)


def is_negative_definite(A, tol: float = ND_TOL) -> tuple[bool, float]:
    """Return ``(verdict, margin)``; ``margin`` is the smallest eigenvalue of ``-(A + A^T)/2``."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    margin = float(-np.linalg.eigvalsh(0.5 * (A + A.T))[-1])
    return margin > tol, margin


def lemma1_gamma_bounds(original: MarkovChain, perturbed: MarkovChain) -> np.ndarray:
    """Per-state discount bounds from diagonal dominance of ``D``.

    ``gamma`` below the minimum entry makes ``D`` strictly diagonally
    dominant, hence ``A`` negative definite for every full-rank ``phi``.
    Reversibility is not needed here.
    """
    _check_pair(original, perturbed)
    q_hat = perturbed.q
    inflow = q_hat @ original.P
    return 2.0 / (1.0 + inflow / q_hat)


def theorem2_bound(c: float) -> float:
    if c < 1:
        raise ValueError(f"perturbation factor must be >= 1, got {c}")
    return 2.0 / (c + 1.0)


def theorem2_verdict(gamma: float, c: float, rtol: float = 1e-12) -> str:
    bound = theorem2_bound(c)
    if math.isclose(gamma, bound, rel_tol=rtol, abs_tol=0.0):
        return "boundary, no guarantee"
    return "guaranteed" if gamma < bound else "no guarantee"


def corollary1_bound(rho: float, delta: float) -> float:
    """Discount bound for two constant-ratio simple walks, ``delta = rho_hat / rho``."""
    if rho <= 0 or delta <= 0:
        raise ValueError("rho and delta must be positive")
    return min(
        2.0 * (rho + 1.0) / (rho + 2.0 + delta * rho),
        2.0 * (rho + 1.0) / (2.0 * rho + 1.0 + 1.0 / delta),
    )


def corollary1_limits(delta: float) -> tuple[float, float]:
    """Corollary bound as ``rho -> inf`` and as ``rho -> 0``."""
    return min(2.0 / (1.0 + delta), 1.0), min(1.0, 2.0 * delta / (1.0 + delta))


class NDThreshold(NamedTuple):
    gamma: float
    never_nd: bool = False
    method: str = "bisection"


def max_nd_gamma(
    original: MarkovChain,
    perturbed: MarkovChain,
    phi,
    tol: float = 1e-6,
    nd_tol: float = ND_TOL,
) -> NDThreshold:
    """Largest discount in (0, 1) for which ``A`` stays negative definite.

    Bisects the upper edge of the negative-definite interval, then checks
    the answer against a 64-point grid and falls back to a grid scan if the
    region turns out not to be an interval.
    """
    phi = np.asarray(phi, dtype=float)
    _check_pair(original, perturbed, phi.shape[0])
    P, q_hat = original.P, perturbed.q

    def nd(g: float) -> bool:
        return is_negative_definite(stability_matrix(P, q_hat, phi, g), nd_tol)[0]

    if not nd(tol):
        return NDThreshold(0.0, never_nd=True)
    hi = 1.0 - tol
    if nd(hi):
        lo = hi = 1.0
    else:
        lo = tol
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if nd(mid):
                lo = mid
            else:
                hi = mid

    grid = (np.arange(64) + 0.5) / 64
    consistent = all(nd(g) == (g <= lo) for g in grid if g <= lo or g >= hi)
    if consistent:
        return NDThreshold(lo if lo < 1.0 else 1.0)

    fine = np.linspace(tol, 1.0 - tol, 100_001)
    best = 0.0
    for g in fine:
        if not nd(g):
            break
        best = float(g)
    return NDThreshold(best, never_nd=best == 0.0, method="grid")


def td_fixed_point(A, b) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.linalg.cond(A) > 1e14:
        raise SingularSystemError("A is singular; reduce gamma until A is negative definite")
    return np.linalg.solve(A, -b)


def exact_value_function(original: MarkovChain, r, gamma: float) -> np.ndarray:
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie strictly inside (0, 1), got {gamma}")
    return np.linalg.solve(np.eye(original.n) - gamma * original.P, np.asarray(r, dtype=float))


def projected_bellman_error(w, original: MarkovChain, perturbed: MarkovChain, setup: FeatureSetup) -> float:
    """``|| Pi (r + gamma P Phi w) - Phi w ||`` in the ``Qhat``-weighted norm."""
    _check_pair(original, perturbed, setup.n)
    phi, q_hat = setup.phi, perturbed.q
    v = phi @ np.asarray(w, dtype=float)
    target = setup.r + setup.gamma * original.P @ v
    gram = phi.T @ (q_hat[:, None] * phi)
    resid = phi @ np.linalg.solve(gram, phi.T @ (q_hat * target)) - v
    return float(math.sqrt(max(resid @ (q_hat * resid), 0.0)))


@dataclass
class StabilityReport:
    gamma: float
    A: np.ndarray
    b: np.ndarray
    D: np.ndarray
    min_sym_eig: float
    is_nd: bool
    lemma1_bounds: np.ndarray
    lemma1_min: float
    perturbation_factor: float | None
    theorem2_bound: float | None
    theorem2_verdict: str | None
    corollary1_bound: float | None
    max_nd_gamma: float
    max_nd_flag: bool
    w_star: np.ndarray | None
    pbe_at_w_star: float | None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION}
        for key, value in asdict(self).items():
            out[key] = value.tolist() if isinstance(value, np.ndarray) else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> StabilityReport:
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {data.get('schema_version')!r}")
        kw = {k: v for k, v in data.items() if k != "schema_version"}
        for key in ("A", "b", "D", "lemma1_bounds", "w_star"):
            if kw.get(key) is not None:
                kw[key] = np.asarray(kw[key], dtype=float)
        return cls(**kw)


def analyze(
    original: MarkovChain,
    perturbed: MarkovChain,
    setup: FeatureSetup,
    tol: float = 1e-6,
) -> StabilityReport:
    A, b = assemble_A_b(original, perturbed, setup)
    D = symmetrized_D(original, perturbed, setup.gamma)
    nd, margin = is_negative_definite(A)
    bounds = lemma1_gamma_bounds(original, perturbed)
    notes = []

    c = t2 = verdict = None
    if has_reverse_support(original) and has_reverse_support(perturbed):
        c = perturbation_factor(original, perturbed)
        t2 = theorem2_bound(c)
        verdict = theorem2_verdict(setup.gamma, c)
    else:
        notes.append("transition ratios undefined: some p_ij > 0 has p_ji = 0")

    cor = None
    rho, rho_hat = simple_walk_ratio(original), simple_walk_ratio(perturbed)
    if rho is not None and rho_hat is not None:
        cor = corollary1_bound(rho, rho_hat / rho)

    thr = max_nd_gamma(original, perturbed, setup.phi, tol)
    if thr.method != "bisection":
        notes.append("negative-definite region in gamma is not an interval; grid scan used")

    w_star = pbe = None
    try:
        w_star = td_fixed_point(A, b)
        pbe = projected_bellman_error(w_star, original, perturbed, setup)
    except SingularSystemError as exc:
        notes.append(str(exc))

    return StabilityReport(
        gamma=setup.gamma, A=A, b=b, D=D, min_sym_eig=margin, is_nd=nd,
        lemma1_bounds=bounds, lemma1_min=float(bounds.min()),
        perturbation_factor=c, theorem2_bound=t2, theorem2_verdict=verdict,
        corollary1_bound=cor, max_nd_gamma=thr.gamma, max_nd_flag=thr.never_nd,
        w_star=w_star, pbe_at_w_star=pbe, notes=notes,
    )


def format_summary(report: StabilityReport) -> str:
    fmt = "{:.12g}".format
    lines = [f"gamma = {fmt(report.gamma)}"]
    if report.theorem2_bound is not None:
        lines.append(f"perturbation factor c = {fmt(report.perturbation_factor)}")
        lines.append(f"theorem2_bound = {fmt(report.theorem2_bound)} ({report.theorem2_verdict})")
    lines.append(f"lemma1_bound (min over states) = {fmt(report.lemma1_min)}")
    if report.corollary1_bound is not None:
        lines.append(f"corollary1_bound = {fmt(report.corollary1_bound)}")
    lines.append(f"max_nd_gamma = {fmt(report.max_nd_gamma)}"
                 + (" (A not negative definite for any gamma)" if report.max_nd_flag else ""))
    lines.append(f"A negative definite at gamma: {'yes' if report.is_nd else 'no'} "
                 f"(margin {report.min_sym_eig:.6g})")
    if report.theorem2_bound is not None and report.theorem2_bound >= 1.0:
        lines.append("on-policy: all bounds reach 1, converges for all gamma in (0,1)")
    if report.w_star is not None:
        lines.append("w* = [" + ", ".join(fmt(x) for x in report.w_star) + "]")
        lines.append(f"PBE(w*) = {report.pbe_at_w_star:.3e}")
    lines.extend(f"note: {n}" for n in report.notes)
    return "\n".join(lines) + "\n"
