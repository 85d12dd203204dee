"""Finite Markov chains, weighted-graph walks and their perturbations.

States are indexed ``0..n-1`` internally; the JSON and CSV layers use the
same zero-based order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping

import numpy as np

ROW_SUM_TOL = 1e-12
STATIONARY_TOL = 1e-10
REVERSIBLE_TOL = 1e-10


class ChainError(ValueError):
    """Raised for transition matrices that violate a chain requirement."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _reachable(adj: np.ndarray, start: int) -> np.ndarray:
    seen = np.zeros(len(adj), dtype=bool)
    seen[start] = True
    stack = [start]
    while stack:
        u = stack.pop()
        for v in np.flatnonzero(adj[u]):
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    return seen


def is_irreducible(P: np.ndarray) -> bool:
    adj = np.asarray(P) > 0
    return bool(_reachable(adj, 0).all() and _reachable(adj.T, 0).all())


def period(P: np.ndarray) -> int:
    """Period of an irreducible chain: gcd of ``level[u] + 1 - level[v]`` over edges."""
    adj = np.asarray(P) > 0
    if np.any(np.diag(adj)):
        return 1
    n = len(adj)
    level = np.full(n, -1)
    level[0] = 0
    queue = [0]
    g = 0
    while queue:
        u = queue.pop(0)
        for v in np.flatnonzero(adj[u]):
            if level[v] < 0:
                level[v] = level[u] + 1
                queue.append(v)
            else:
                g = math.gcd(g, int(level[u] + 1 - level[v]))
    return g


def _power_iteration(P: np.ndarray, tol: float = 1e-15, max_iter: int = 1_000_000) -> np.ndarray:
    q = np.full(len(P), 1.0 / len(P))
    for _ in range(max_iter):
        nxt = q @ P
        if np.abs(nxt - q).sum() < tol:
            q = nxt
            break
        q = nxt
    return q / q.sum()


def _gth(P: np.ndarray) -> np.ndarray:
    """Grassmann-Taksar-Heyman elimination.

    Subtraction-free, so tiny stationary entries keep full relative accuracy
    (a plain dense solve loses them when q spans many orders of magnitude).
    """
    A = P.copy()
    n = A.shape[0]
    for k in range(n - 1, 0, -1):
        s = A[k, :k].sum()
        if s <= 0:
            raise ChainError("chain is not irreducible")
        A[:k, k] /= s
        A[:k, :k] += np.outer(A[:k, k], A[k, :k])
    q = np.zeros(n)
    q[0] = 1.0
    for k in range(1, n):
        q[k] = q[:k] @ A[:k, k]
    return q / q.sum()


def stationary_distribution(P) -> np.ndarray:
    """Unique ``q`` with ``q P = q`` and ``sum(q) = 1``.

    Raises ChainError for reducible or periodic chains.
    """
    P = np.asarray(P, dtype=float)
    if not is_irreducible(P):
        raise ChainError("chain is not irreducible")
    d = period(P)
    if d != 1:
        raise ChainError(f"chain is periodic (period {d}), aperiodicity required")
    q = _gth(P)
    if not np.all(np.isfinite(q)) or np.any(q <= 0):
        q = _power_iteration(P)
        q = np.clip(q, 0.0, None)
        q /= q.sum()
    if np.any(q <= 0):
        raise ChainError("stationary distribution has zero entries")
    return q


@dataclass(frozen=True)
class MarkovChain:
    """Row-stochastic transition matrix with its stationary distribution."""

    P: np.ndarray
    q: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ChainError(f"transition matrix must be square, got shape {P.shape}")
        if P.shape[0] < 2:
            raise ChainError("a chain needs at least 2 states")
        if not np.all(np.isfinite(P)) or np.any(P < 0) or np.any(P > 1):
            raise ChainError("transition probabilities must lie in [0, 1]")
        sums = P.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)
        if bad.size:
            raise ChainError(f"row {int(bad[0])} sums to {sums[bad[0]]!r}, not 1")
        q = stationary_distribution(P)
        if np.max(np.abs(q @ P - q)) > STATIONARY_TOL:
            raise ChainError("stationary distribution failed q P = q check")
        object.__setattr__(self, "P", _readonly(P))
        object.__setattr__(self, "q", _readonly(q))

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def Q(self) -> np.ndarray:
        return np.diag(self.q)

    @property
    def support(self) -> np.ndarray:
        return self.P > 0

    @cached_property
    def cumulative(self) -> np.ndarray:
        """Row-wise CDFs, padded with +inf from each row's last positive entry.

        The padding keeps rounding in ``cumsum`` from ever selecting a
        zero-probability state when sampling with ``searchsorted``.
        """
        cum = np.cumsum(self.P, axis=1)
        for i, row in enumerate(self.P):
            cum[i, np.flatnonzero(row)[-1]:] = np.inf
        cum.setflags(write=False)
        return cum


@dataclass(frozen=True)
class WeightedGraph:
    """Symmetric nonnegative edge weights; ``U[i, i] > 0`` is a self-loop."""

    U: np.ndarray

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float)
        if U.ndim != 2 or U.shape[0] != U.shape[1]:
            raise ChainError(f"weight matrix must be square, got shape {U.shape}")
        if not np.all(np.isfinite(U)) or np.any(U < 0):
            raise ChainError("weights must be finite and nonnegative")
        if not np.array_equal(U, U.T):
            raise ChainError("weight matrix must be exactly symmetric")
        empty = np.flatnonzero(~np.any(U > 0, axis=1))
        if empty.size:
            raise ChainError(f"vertex {int(empty[0])} has zero total weight")
        object.__setattr__(self, "U", _readonly(U))

    @property
    def n(self) -> int:
        return self.U.shape[0]


class RatioTable(dict):
    """Map ``(i, j) -> p_ij / p_ji`` over the supported pairs."""


def detailed_balance_gap(chain: MarkovChain) -> float:
    flow = chain.q[:, None] * chain.P
    return float(np.max(np.abs(flow - flow.T)))


def is_reversible(chain: MarkovChain, tol: float = REVERSIBLE_TOL) -> bool:
    return detailed_balance_gap(chain) <= tol


def has_reverse_support(chain: MarkovChain) -> bool:
    s = chain.support
    return bool(np.array_equal(s, s.T))


def same_structure(original: MarkovChain, perturbed: MarkovChain) -> bool:
    if original.n != perturbed.n:
        raise ChainError(f"state counts differ: {original.n} vs {perturbed.n}")
    return bool(np.array_equal(original.support, perturbed.support))


def transition_ratios(chain: MarkovChain) -> RatioTable:
    P = chain.P
    table = RatioTable()
    for i, j in zip(*np.nonzero(P)):
        if P[j, i] <= 0:
            raise ChainError(f"pair ({i}, {j}) has p_ij > 0 but p_ji = 0")
        table[(int(i), int(j))] = 1.0 if i == j else float(P[i, j] / P[j, i])
    return table


def perturbation_factor(original: MarkovChain, perturbed: MarkovChain) -> float:
    """Smallest ``c >= 1`` with ``rho/c <= rho_hat <= c*rho`` on every supported pair."""
    if not same_structure(original, perturbed):
        raise ChainError("chains do not share the same transition structure")
    rho = transition_ratios(original)
    rho_hat = transition_ratios(perturbed)
    c = 1.0
    for key, r in rho.items():
        ratio = rho_hat[key] / r
        c = max(c, ratio, 1.0 / ratio)
    return c


def build_birth_death(n: int, ratios, hold=None) -> MarkovChain:
    """Birth-death chain with ``p_{i,i+1} / p_{i+1,i} = ratios[i]``.

    ``hold[i]`` is the self-loop of interior state ``i``. The first up-move
    takes ``(1 - hold[0]) * rho / (1 + rho)``, every following row
    is filled so it sums to one, and the last state keeps whatever mass is
    left as its self-loop. With zero holds and constant ratios this is the
    simple random walk with reflecting self-loops at both ends.
    """
    if n < 2:
        raise ChainError("birth-death chain needs n >= 2")
    ratios = np.broadcast_to(np.asarray(ratios, dtype=float), (n - 1,))
    if np.any(ratios <= 0):
        raise ChainError("transition ratios must be positive")
    hold = np.zeros(n) if hold is None else np.asarray(hold, dtype=float)
    if hold.shape != (n,) or np.any(hold < 0) or np.any(hold >= 1):
        raise ChainError("hold must have n entries in [0, 1)")
    if hold[-1] != 0:
        raise ChainError("the last state's self-loop is derived; hold[-1] must be 0")
    P = np.zeros((n, n))
    up = (1.0 - hold[0]) * ratios[0] / (1.0 + ratios[0])
    for i in range(n - 1):
        if i > 0:
            up = 1.0 - hold[i] - P[i, i - 1]
        down = up / ratios[i]
        if not (0 < up <= 1 and 0 < down <= 1):
            raise ChainError(f"infeasible probabilities at edge ({i}, {i + 1}): up={up!r}, down={down!r}")
        P[i, i + 1] = up
        P[i + 1, i] = down
    for i in range(n):
        P[i, i] = 1.0 - (P[i].sum() - P[i, i])
    if np.any(np.diag(P) < -ROW_SUM_TOL):
        raise ChainError("infeasible probabilities: negative self-loop")
    return MarkovChain(np.clip(P, 0.0, 1.0))


def build_simple_random_walk(n: int, rho: float) -> MarkovChain:
    if rho <= 0:
        raise ChainError("rho must be positive")
    up, down = rho / (rho + 1.0), 1.0 / (rho + 1.0)
    P = np.zeros((n, n))
    idx = np.arange(n - 1)
    P[idx, idx + 1] = up
    P[idx + 1, idx] = down
    P[0, 0] = down
    P[-1, -1] = up
    return MarkovChain(P)


def simple_walk_ratio(chain: MarkovChain, tol: float = 1e-12) -> float | None:
    """Return ``rho`` if ``chain`` is exactly a constant-ratio simple walk, else None."""
    P = chain.P
    if P[0, 1] <= 0 or P[1, 0] <= 0:
        return None
    rho = P[0, 1] / P[1, 0]
    ref = build_simple_random_walk(chain.n, rho).P
    return float(rho) if np.max(np.abs(ref - P)) <= tol else None


def build_graph_walk(graph: WeightedGraph) -> MarkovChain:
    U = graph.U
    return MarkovChain(U / U.sum(axis=1, keepdims=True))


def graph_stationary(graph: WeightedGraph) -> np.ndarray:
    """Closed form stationary law of a graph walk: row weight over total weight."""
    w = graph.U.sum(axis=1)
    return w / w.sum()


def to_weighted_graph(chain: MarkovChain, tol: float = REVERSIBLE_TOL) -> WeightedGraph:
    if not is_reversible(chain, tol):
        raise ChainError("only reversible chains can be written as graph walks")
    flow = chain.q[:, None] * chain.P
    return WeightedGraph(0.5 * (flow + flow.T))


def perturb_graph_weights(graph: WeightedGraph, delta: float, rng_seed=None) -> WeightedGraph:
    """Multiply each edge weight by a symmetric log-uniform factor in ``[1/delta, delta]``."""
    if delta < 1:
        raise ChainError("delta must be >= 1")
    rng = np.random.default_rng(rng_seed)
    n = graph.n
    log_f = rng.uniform(-math.log(delta), math.log(delta), size=(n, n))
    log_f = np.triu(log_f) + np.triu(log_f, 1).T
    return WeightedGraph(graph.U * np.exp(log_f))


# -- JSON forms -------------------------------------------------------------

def chain_from_dict(spec: Mapping[str, Any]) -> MarkovChain:
    """Build a chain from ``{"P": ...}``, ``{"U": ...}`` or ``{"family": ...}``."""
    family = spec.get("family")
    if family is None:
        if "P" in spec:
            chain = MarkovChain(np.asarray(spec["P"], dtype=float))
        elif "U" in spec:
            chain = build_graph_walk(graph_from_dict(spec))
        else:
            raise ChainError("chain spec needs 'P', 'U' or 'family'")
    elif family == "simple_walk":
        chain = build_simple_random_walk(int(spec["n"]), float(spec["rho"]))
    elif family == "birth_death":
        chain = build_birth_death(int(spec["n"]), spec["ratios"], spec.get("hold"))
    elif family == "graph":
        chain = build_graph_walk(graph_from_dict(spec))
    else:
        raise ChainError(f"unknown chain family {family!r}")
    if "n" in spec and int(spec["n"]) != chain.n:
        raise ChainError(f"declared n={spec['n']} but matrix has {chain.n} states")
    return chain


def graph_from_dict(spec: Mapping[str, Any]) -> WeightedGraph:
    graph = WeightedGraph(np.asarray(spec["U"], dtype=float))
    perturb = spec.get("perturb")
    if perturb:
        graph = perturb_graph_weights(graph, float(perturb["delta"]), perturb.get("seed"))
    return graph


def chain_to_dict(chain: MarkovChain) -> dict:
    return {"n": chain.n, "P": chain.P.tolist()}


def graph_to_dict(graph: WeightedGraph) -> dict:
    return {"n": graph.n, "U": graph.U.tolist()}
