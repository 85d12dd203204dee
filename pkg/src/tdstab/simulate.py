"""Seeded off-policy TD(0) runs.

Sampled states move under the perturbed chain; the bootstrap successor
``S'`` is drawn from the original chain's row at the sampled state. Each
replica gets its own Philox stream keyed by ``(seed, replica)``.
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .chains import MarkovChain
from .stability import FeatureSetup, _check_pair, projected_bellman_error

DIVERGENCE_NORM = 1e12
_CHUNK = 1 << 16
_CHECK_EVERY = 1024


@dataclass(frozen=True)
class StepSchedule:
    """``a / (t + t0)`` (harmonic) or a constant step, the latter for diagnostics only."""

    kind: str = "harmonic"
    a: float = 0.5
    t0: float = 100.0
    alpha: float | None = None

    def __post_init__(self):
        if self.kind == "harmonic":
            if self.a <= 0 or self.t0 < 1:
                raise ValueError("harmonic schedule needs a > 0 and t0 >= 1")
        elif self.kind == "constant":
            if self.alpha is None or self.alpha <= 0:
                raise ValueError("constant schedule needs alpha > 0")
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    @property
    def robbins_monro(self) -> bool:
        return self.kind == "harmonic"

    def step(self, t: int) -> float:
        if self.kind == "constant":
            return self.alpha
        return self.a / (t + self.t0)

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "alpha": self.alpha}
        return {"kind": "harmonic", "a": self.a, "t0": self.t0}

    @classmethod
    def from_dict(cls, d: dict) -> StepSchedule:
        return cls(**d)


def finite_or_none(x: float) -> float | None:
    """JSON has no infinity; diverged runs report ``null``."""
    return float(x) if math.isfinite(x) else None


def replica_rng(seed: int, replica: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, replica])))


def sample_step(state: int, original: MarkovChain, perturbed: MarkovChain, rng: np.random.Generator):
    """One draw of ``(S_hat_{t+1}, S'_t)`` given ``S_hat_t = state``."""
    u_hat, u_succ = rng.random(2).tolist()
    nxt = bisect.bisect_right(perturbed.cumulative[state], u_hat)
    succ = bisect.bisect_right(original.cumulative[state], u_succ)
    return nxt, succ


@dataclass
class SimulationTrace:
    seed: int
    replica: int
    T: int
    steps_run: int
    schedule: StepSchedule
    times: np.ndarray
    weights: np.ndarray
    dist_to_wstar: np.ndarray
    w_star: np.ndarray
    final_pbe: float
    diverged: bool
    pair_counts: np.ndarray
    A_bar: np.ndarray
    b_bar: np.ndarray
    notes: list[str] = field(default_factory=list)

    @property
    def w_final(self) -> np.ndarray:
        return self.weights[-1]

    @property
    def occupancy(self) -> np.ndarray:
        counts = self.pair_counts.sum(axis=1)
        return counts / counts.sum()

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        k = self.weights.shape[1]
        writer.writerow(["t", *[f"w_{i + 1}" for i in range(k)], "dist_to_wstar"])
        for t, w, d in zip(self.times, self.weights, self.dist_to_wstar):
            writer.writerow([int(t), *(format(x, ".12g") for x in w), format(d, ".12g")])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "replica": self.replica,
            "T": self.T,
            "steps_run": self.steps_run,
            "schedule": self.schedule.to_dict(),
            "robbins_monro": self.schedule.robbins_monro,
            "diverged": self.diverged,
            "w_final": self.w_final.tolist(),
            "w_star": self.w_star.tolist(),
            "final_distance": float(self.dist_to_wstar[-1]),
            "final_pbe": finite_or_none(self.final_pbe),
            "A_bar": self.A_bar.tolist(),
            "b_bar": self.b_bar.tolist(),
            "notes": self.notes,
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def _empirical_means(pair_counts: np.ndarray, setup: FeatureSetup):
    total = pair_counts.sum()
    freq = pair_counts / total
    occ = freq.sum(axis=1)
    phi = setup.phi
    A_bar = phi.T @ (setup.gamma * freq - np.diag(occ)) @ phi
    b_bar = phi.T @ (occ * setup.r)
    return A_bar, b_bar


def empirical_mean_Ab(trace: SimulationTrace):
    """Time averages of the per-step ``A(X_t)`` and ``b(X_t)``."""
    return trace.A_bar, trace.b_bar


def _sample_states(cum_hat: list, start: int, u: list) -> tuple[list, int]:
    out = [0] * len(u)
    s = start
    for t, x in enumerate(u):
        out[t] = s
        s = bisect.bisect_right(cum_hat[s], x)
    return out, s


def td0_run(
    original: MarkovChain,
    perturbed: MarkovChain,
    setup: FeatureSetup,
    schedule: StepSchedule | None = None,
    w0=None,
    T: int = 100_000,
    seed: int = 0,
    snapshot_every: int | None = None,
    *,
    replica: int = 0,
    start_state: int = 0,
    w_star=None,
) -> SimulationTrace:
    """Run ``T`` TD(0) updates ``w += alpha_t d_t phi(S_hat_t)``.

    Overflow is not an error: the run stops at the first check where
    ``||w||`` exceeds 1e12 or turns non-finite, and the trace is flagged.
    """
    _check_pair(original, perturbed, setup.n)
    schedule = schedule or StepSchedule()
    n, k = setup.phi.shape
    if T < 1:
        raise ValueError("T must be >= 1")
    snapshot_every = snapshot_every or max(1, T // 100)
    if w_star is None:
        from .stability import assemble_A_b, td_fixed_point
        w_star = td_fixed_point(*assemble_A_b(original, perturbed, setup))
    w_star = np.asarray(w_star, dtype=float)

    rng = replica_rng(seed, replica)
    cum_hat = perturbed.cumulative.tolist()
    cum = original.cumulative
    phi = [tuple(row) for row in setup.phi.tolist()]
    r = setup.r.tolist()
    gamma = setup.gamma
    w = [0.0] * k if w0 is None else [float(x) for x in w0]
    kk = range(k)
    harmonic = schedule.kind == "harmonic"
    a, t0, alpha_c = schedule.a, schedule.t0, schedule.alpha

    times, snaps = [0], [list(w)]
    pair_counts = np.zeros((n, n), dtype=np.int64)
    state = start_state
    diverged = False
    t = 0
    while t < T and not diverged:
        m = min(_CHUNK, T - t)
        u_hat = rng.random(m)
        u_succ = rng.random(m)
        states, state = _sample_states(cum_hat, state, u_hat.tolist())
        s_arr = np.asarray(states)
        succ = (u_succ[:, None] >= cum[s_arr]).sum(axis=1)
        succ_l = succ.tolist()
        done = 0
        for i, j in zip(states, succ_l):
            fi, fj = phi[i], phi[j]
            v_i = 0.0
            v_j = 0.0
            for c in kk:
                v_i += fi[c] * w[c]
                v_j += fj[c] * w[c]
            step = (a / (t + t0) if harmonic else alpha_c) * (r[i] + gamma * v_j - v_i)
            for c in kk:
                w[c] += step * fi[c]
            t += 1
            done += 1
            if t % _CHECK_EVERY == 0 or t == T or t % snapshot_every == 0:
                norm = math.sqrt(sum(x * x for x in w))
                if not math.isfinite(norm) or norm > DIVERGENCE_NORM:
                    diverged = True
                if t % snapshot_every == 0 or t == T or diverged:
                    times.append(t)
                    snaps.append(list(w))
                if diverged:
                    break
        np.add.at(pair_counts, (s_arr[:done], succ[:done]), 1)

    weights = np.asarray(snaps, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        dist = np.linalg.norm(weights - w_star, axis=1)
    A_bar, b_bar = _empirical_means(pair_counts, setup)
    notes = []
    if not schedule.robbins_monro:
        notes.append("constant step size does not satisfy Robbins-Monro; diagnostics only")
    if diverged:
        notes.append(f"diverged at t={t}: |w| exceeded {DIVERGENCE_NORM:g} or became non-finite")
        pbe = math.inf
    else:
        pbe = projected_bellman_error(weights[-1], original, perturbed, setup)
    return SimulationTrace(
        seed=seed, replica=replica, T=T, steps_run=t, schedule=schedule,
        times=np.asarray(times), weights=weights, dist_to_wstar=dist, w_star=w_star,
        final_pbe=pbe, diverged=diverged, pair_counts=pair_counts,
        A_bar=A_bar, b_bar=b_bar, notes=notes,
    )
