from __future__ import annotations

import time

import numpy as np
import pytest

from tdstab.chains import WeightedGraph, build_graph_walk, build_simple_random_walk, perturb_graph_weights
from tdstab.simulate import StepSchedule, td0_run
from tdstab.stability import FeatureSetup

# Overlapping-tile features for the 5-state end-to-end fixture.
TILES = np.array([[1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 1, 1], [0, 0, 1]], dtype=float)

# a = 0.5 (the library default) is too timid for 1e6 steps on this fixture
FIXTURE_SCHEDULE = StepSchedule(a=10.0, t0=100.0)
FIXTURE_SEEDS = list(range(20))
PBE_TOL = 1e-3

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_support(rng: np.random.Generator, n: int, density: float = 0.6) -> np.ndarray:
    """Connected symmetric support with at least one self-loop (so the walk is aperiodic)."""
    mask = np.triu(rng.random((n, n)) < density, 1)
    perm = rng.permutation(n)
    mask[perm[:-1], perm[1:]] = True
    mask = mask | mask.T
    loops = rng.random(n) < 0.3
    loops[rng.integers(n)] = True
    mask[np.diag_indices(n)] = loops
    return mask


def random_graph(rng: np.random.Generator, n: int, support: np.ndarray | None = None) -> WeightedGraph:
    if support is None:
        support = random_support(rng, n)
    w = np.exp(rng.uniform(-1.5, 1.5, size=(n, n)))
    w = np.triu(w) + np.triu(w, 1).T
    return WeightedGraph(np.where(support, w, 0.0))


def random_reversible_pair(rng: np.random.Generator, n: int | None = None):
    """Original and perturbed reversible chains on a shared support."""
    n = n or int(rng.integers(2, 9))
    support = random_support(rng, n)
    graph = random_graph(rng, n, support)
    if rng.random() < 0.5:
        other = random_graph(rng, n, support)
    else:
        other = perturb_graph_weights(graph, float(np.exp(rng.uniform(0, 2))), int(rng.integers(1 << 30)))
    return build_graph_walk(graph), build_graph_walk(other)


def random_features(rng: np.random.Generator, n: int, k: int | None = None) -> np.ndarray:
    k = k or int(rng.integers(1, n + 1))
    while True:
        phi = rng.standard_normal((n, k))
        s = np.linalg.svd(phi, compute_uv=False)
        if s[-1] > 1e-3 * s[0]:
            return phi


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def walk_fixture():
    """rho=2 original sampled through rho_hat=1, gamma=0.6, tile features."""
    original = build_simple_random_walk(5, 2.0)
    perturbed = build_simple_random_walk(5, 1.0)
    setup = FeatureSetup(TILES, np.arange(1, 6) / 5, 0.6)
    return original, perturbed, setup


@pytest.fixture(scope="session")
def fixture_runs(walk_fixture):
    """Twenty seeded 1e6-step runs on the walk fixture, plus their wall time."""
    original, perturbed, setup = walk_fixture
    start = time.perf_counter()
    traces = [td0_run(original, perturbed, setup, FIXTURE_SCHEDULE, T=10**6, seed=s) for s in FIXTURE_SEEDS]
    return traces, time.perf_counter() - start
