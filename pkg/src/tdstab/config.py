"""Experiment configuration files.

A config is one JSON object. Chains appear inline (``{"P": ...}``,
``{"U": ...}``), as constructor forms (``{"family": "simple_walk", ...}``) or
as ``{"file": "other.json"}`` relative to the config file.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .chains import ChainError, MarkovChain, chain_from_dict
from .simulate import StepSchedule
from .stability import FeatureSetup, check_full_rank

MODES = ("analyze", "simulate", "sweep", "max-gamma")
DEFAULT_DELTA_GRID = {"log10_min": -2.0, "log10_max": 2.0, "num": 41}
_POLY = re.compile(r"^poly\((\d+)\)$")


class ConfigError(ValueError):
    pass


def load_json(path: str | Path) -> Any:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def poly_features(n: int, k: int) -> np.ndarray:
    """Column ``j`` is ``(i / n) ** j`` over state indices ``i = 1..n``."""
    x = np.arange(1, n + 1) / n
    return x[:, None] ** np.arange(k)[None, :]


def parse_features(spec, n: int, where: str = "features") -> np.ndarray:
    if spec is None or spec == "identity":
        phi = np.eye(n)
    elif isinstance(spec, str):
        m = _POLY.match(spec.strip())
        if not m:
            raise ConfigError(f"{where}: expected 'identity', 'poly(k)' or a matrix, got {spec!r}")
        k = int(m.group(1))
        if not 1 <= k <= n:
            raise ConfigError(f"{where}: poly degree count must be in 1..{n}, got {k}")
        phi = poly_features(n, k)
    else:
        phi = np.asarray(spec, dtype=float)
        if phi.ndim != 2 or phi.shape[0] != n:
            raise ConfigError(f"{where}: matrix must have {n} rows, got shape {phi.shape}")
    try:
        check_full_rank(phi)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return phi


def default_reward(n: int) -> np.ndarray:
    return np.arange(1, n + 1) / n


def parse_grid(spec, where: str) -> list[float]:
    if isinstance(spec, dict):
        try:
            grid = np.logspace(float(spec["log10_min"]), float(spec["log10_max"]), int(spec["num"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: log grid needs log10_min, log10_max, num") from exc
        # logspace lands a hair off integer powers of ten; snap them so delta=1 is exact
        grid = [float(10.0 ** round(e)) if abs(e - round(e)) < 1e-12 else float(g)
                for g, e in zip(grid, np.log10(grid))]
    elif isinstance(spec, list):
        grid = [float(x) for x in spec]
    else:
        raise ConfigError(f"{where}: expected a list or a log-grid object")
    if not grid:
        raise ConfigError(f"{where}: grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError(f"{where}: grid must be strictly increasing")
    return grid


@dataclass
class Instance:
    name: str
    original: MarkovChain
    perturbed: MarkovChain
    rho: float | None = None
    delta: float | None = None


@dataclass
class ExperimentConfig:
    mode: str
    path: Path | None = None
    original: MarkovChain | None = None
    perturbed: MarkovChain | None = None
    phi: np.ndarray | None = None
    reward: np.ndarray | None = None
    gamma: float | None = None
    delta_grid: list[float] = field(default_factory=list)
    rho: list[float] = field(default_factory=list)
    instances: list[Instance] = field(default_factory=list)
    feature_spec: Any = None
    seeds: list[int] = field(default_factory=list)
    T: int = 100_000
    schedule: StepSchedule = field(default_factory=StepSchedule)
    snapshot_every: int | None = None
    w0: list[float] | None = None
    start_state: int = 0
    tol: float = 1e-6
    out: Path | None = None

    def setup(self) -> FeatureSetup:
        return FeatureSetup(self.phi, self.reward, self.gamma)


def _chain(spec, base: Path, where: str) -> MarkovChain:
    if not isinstance(spec, dict):
        raise ConfigError(f"{where}: chain spec must be an object")
    if "file" in spec:
        ref = base / spec["file"]
        if not ref.exists():
            raise ConfigError(f"{where}.file: {ref} does not exist")
        spec = load_json(ref)
    try:
        return chain_from_dict(spec)
    except (ChainError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _features_for(raw: dict, n: int, mode: str):
    spec = raw.get("features", "poly(3)" if mode == "max-gamma" else "identity")
    return spec, parse_features(spec, n)


def parse_config(raw: Any, path: str | Path | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    mode = raw.get("mode")
    if mode not in MODES:
        raise ConfigError(f"config.mode: expected one of {MODES}, got {mode!r}")
    base = Path(path).parent if path else Path(".")
    cfg = ExperimentConfig(mode=mode, path=Path(path) if path else None)
    if "out" in raw:
        cfg.out = base / raw["out"]
    cfg.tol = float(raw.get("tol", cfg.tol))

    if mode == "sweep":
        cfg.delta_grid = parse_grid(raw.get("delta_grid", DEFAULT_DELTA_GRID), "config.delta_grid")
        cfg.rho = [float(x) for x in raw.get("rho", [2.0, 0.5])]
        if not cfg.rho or any(x <= 0 for x in cfg.rho):
            raise ConfigError("config.rho: need a nonempty list of positive ratios")
        return cfg

    if mode == "max-gamma":
        _parse_instances(cfg, raw, base)
        return cfg

    if "original" not in raw:
        raise ConfigError("config.original: required")
    cfg.original = _chain(raw["original"], base, "config.original")
    cfg.perturbed = _chain(raw.get("perturbed", raw["original"]), base, "config.perturbed")
    n = cfg.original.n
    cfg.feature_spec, cfg.phi = _features_for(raw, n, mode)
    cfg.reward = np.asarray(raw["reward"], dtype=float) if "reward" in raw else default_reward(n)
    if cfg.reward.shape != (n,):
        raise ConfigError(f"config.reward: expected {n} entries, got shape {cfg.reward.shape}")
    if "gamma" not in raw:
        raise ConfigError("config.gamma: required")
    cfg.gamma = float(raw["gamma"])
    try:
        cfg.setup()
    except ValueError as exc:
        raise ConfigError(f"config: {exc}") from exc
    if cfg.perturbed.n != n:
        raise ConfigError(f"config.perturbed: has {cfg.perturbed.n} states, original has {n}")

    if mode == "simulate":
        cfg.seeds = [int(s) for s in raw.get("seeds", [0])]
        if not cfg.seeds:
            raise ConfigError("config.seeds: must be nonempty")
        cfg.T = int(raw.get("T", cfg.T))
        if cfg.T < 1:
            raise ConfigError("config.T: must be >= 1")
        try:
            cfg.schedule = StepSchedule.from_dict(raw.get("schedule", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config.schedule: {exc}") from exc
        cfg.snapshot_every = raw.get("snapshot_every")
        cfg.w0 = raw.get("w0")
        if cfg.w0 is not None and len(cfg.w0) != cfg.phi.shape[1]:
            raise ConfigError(f"config.w0: expected {cfg.phi.shape[1]} entries")
        cfg.start_state = int(raw.get("start_state", 0))
        if not 0 <= cfg.start_state < n:
            raise ConfigError(f"config.start_state: must be in 0..{n - 1}")
    return cfg


def _parse_instances(cfg: ExperimentConfig, raw: dict, base: Path) -> None:
    if "instances" in raw:
        items = raw["instances"]
        if not isinstance(items, list) or not items:
            raise ConfigError("config.instances: must be a nonempty list")
        for idx, item in enumerate(items):
            where = f"config.instances[{idx}]"
            original = _chain(item.get("original"), base, f"{where}.original")
            perturbed = _chain(item.get("perturbed", item.get("original")), base, f"{where}.perturbed")
            cfg.instances.append(Instance(item.get("name", str(idx)), original, perturbed))
    else:
        family = raw.get("family", "simple_walk")
        if family != "simple_walk":
            raise ConfigError(f"config.family: only 'simple_walk' sweeps are generated, got {family!r}")
        n = int(raw.get("n", 5))
        cfg.rho = [float(x) for x in raw.get("rho", [2.0, 0.5])]
        cfg.delta_grid = parse_grid(raw.get("delta_grid", DEFAULT_DELTA_GRID), "config.delta_grid")
        for rho in cfg.rho:
            for delta in cfg.delta_grid:
                try:
                    original = chain_from_dict({"family": "simple_walk", "n": n, "rho": rho})
                    perturbed = chain_from_dict({"family": "simple_walk", "n": n, "rho": rho * delta})
                except ChainError as exc:
                    raise ConfigError(f"config.rho: {exc}") from exc
                cfg.instances.append(
                    Instance(f"rho={rho:g},delta={delta:.12g}", original, perturbed, rho, delta))
    n = cfg.instances[0].original.n
    if any(inst.original.n != n for inst in cfg.instances):
        raise ConfigError("config.instances: all instances must share the state count")
    cfg.feature_spec, cfg.phi = _features_for(raw, n, "max-gamma")
