"""Scenario configuration: INI-style files -> validated model builders.

A scenario file fully describes one experiment: grid and time
discretization, disturbance field, transition model, vehicle, rewards,
start/goal/obstacles, solver knobs, and run settings. Loading validates
every key (unknown keys are rejected with the offending line), fills
defaults, and can emit the fully resolved text whose hash stamps every
output file.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field as dc_field
from pathlib import Path

from .core import GridMap, TimeGrid, TvmdpModel, step_cost_reward
from .disturbance import field_from_params
from .solvers import SolverConfig
from .transitions import (
    GaussianHeadingModel,
    GridLaw,
    LocalTimeTable,
    VehicleModel,
    estimate_local_times_mc,
    load_local_times_csv,
    save_local_times_csv,
    unit_local_times,
)

__all__ = ["ConfigError", "ScenarioConfig", "load_config", "build_scenario", "Scenario"]


class ConfigError(ValueError):
    """Invalid or unreadable scenario configuration."""


_FIELD_KEYS = {
    "self_spinning": ("magnitude", "omega"),
    "vortex": ("radius", "omega", "center_x", "center_y"),
    "gridded": ("path",),
}

# section -> key -> (converter, default); REQUIRED means no default
_REQUIRED = object()
_SCHEMA: dict[str, dict[str, tuple]] = {
    "grid": {"rows": (int, _REQUIRED), "cols": (int, _REQUIRED), "cell_size": (float, 1.0)},
    "time": {"slots": (int, _REQUIRED), "horizon": (float, _REQUIRED)},
    "field": {
        "kind": (str, _REQUIRED),
        "magnitude": (float, None),
        "omega": (float, None),
        "radius": (float, None),
        "center_x": (float, None),
        "center_y": (float, None),
        "path": (str, None),
    },
    "transition": {"sigma2_env": (float, 0.6)},
    "vehicle": {"max_speed": (float, _REQUIRED)},
    "reward": {"step": (float, -0.1), "goal": (float, 1.0), "obstacle": (float, -1.0)},
    "scenario": {"start": (str, _REQUIRED), "goal": (str, _REQUIRED), "obstacles": (str, "")},
    "local_time": {
        "mode": (str, "unit"),
        "trials": (int, 100),
        "heading_sigma2": (float, 0.0),
        "cache": (str, ""),
    },
    "solver": {
        "gamma": (float, 0.95),
        "delta_tol": (float, 1e-4),
        "max_iterations": (int, 500),
        "burn_in": (int, 3),
        "outer": (int, 20),
        "inner": (int, 30),
        "m_r": (float, 2.0),
        "alpha": (float, 0.99),
        "mu_damping": (float, 0.5),
    },
    "run": {
        "seed": (int, 0),
        "workers": (int, 1),
        "n_rollouts": (int, 100),
        "max_steps": (int, 0),
        "out_dir": (str, "out"),
    },
}

_SECTION_ORDER = list(_SCHEMA)


def _find_line(path: Path | None, needle: str) -> str:
    if path is None:
        return ""
    try:
        for i, line in enumerate(path.read_text().splitlines(), start=1):
            if line.split("=")[0].strip() == needle or line.strip() == f"[{needle}]":
                return f" ({path}:{i})"
    except OSError:
        pass
    return ""


def _parse_cell(text: str, grid_rows: int, grid_cols: int, what: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError as e:
        raise ConfigError(f"{what} must be 'row,col', got {text!r}") from e
    if not (0 <= r < grid_rows and 0 <= c < grid_cols):
        raise ConfigError(f"{what} {text!r} outside the {grid_rows}x{grid_cols} grid")
    return r, c


@dataclass
class ScenarioConfig:
    """Validated, fully resolved scenario description."""

    values: dict  # {section: {key: value}}
    source_path: Path | None = None
    solver: SolverConfig = dc_field(default_factory=SolverConfig)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def resolved_text(self) -> str:
        out = io.StringIO()
        for sec in _SECTION_ORDER:
            out.write(f"[{sec}]\n")
            for key in _SCHEMA[sec]:
                if key not in self.values[sec]:
                    continue
                val = self.values[sec][key]
                if isinstance(val, float):
                    val = f"{val:.12g}"
                out.write(f"{key} = {val}\n")
            out.write("\n")
        return out.getvalue()

    def config_hash(self) -> str:
        return hashlib.sha256(self.resolved_text().encode()).hexdigest()[:12]

    def local_time_hash(self) -> str:
        """Hash of the sections that determine the local-time table."""
        parts = []
        for sec in ("grid", "time", "field", "vehicle", "local_time"):
            for key in _SCHEMA[sec]:
                if key in self.values[sec] and key != "cache":
                    parts.append(f"{sec}.{key}={self.values[sec][key]}")
        return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:12]


def load_config(path) -> ScenarioConfig:
    """Parse and validate a scenario file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e

    for sec in parser.sections():
        if sec not in _SCHEMA:
            raise ConfigError(f"unknown section [{sec}]{_find_line(path, sec)}")
        for key in parser[sec]:
            if key not in _SCHEMA[sec]:
                raise ConfigError(f"unknown key '{key}' in [{sec}]{_find_line(path, key)}")

    values: dict[str, dict] = {}
    for sec, keys in _SCHEMA.items():
        values[sec] = {}
        for key, (conv, default) in keys.items():
            if parser.has_option(sec, key):
                raw = parser.get(sec, key)
                try:
                    values[sec][key] = conv(raw)
                except ValueError as e:
                    raise ConfigError(
                        f"bad value for {sec}.{key}: {raw!r}{_find_line(path, key)}"
                    ) from e
            elif default is _REQUIRED:
                raise ConfigError(f"missing required key {sec}.{key} in {path}")
            elif default is not None:
                values[sec][key] = default

    kind = values["field"]["kind"]
    if kind not in _FIELD_KEYS:
        raise ConfigError(f"field.kind must be one of {sorted(_FIELD_KEYS)}, got {kind!r}")
    for req in _FIELD_KEYS[kind]:
        if req not in values["field"]:
            raise ConfigError(f"field.kind={kind} requires field.{req}")
    for key in list(values["field"]):
        if key != "kind" and key not in _FIELD_KEYS[kind]:
            raise ConfigError(f"field.{key} does not apply to kind={kind}{_find_line(path, key)}")

    if values["local_time"]["mode"] not in ("unit", "kinematic"):
        raise ConfigError("local_time.mode must be 'unit' or 'kinematic'")

    s = values["solver"]
    solver = SolverConfig(
        gamma=s["gamma"],
        delta_tol=s["delta_tol"],
        max_iterations=s["max_iterations"],
        burn_in=s["burn_in"],
        outer=s["outer"],
        inner=s["inner"],
        m_r=s["m_r"],
        alpha=s["alpha"],
        mu_damping=s["mu_damping"],
        workers=values["run"]["workers"],
    )
    return ScenarioConfig(values=values, source_path=path, solver=solver)


@dataclass
class Scenario:
    """A built scenario: the model plus the pieces it was made from."""

    config: ScenarioConfig
    model: TvmdpModel
    grid: GridMap
    time_grid: TimeGrid
    field: object
    vehicle: VehicleModel
    heading_model: GaussianHeadingModel
    local_times: LocalTimeTable


def _resolve_path(cfg: ScenarioConfig, p: str) -> Path:
    path = Path(p)
    if not path.is_absolute() and cfg.source_path is not None:
        path = cfg.source_path.parent / path
    return path


def build_local_times(cfg: ScenarioConfig, field, vehicle, grid, time_grid) -> LocalTimeTable:
    lt = cfg["local_time"]
    if lt["mode"] == "unit":
        return unit_local_times(grid, time_grid)
    cache = lt.get("cache", "")
    if cache:
        cache_path = _resolve_path(cfg, cache)
        if cache_path.exists():
            first = open(cache_path).readline()
            if cfg.local_time_hash() in first:
                return load_local_times_csv(cache_path, grid)
    table = estimate_local_times_mc(
        field,
        vehicle,
        grid,
        time_grid,
        trials=lt["trials"],
        seed=cfg["run"]["seed"],
        heading_sigma2=lt["heading_sigma2"],
    )
    if cache:
        cache_path = _resolve_path(cfg, cache)
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        save_local_times_csv(cache_path, table, comment=f"ltt_hash={cfg.local_time_hash()}")
    return table


def build_scenario(cfg: ScenarioConfig) -> Scenario:
    """Construct the TVMDP model described by a validated config."""
    g = cfg["grid"]
    grid = GridMap(g["rows"], g["cols"], g["cell_size"])
    t = cfg["time"]
    time_grid = TimeGrid(t["slots"], t["horizon"])

    fparams = dict(cfg["field"])
    kind = fparams.pop("kind")
    if kind == "gridded":
        fpath = _resolve_path(cfg, fparams["path"])
        if not fpath.exists():
            raise ConfigError(f"gridded field file not found: {fpath}")
        fparams["path"] = fpath
    field = field_from_params(kind, fparams)

    vehicle = VehicleModel(cfg["vehicle"]["max_speed"], g["cell_size"])
    heading = GaussianHeadingModel(cfg["transition"]["sigma2_env"])
    ltt = build_local_times(cfg, field, vehicle, grid, time_grid)

    sc = cfg["scenario"]
    start = grid.index(*_parse_cell(sc["start"], grid.rows, grid.cols, "scenario.start"))
    goal = grid.index(*_parse_cell(sc["goal"], grid.rows, grid.cols, "scenario.goal"))
    obstacles = []
    if sc["obstacles"].strip():
        for part in sc["obstacles"].split(";"):
            obstacles.append(grid.index(*_parse_cell(part.strip(), grid.rows, grid.cols, "obstacle")))
    if start in obstacles:
        raise ConfigError("start state cannot be an obstacle")

    law = GridLaw(grid, time_grid, field, heading, vehicle, ltt, goal=goal, obstacles=obstacles)
    model = TvmdpModel(
        law=law,
        time_grid=time_grid,
        reward=step_cost_reward(cfg["reward"]["step"]),
        gamma=cfg.values["solver"]["gamma"],
        goal=goal,
        obstacles=frozenset(obstacles),
        grid=grid,
        local_times=ltt,
        start=start,
        goal_reward=cfg["reward"]["goal"],
        obstacle_reward=cfg["reward"]["obstacle"],
    )
    return Scenario(cfg, model, grid, time_grid, field, vehicle, heading, ltt)
