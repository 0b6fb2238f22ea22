"""Strict JSON configs for single runs and experiment manifests."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .objectives import NAMED_GRAPHS, GraphError, PairGraph


class ConfigError(ValueError):
    pass


PRESETS: dict[str, dict] = {
    # CI-sized run on synthetic pairs
    "small": {
        "dataset": {"kind": "synth", "n": 2000, "n_test": 500, "seed": 0},
        "epochs": 10,
        "eval_epochs": 10,
        "batch": 64,
        "base_channels": 16,
    },
    # the paper's natural-image protocol
    "paper": {
        "epochs": 50,
        "eval_epochs": 50,
        "batch": 64,
        "base_channels": 64,
    },
}


@dataclass
class TrainConfig:
    dataset: dict = field(default_factory=lambda: {"kind": "synth"})
    edges: list[str] = field(default_factory=lambda: list(NAMED_GRAPHS["CR-XX-CC"]))
    weights: dict[str, float] = field(default_factory=dict)
    lr: float = 4e-4
    max_lr: float = 0.01
    pct_start: float = 0.3
    final_div: float = 1e4
    batch: int = 64
    epochs: int = 50
    eval_epochs: int = 50
    seed: int = 0
    precision: str = "float32"
    preset: str | None = None
    base_channels: int = 64
    name: str = "model"

    def __post_init__(self):
        if self.batch < 2:
            raise ConfigError("batch must be at least 2 (InfoNCE needs negatives)")
        if self.epochs < 1 or self.eval_epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, not {self.precision!r}")
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")

    def graph(self) -> PairGraph:
        return PairGraph.parse(self.edges, self.weights)

    def to_dict(self) -> dict:
        return asdict(self)


CONFIG_KEYS = {f for f in TrainConfig.__dataclass_fields__}


def _expand_edges(edges) -> list[str]:
    if isinstance(edges, str):
        if edges not in NAMED_GRAPHS:
            raise ConfigError(f"unknown objective name {edges!r}")
        return list(NAMED_GRAPHS[edges])
    if not isinstance(edges, list) or not all(isinstance(e, str) for e in edges):
        raise ConfigError("edges must be an objective name or a list of edge strings")
    return list(edges)


def config_from_dict(raw: dict) -> TrainConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged: dict = {}
    preset = raw.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        merged.update(copy.deepcopy(PRESETS[preset]))
    merged.update(raw)
    if "edges" in merged:
        merged["edges"] = _expand_edges(merged["edges"])
    try:
        cfg = TrainConfig(**merged)
        cfg.graph()
    except GraphError as exc:
        raise ConfigError(str(exc)) from None
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _load_json(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise ConfigError(f"{path}: empty config file")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


@dataclass
class Cell:
    name: str
    config: TrainConfig
    seeds: list[int]


@dataclass
class Manifest:
    cells: list[Cell]
    out: str = "runs"
    preset: str | None = None
    jobs: int = 1


MANIFEST_KEYS = {"cells", "out", "preset", "defaults", "jobs"}
CELL_KEYS = {"name", "seeds", "objective"} | CONFIG_KEYS - {"seed", "preset"}


def manifest_from_dict(raw: dict) -> Manifest:
    unknown = set(raw) - MANIFEST_KEYS
    if unknown:
        raise ConfigError(f"unknown manifest keys: {sorted(unknown)}")
    cells_raw = raw.get("cells")
    if not cells_raw:
        raise ConfigError("manifest needs a non-empty 'cells' list")
    defaults = dict(raw.get("defaults", {}))
    bad = set(defaults) - (CONFIG_KEYS - {"seed", "preset", "name"})
    if bad:
        raise ConfigError(f"unknown manifest default keys: {sorted(bad)}")
    preset = raw.get("preset")
    cells, names = [], set()
    for i, c in enumerate(cells_raw):
        unknown = set(c) - CELL_KEYS
        if unknown:
            raise ConfigError(f"cell {i}: unknown keys {sorted(unknown)}")
        c = dict(c)
        name = c.pop("name", None) or c.get("objective")
        if not name:
            raise ConfigError(f"cell {i}: needs a name")
        if name in names:
            raise ConfigError(f"duplicate cell name {name!r}")
        names.add(name)
        seeds = c.pop("seeds", [0])
        if not isinstance(seeds, list) or not seeds:
            raise ConfigError(f"cell {name!r}: seeds must be a non-empty list")
        if "objective" in c:
            c["edges"] = c.pop("objective")
        cfg = config_from_dict({**defaults, **c, "name": name, **({"preset": preset} if preset else {})})
        cells.append(Cell(name, cfg, [int(s) for s in seeds]))
    return Manifest(cells, out=raw.get("out", "runs"), preset=preset, jobs=int(raw.get("jobs", 1)))


def parse_config(path) -> TrainConfig | Manifest:
    """Load a run config or, if it has a ``cells`` key, an experiment manifest."""
    raw = _load_json(path)
    if isinstance(raw, dict) and "cells" in raw:
        return manifest_from_dict(raw)
    return config_from_dict(raw)
