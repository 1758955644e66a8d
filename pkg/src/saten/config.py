"""Per-layer compression configuration.

A config is a JSON document::

    {
      "defaults": {"epsilon": 0.75, "pattern": "u", "density": 0.05},
      "layers": [
        {"match": "*.query.weight", "epsilon": 0.4, "density": 0.1},
        {"match": "embeddings.word", "epsilon": 0.5, "pattern": "row", "top_t": 1000}
      ]
    }

Each layer entry is merged over ``defaults``. A tensor is compressed by the
first entry whose ``match`` glob accepts its name; tensors no entry accepts
are copied through unchanged.
"""

from __future__ import annotations

import fnmatch
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, ParameterError
from .layer import ROW, TWO_FOUR, UNSTRUCTURED, normalize_pattern

_KEYS = {"match", "epsilon", "pattern", "density", "top_t", "k", "d"}


@dataclass(frozen=True)
class LayerConfig:
    match: str
    epsilon: float
    pattern: str
    budget: float | int | None
    k: int | None = None
    d: int | None = None

    def matches(self, name: str) -> bool:
        return fnmatch.fnmatchcase(name, self.match)


@dataclass(frozen=True)
class CompressionConfig:
    layers: tuple[LayerConfig, ...]

    def lookup(self, name: str) -> LayerConfig | None:
        for entry in self.layers:
            if entry.matches(name):
                return entry
        return None


def _entry(raw: dict, where: str) -> LayerConfig:
    unknown = set(raw) - _KEYS
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    if "match" not in raw:
        raise ConfigError(f"{where}: missing 'match'")
    try:
        pattern = normalize_pattern(raw.get("pattern", "u"))
    except ParameterError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    if "epsilon" not in raw:
        raise ConfigError(f"{where}: missing 'epsilon'")
    epsilon = float(raw["epsilon"])
    if not 0.0 <= epsilon <= 1.5:
        raise ConfigError(f"{where}: epsilon {epsilon} outside [0, 1.5]")

    has_density, has_top = "density" in raw, "top_t" in raw
    if has_density and has_top:
        raise ConfigError(f"{where}: give either 'density' or 'top_t', not both")
    if pattern == ROW:
        if not has_top:
            raise ConfigError(f"{where}: row pattern needs 'top_t'")
        budget = int(raw["top_t"])
        if budget < 0:
            raise ConfigError(f"{where}: top_t must be non-negative")
    else:
        if has_top:
            raise ConfigError(f"{where}: 'top_t' only applies to the row pattern")
        if pattern == UNSTRUCTURED and not has_density:
            raise ConfigError(f"{where}: unstructured pattern needs 'density'")
        budget = float(raw.get("density", 0.5))
        if not 0.0 <= budget <= 1.0:
            raise ConfigError(f"{where}: density {budget} outside [0, 1]")
        if pattern == TWO_FOUR and budget not in (0.0, 0.5):
            raise ConfigError(f"{where}: 2:4 density is fixed at 0.5 (or 0 to disable)")
    k = raw.get("k")
    d = raw.get("d")
    for label, value in (("k", k), ("d", d)):
        if value is not None and int(value) < 1:
            raise ConfigError(f"{where}: {label} must be >= 1")
    return LayerConfig(
        raw["match"], epsilon, pattern, budget,
        None if k is None else int(k), None if d is None else int(d),
    )


def parse_config(doc: dict) -> CompressionConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    defaults = doc.get("defaults", {})
    if not isinstance(defaults, dict) or not isinstance(doc.get("layers", []), list):
        raise ConfigError("'defaults' must be an object and 'layers' a list")
    entries = []
    for i, raw in enumerate(doc.get("layers", [])):
        merged = dict(defaults)
        # default budgets only carry over to layers that keep the default pattern
        changes_pattern = raw.get("pattern", merged.get("pattern")) != merged.get("pattern")
        if changes_pattern or "density" in raw or "top_t" in raw:
            merged.pop("density", None)
            merged.pop("top_t", None)
        merged.update(raw)
        where = f"layers[{i}]"
        try:
            entries.append(_entry(merged, where))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
    return CompressionConfig(tuple(entries))


def load_config(path) -> CompressionConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(doc)
