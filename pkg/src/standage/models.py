"""
Site-index specific age models: representation, the built-in published
registry, prediction with back-transformation, SI snapping and routing.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from enum import Enum, IntEnum
from functools import lru_cache
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ._published import PUBLISHED_MODELS
from .predictors import MissingPredictorError, is_known_predictor, resolve

SI_LEVELS: tuple[int, ...] = (6, 8, 11, 14, 17, 20, 23, 26)


class Species(IntEnum):
    """Species codes as used in species rasters."""

    SPRUCE = 1
    PINE = 2
    BIRCH = 3

    @classmethod
    def parse(cls, value) -> Species:
        if isinstance(value, Species):
            return value
        if isinstance(value, (int, np.integer)) or (isinstance(value, str) and value.strip().isdigit()):
            return cls(int(value))
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ValueError(f"unknown species {value!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


class Link(Enum):
    LOG = "log"
    SQRT = "sqrt"
    IDENTITY = "identity"

    def forward(self, age):
        age = np.asarray(age, dtype=np.float64)
        if self is Link.LOG:
            return np.log(age)
        if self is Link.SQRT:
            return np.sqrt(age)
        return age

    def inverse(self, eta, sigma: float):
        """Back-transform a linear predictor to years, including the bias correction."""
        eta = np.asarray(eta, dtype=np.float64)
        if self is Link.LOG:
            return np.exp(eta + sigma * sigma / 2)
        if self is Link.SQRT:
            return np.where(eta < 0, 0.0, eta * eta + sigma * sigma)
        return np.maximum(eta, 0.0)


class RoutingError(LookupError):
    pass


class RegistryFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AgeModel:
    species: Species
    si: int
    intercept: float
    terms: tuple[tuple[str, float], ...]
    sigma: float
    link: Link = Link.LOG

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple((str(n), float(c)) for n, c in self.terms))
        names = self.predictor_names
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate predictor in model {self.species.label} SI {self.si}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")

    @property
    def predictor_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.terms)

    def coefficient(self, name: str) -> float:
        for n, c in self.terms:
            if n == name:
                return c
        raise KeyError(name)

    def linear_predictor(self, lookup: Callable[[str], object]):
        """Intercept plus the weighted predictors, accumulated in term order."""
        eta = self.intercept
        for name, coef in self.terms:
            eta = eta + coef * resolve(name, lookup)
        return eta

    def with_sigma(self, sigma: float) -> AgeModel:
        return AgeModel(self.species, self.si, self.intercept, self.terms, sigma, self.link)


def _lookup(x: Mapping[str, float]) -> Callable[[str], np.ndarray]:
    def get(name: str):
        try:
            value = x[name]
        except KeyError:
            raise MissingPredictorError(name) from None
        if value is None or math.isnan(value):
            raise MissingPredictorError(name)
        return np.array([value], dtype=np.float64)

    return get


def predict_age(model: AgeModel, x: Mapping[str, float]) -> float:
    """Predicted age in years for one predictor vector."""
    eta = model.linear_predictor(_lookup(x))
    eta = np.broadcast_to(np.asarray(eta, dtype=np.float64), (1,))
    return float(model.link.inverse(eta, model.sigma)[0])


def snap_si(value: float, available: Sequence[int] = SI_LEVELS) -> int:
    """Closest SI level; ties go to the lower level, out-of-range values clamp."""
    if not available:
        raise ValueError("no SI levels to snap to")
    if not math.isfinite(value):
        raise ValueError(f"cannot snap non-finite value {value}")
    return min(available, key=lambda level: (abs(level - value), level))


def snap_si_array(values: np.ndarray, available: Sequence[int] = SI_LEVELS) -> np.ndarray:
    levels = np.array(sorted(available), dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dist = np.abs(values[..., None] - levels)
    # argmin returns the first minimum, i.e. the lower level on ties
    return levels[np.argmin(dist, axis=-1)].astype(np.int64)


@dataclass(frozen=True)
class ModelRegistry:
    models: Mapping[tuple[Species, int], AgeModel]
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "models", dict(self.models))

    def __len__(self) -> int:
        return len(self.models)

    def __iter__(self):
        return iter(self.models.values())

    def __getitem__(self, key: tuple[Species, int]) -> AgeModel:
        species, si = key
        return self.models[(Species.parse(species), int(si))]

    def levels(self, species: Species) -> list[int]:
        return sorted(si for sp, si in self.models if sp == species)

    def species(self) -> list[Species]:
        return sorted({sp for sp, _ in self.models})

    def map_models(self, fn: Callable[[AgeModel], AgeModel], provenance: str | None = None) -> ModelRegistry:
        new = {key: fn(m) for key, m in self.models.items()}
        return ModelRegistry(new, self.provenance if provenance is None else provenance)


def route_model(registry: ModelRegistry, species, si: int, tally: Counter | None = None) -> AgeModel:
    """Model for (species, si), falling back to the nearest available SI of that species.

    Fallbacks are counted in ``tally`` under ``(species, requested_si, used_si)``.
    """
    species = Species.parse(species)
    levels = registry.levels(species)
    if not levels:
        raise RoutingError(f"no models for species {species.label}")
    used = si if si in levels else snap_si(si, levels)
    if used != si and tally is not None:
        tally[(species, int(si), used)] += 1
    return registry.models[(species, used)]


def response_curve(
    model: AgeModel,
    sweep: str,
    lo: float,
    hi: float,
    steps: int,
    baseline: Mapping[str, float],
) -> list[tuple[float, float]]:
    """Predicted age along evenly spaced values of one predictor, others fixed.

    Sweeping ``h95_first`` also updates ``h95_first2``.
    """
    if sweep not in model.predictor_names:
        raise ValueError(f"model {model.species.label} SI {model.si} does not use {sweep!r}")
    if sweep == "h95_first2":
        raise ValueError("h95_first2 is derived from h95_first; sweep h95_first instead")
    values = dict(baseline)
    curve = []
    for v in np.linspace(lo, hi, steps):
        v = float(v)
        values[sweep] = v
        if sweep == "h95_first":
            values["h95_first2"] = v * v
        curve.append((v, predict_age(model, values)))
    return curve


# ---------------------------------------------------------------------------
# Built-in registry and registry files
# ---------------------------------------------------------------------------


@lru_cache(maxsize=1)
def builtin_registry() -> ModelRegistry:
    """The 22 published log-link models (8 spruce, 7 pine, 7 birch)."""
    models = {}
    for species_name, by_si in PUBLISHED_MODELS.items():
        species = Species.parse(species_name)
        for si, entry in by_si.items():
            rows = entry["rows"]
            assert rows[0][0] == "Intercept"
            terms = tuple((name, float(est)) for name, est, *_ in rows[1:])
            models[(species, si)] = AgeModel(species, si, float(rows[0][1]), terms, float(entry["sigma"]))
    return ModelRegistry(models, "published-tables")


def _num(value: float) -> str:
    return f"{value:.17g}"


def save_registry(registry: ModelRegistry, path) -> None:
    lines = [f"# provenance={registry.provenance}"]
    for (species, si), model in sorted(registry.models.items()):
        lines.append(
            f"[model species={species.label} si={si} link={model.link.value} sigma={_num(model.sigma)}]"
        )
        lines.append(f"intercept {_num(model.intercept)}")
        lines.extend(f"term {name} {_num(coef)}" for name, coef in model.terms)
        lines.append("")
    Path(path).write_text("\n".join(lines))


_HEADER = re.compile(r"\[model\s+(.*)\]$")


def load_registry(path) -> ModelRegistry:
    provenance = ""
    blocks: list[dict] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line[1:].strip().startswith("provenance="):
                provenance = line[1:].strip()[len("provenance="):]
            continue
        header = _HEADER.match(line)
        if header:
            fields = dict(item.split("=", 1) for item in header.group(1).split())
            try:
                blocks.append({
                    "species": Species.parse(fields["species"]),
                    "si": int(fields["si"]),
                    "link": Link(fields.get("link", "log")),
                    "sigma": float(fields["sigma"]),
                    "intercept": None,
                    "terms": [],
                    "line": lineno,
                })
            except (KeyError, ValueError) as exc:
                raise RegistryFormatError(f"line {lineno}: bad model header ({exc})") from None
            continue
        if not blocks:
            raise RegistryFormatError(f"line {lineno}: entry outside a model block")
        parts = line.split()
        if parts[0] == "intercept" and len(parts) == 2:
            blocks[-1]["intercept"] = float(parts[1])
        elif parts[0] == "term" and len(parts) == 3:
            blocks[-1]["terms"].append((parts[1], float(parts[2])))
        else:
            raise RegistryFormatError(f"line {lineno}: cannot parse {line!r}")

    unknown = sorted({n for b in blocks for n, _ in b["terms"] if not is_known_predictor(n)})
    if unknown:
        raise RegistryFormatError(f"unknown predictor names: {', '.join(unknown)}")
    models = {}
    for b in blocks:
        if b["intercept"] is None:
            raise RegistryFormatError(f"line {b['line']}: model block without intercept")
        key = (b["species"], b["si"])
        if key in models:
            raise RegistryFormatError(f"line {b['line']}: duplicate model {key[0].label} SI {key[1]}")
        models[key] = AgeModel(b["species"], b["si"], b["intercept"], tuple(b["terms"]), b["sigma"], b["link"])
    return ModelRegistry(models, provenance)
