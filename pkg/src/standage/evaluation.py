"""
Error statistics (RMSE, MD and their relative forms, optionally area
weighted), per-class breakdowns and a synthetic scene generator that inverts
the age models to produce layer stacks with known truth.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .fitting import PlotRecord
from .geodata import Grid
from .mapping import LayerStack, OUTPUT_NODATA
from .models import AgeModel, ModelRegistry, Species, route_model
from .predictors import PredictorVector, derived_parts


@dataclass(frozen=True)
class EvalPair:
    observed: float
    predicted: float
    weight: float = 1.0
    label: str = ""


@dataclass(frozen=True)
class ReportRow:
    label: str
    n: int
    rmse: float
    rmse_pct: float
    md: float
    md_pct: float
    mean_observed: float


def _normalized_weights(w: np.ndarray) -> np.ndarray:
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    positive = w[w > 0]
    if positive.size == 0:
        raise ValueError("weights sum to zero")
    # rescaling by the smallest positive weight keeps uniform weights exactly 1
    w = w / positive.min()
    return w / math.fsum(w.tolist())


def rmse_md(pairs: Sequence[EvalPair], weighted: bool = False, label: str = "All") -> ReportRow:
    """RMSE and MD (observed minus predicted) with relative forms in percent.

    Unweighted statistics use w_i = 1/n. Weighted statistics normalize the
    weights to sum to one and use them in place of 1/n, including for the
    mean observed value that scales RMSE% and MD%.
    """
    if not pairs:
        raise ValueError("no pairs to evaluate")
    obs = np.array([p.observed for p in pairs], dtype=np.float64)
    pred = np.array([p.predicted for p in pairs], dtype=np.float64)
    w = np.array([p.weight for p in pairs], dtype=np.float64) if weighted else np.ones(obs.size)
    w = _normalized_weights(w)
    d = obs - pred
    rmse = math.sqrt(math.fsum((w * d * d).tolist()))
    md = math.fsum((w * d).tolist())
    mean_obs = math.fsum((w * obs).tolist())
    if mean_obs == 0:
        rmse_pct = md_pct = math.nan
    else:
        rmse_pct = 100 * rmse / mean_obs
        md_pct = 100 * md / mean_obs
    return ReportRow(label, len(pairs), rmse, rmse_pct, md, md_pct, mean_obs)


def _label_key(label: str):
    numbers = re.findall(r"-?\d+(?:\.\d+)?", label)
    return (0, float(numbers[-1]), label) if numbers else (1, 0.0, label)


def breakdown(pairs: Sequence[EvalPair], weighted: bool = False) -> list[ReportRow]:
    """One row per class label, in numeric (SI) order, then the pooled ``All`` row."""
    labels = sorted({p.label for p in pairs}, key=_label_key)
    rows = [rmse_md([p for p in pairs if p.label == lab], weighted, lab) for lab in labels]
    rows.append(rmse_md(pairs, weighted, "All"))
    return rows


def format_report(rows: Sequence[ReportRow], title: str = "") -> str:
    labels = [r.label for r in rows]
    width = max(8, *(len(l) for l in labels)) + 2
    fields = [("n", "n", "{:d}"), ("RMSE", "rmse", "{:.1f}"), ("RMSE%", "rmse_pct", "{:.1f}"),
              ("MD", "md", "{:.1f}"), ("MD%", "md_pct", "{:.1f}")]
    lines = [title] if title else []
    lines.append(" " * 8 + "".join(l.rjust(width) for l in labels))
    for head, attr, fmt in fields:
        cells = [fmt.format(getattr(r, attr)) if not (isinstance(getattr(r, attr), float) and math.isnan(getattr(r, attr))) else "NA" for r in rows]
        lines.append(head.ljust(8) + "".join(c.rjust(width) for c in cells))
    return "\n".join(lines) + "\n"


def write_report_csv(rows: Sequence[ReportRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "n", "rmse", "rmse_pct", "md", "md_pct", "mean_observed"])
        for r in rows:
            writer.writerow([r.label, r.n, repr(r.rmse), repr(r.rmse_pct), repr(r.md), repr(r.md_pct), repr(r.mean_observed)])


def scatter_export(pairs: Sequence[EvalPair], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["observed", "predicted", "class", "weight"])
        for p in pairs:
            writer.writerow([repr(float(p.observed)), repr(float(p.predicted)), p.label, repr(float(p.weight))])


def read_scatter(path) -> list[EvalPair]:
    with Path(path).open(newline="") as fh:
        return [
            EvalPair(float(r["observed"]), float(r["predicted"]), float(r["weight"]), r["class"])
            for r in csv.DictReader(fh)
        ]


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

BASELINE: dict[str, float] = {
    "cc2": 0.8,
    "cc5": 0.6,
    "cc10": 0.4,
    "NDVI": 0.8,
    "s2_8A": 2500.0,
    "s2_11": 1100.0,
    "DTM": 300.0,
    "distC": 20000.0,
    "Lat": 61.0,
    "Lon": 10.0,
    "slope": 8.0,
    "diffT": 0.0,
}

AGE_ENVELOPE = (3.0, 287.0)


@dataclass
class SceneSpec:
    ncols: int = 100
    nrows: int = 100
    species_mix: Mapping[Species, float] = field(default_factory=lambda: {Species.SPRUCE: 1.0})
    si_mix: Mapping[int, float] = field(default_factory=lambda: {14: 1.0, 17: 1.0, 20: 1.0, 23: 1.0})
    age_range: tuple[float, float] = (10.0, 120.0)
    seed: int = 0
    cellsize: float = 16.0
    xll: float = 0.0
    yll: float = 0.0
    baseline: Mapping[str, float] = field(default_factory=lambda: dict(BASELINE))
    max_redraws: int = 200

    def __post_init__(self):
        lo, hi = self.age_range
        if not AGE_ENVELOPE[0] <= lo <= hi <= AGE_ENVELOPE[1]:
            raise ValueError(f"age range must lie within {AGE_ENVELOPE}, got {self.age_range}")
        if self.ncols < 1 or self.nrows < 1:
            raise ValueError("scene needs at least one cell")
        if not self.species_mix or not self.si_mix:
            raise ValueError("species and SI mixes must be non-empty")

    def manifest(self) -> dict[str, str]:
        out = {
            "ncols": str(self.ncols),
            "nrows": str(self.nrows),
            "species_mix": ",".join(f"{Species.parse(k).label}:{v!r}" for k, v in self.species_mix.items()),
            "si_mix": ",".join(f"{k}:{v!r}" for k, v in self.si_mix.items()),
            "age_range": f"{self.age_range[0]!r},{self.age_range[1]!r}",
            "seed": str(self.seed),
            "cellsize": repr(self.cellsize),
            "xll": repr(self.xll),
            "yll": repr(self.yll),
            "max_redraws": str(self.max_redraws),
        }
        out.update({f"baseline.{k}": repr(v) for k, v in self.baseline.items()})
        return out


@dataclass
class Scene:
    stack: LayerStack
    truth: Grid
    observed: Grid
    si: Grid
    plots: list[PlotRecord]
    redraws: int
    spec: SceneSpec


def invert_height(model: AgeModel, eta, baseline: Mapping[str, float]) -> np.ndarray:
    """h95_first giving linear predictor ``eta`` with all other predictors at ``baseline``.

    Picks the root on the ascending branch (where eta increases with height);
    NaN where no non-negative height reaches ``eta``.
    """
    eta = np.asarray(eta, dtype=np.float64)
    const = model.intercept
    b1 = b2 = 0.0
    for name, coef in model.terms:
        if name == "h95_first":
            b1 = coef
        elif name == "h95_first2":
            b2 = coef
        else:
            parts = derived_parts(name) or (name,)
            if "h95_first" in parts:
                raise ValueError(f"cannot invert a model with term {name!r}")
            value = 1.0
            for part in parts:
                value *= baseline[part]
            const = const + coef * value
    disc = b1 * b1 - 4 * b2 * (const - eta)
    root = np.sqrt(np.where(disc >= 0, disc, np.nan))
    with np.errstate(divide="ignore", invalid="ignore"):
        # (-b1 + sqrt(D)) / (2 b2) written without cancellation; also covers b2 == 0
        h = 2 * (eta - const) / (b1 + root)
    return np.where((disc >= 0) & (b1 + root > 0) & (h >= 0), h, np.nan)


def _draw(rng, mix: Mapping, size: int):
    keys = list(mix)
    p = np.array([float(mix[k]) for k in keys])
    if np.any(p < 0) or p.sum() <= 0:
        raise ValueError("mix weights must be non-negative with a positive sum")
    idx = rng.choice(len(keys), size=size, p=p / p.sum())
    return np.array([int(k) for k in keys])[idx]


def synth_scene(registry: ModelRegistry, spec: SceneSpec) -> Scene:
    """Generate a layer stack whose h95_first reproduces drawn ages through the routed models.

    Every cell draws species, SI and a uniform age; h95_first is solved so the
    routed model's linear predictor equals ln(age). Ages a model cannot reach
    are redrawn. Observed ages add N(0, sigma^2) noise on the log scale using
    the routed model's sigma.
    """
    rng = np.random.default_rng(spec.seed)
    ncell = spec.ncols * spec.nrows
    species = _draw(rng, {Species.parse(k): v for k, v in spec.species_mix.items()}, ncell)
    si = _draw(rng, spec.si_mix, ncell)
    lo, hi = spec.age_range
    age = rng.uniform(lo, hi, ncell)
    h95 = np.full(ncell, np.nan)
    sigma = np.zeros(ncell)
    needed: set[str] = set()

    groups = sorted(set(zip(species.tolist(), si.tolist())))
    models = {key: route_model(registry, *key) for key in groups}
    for model in models.values():
        for name in model.predictor_names:
            needed.update(derived_parts(name) or (name,))
    needed -= {"h95_first"}
    missing = sorted(needed - set(spec.baseline))
    if missing:
        raise ValueError(f"baseline lacks predictors {', '.join(missing)}")

    redraws = 0
    for key in groups:
        model = models[key]
        cells = np.flatnonzero((species == key[0]) & (si == key[1]))
        sigma[cells] = model.sigma
        todo = cells
        for attempt in range(spec.max_redraws + 1):
            h95[todo] = invert_height(model, np.log(age[todo]), spec.baseline)
            todo = todo[np.isnan(h95[todo])]
            if todo.size == 0:
                break
            if attempt == spec.max_redraws:
                raise ValueError(
                    f"{Species(key[0]).label} SI {key[1]}: ages in {spec.age_range} are unreachable "
                    f"with the baseline predictors"
                )
            redraws += todo.size
            age[todo] = rng.uniform(lo, hi, todo.size)

    observed = age * np.exp(rng.normal(0.0, 1.0, ncell) * sigma)

    shape = (spec.nrows, spec.ncols)

    def grid(values):
        return Grid(np.asarray(values, dtype=np.float64).reshape(shape), spec.xll, spec.yll, spec.cellsize, OUTPUT_NODATA)

    # every baseline layer is written so any model can be applied to the scene
    layers = {"h95_first": grid(h95)}
    for name in sorted(needed | set(spec.baseline)):
        layers[name] = grid(np.full(ncell, spec.baseline[name]))
    si_grid = grid(si)
    stack = LayerStack(layers, grid(species), si_grid)

    plots = []
    base = {name: float(spec.baseline[name]) for name in sorted(needed | set(spec.baseline))}
    for i in range(ncell):
        h = float(h95[i])
        vector = PredictorVector({**base, "h95_first": h, "h95_first2": h * h})
        sp = Species(int(species[i]))
        plots.append(PlotRecord(f"r{i // spec.ncols}c{i % spec.ncols}", sp, int(si[i]), float(observed[i]),
                                vector, float(si[i]), sp))
    return Scene(stack, grid(age), grid(observed), si_grid, plots, redraws, spec)


def write_manifest(entries: Mapping[str, str], path) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in entries.items()))


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out
