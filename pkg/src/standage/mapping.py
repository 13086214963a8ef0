"""
Wall-to-wall age prediction routed by species and pSI rasters, stand-level
synthetic estimates and routed application of models to plots.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .fitting import PlotRecord
from .geodata import DEFAULT_NODATA, Grid, Polygon, cells_in_polygon
from .models import ModelRegistry, Species, predict_age, route_model, snap_si, snap_si_array
from .predictors import MissingPredictorError, derived_parts

OUTPUT_NODATA = DEFAULT_NODATA


class StackError(ValueError):
    pass


@dataclass(frozen=True)
class LayerStack:
    predictors: Mapping[str, Grid]
    species: Grid
    psi: Grid
    mask: Grid | None = None

    def __post_init__(self):
        object.__setattr__(self, "predictors", dict(self.predictors))
        ref = self.species
        layers = [("psi", self.psi)] + [(f"predictor {n}", g) for n, g in self.predictors.items()]
        if self.mask is not None:
            layers.append(("mask", self.mask))
        for name, grid in layers:
            if not grid.same_geometry(ref):
                raise StackError(f"layer {name} does not match the species grid geometry")
        codes = ref.values[ref.valid]
        bad = ~np.isin(codes, [s.value for s in Species])
        if bad.any():
            raise StackError(f"species grid contains codes other than 1, 2, 3: {sorted(set(codes[bad].tolist()))[:5]}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.species.values.shape


@dataclass
class MapTally:
    total: int = 0
    predicted: int = 0
    masked: int = 0
    missing_predictor: int = 0
    invalid: int = 0
    substitutions: Counter = field(default_factory=Counter)

    def merge(self, other: MapTally) -> MapTally:
        return MapTally(
            self.total + other.total,
            self.predicted + other.predicted,
            self.masked + other.masked,
            self.missing_predictor + other.missing_predictor,
            self.invalid + other.invalid,
            self.substitutions + other.substitutions,
        )

    def summary(self) -> str:
        subs = ", ".join(
            f"{sp.label} SI {req}->{used}: {n}" for (sp, req, used), n in sorted(self.substitutions.items())
        )
        return (
            f"cells={self.total} predicted={self.predicted} masked={self.masked} "
            f"missing_predictor={self.missing_predictor} invalid={self.invalid} substitutions=[{subs}]"
        )


def _base_names(name: str) -> tuple[str, ...]:
    parts = derived_parts(name)
    return (name,) if parts is None else tuple(dict.fromkeys(parts))


def _predict_band(stack: LayerStack, registry: ModelRegistry, rows: slice) -> tuple[np.ndarray, MapTally]:
    species = stack.species.values[rows]
    psi = stack.psi.values[rows]
    active = stack.species.valid[rows] & stack.psi.valid[rows]
    if stack.mask is not None:
        active &= stack.mask.valid[rows] & (stack.mask.values[rows] != 0)
    out = np.full(species.shape, OUTPUT_NODATA)
    tally = MapTally(total=species.size, masked=int((~active).sum()))

    snapped = np.zeros(species.shape, dtype=np.int64)
    snapped[active] = snap_si_array(psi[active])
    codes = species.astype(np.int64)
    for sp, si in sorted(set(zip(codes[active].tolist(), snapped[active].tolist()))):
        cells = active & (codes == sp) & (snapped == si)
        model = route_model(registry, sp, si)
        ncells = int(cells.sum())
        if model.si != si:
            tally.substitutions[(Species(sp), si, model.si)] += ncells

        ok = cells.copy()
        for name in model.predictor_names:
            for base in _base_names(name):
                grid = stack.predictors.get(base)
                if grid is None:
                    ok[:] = False
                else:
                    ok &= grid.valid[rows]
        tally.missing_predictor += ncells - int(ok.sum())
        if not ok.any():
            continue

        def get(name, ok=ok):
            # h95_first2 is always derived from h95_first
            if name == "h95_first2" or name not in stack.predictors:
                raise KeyError(name)
            return stack.predictors[name].values[rows][ok]

        eta = np.broadcast_to(np.asarray(model.linear_predictor(get), dtype=np.float64), (int(ok.sum()),))
        with np.errstate(over="ignore"):
            age = model.link.inverse(eta, model.sigma)
        # overflowing back-transforms become nodata rather than inf
        finite = np.isfinite(age)
        out[ok] = np.where(finite, age, OUTPUT_NODATA)
        tally.invalid += int((~finite).sum())
        tally.predicted += int(finite.sum())
    return out, tally


def predict_map(stack: LayerStack, registry: ModelRegistry, threads: int = 1) -> tuple[Grid, MapTally]:
    """Predict age in every cell with a species, a pSI value and all required predictors.

    The raster is split into row bands; every output cell depends only on its
    own inputs, so results do not depend on ``threads``.
    """
    nrows = stack.shape[0]
    threads = max(1, int(threads))
    nbands = min(nrows, threads * 4) if threads > 1 else 1
    bounds = np.linspace(0, nrows, nbands + 1).astype(int)
    bands = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda rows: _predict_band(stack, registry, rows), bands))
    else:
        parts = [_predict_band(stack, registry, rows) for rows in bands]
    values = np.vstack([p[0] for p in parts])
    tally = MapTally()
    for _, t in parts:
        tally = tally.merge(t)
    return stack.species.with_values(values, OUTPUT_NODATA), tally


# ---------------------------------------------------------------------------
# Stand estimates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StandEstimate:
    stand_id: str
    mean_age: float
    cells: int
    area_ha: float
    nodata_cells: int = 0

    @property
    def has_estimate(self) -> bool:
        return self.cells > 0

    @property
    def flags(self) -> str:
        return "" if self.has_estimate else "no-estimate"


def stand_estimates(age_map: Grid, stands: Sequence[Polygon]) -> list[StandEstimate]:
    """Mean predicted age over the valid cells whose centers fall in each stand."""
    flat = age_map.values.ravel()
    out = []
    for stand in stands:
        idx = cells_in_polygon(age_map, stand)
        values = flat[idx]
        valid = values[values != age_map.nodata]
        mean = math.fsum(valid.tolist()) / valid.size if valid.size else math.nan
        out.append(StandEstimate(stand.id, mean, int(valid.size), stand.area / 10_000, int(idx.size - valid.size)))
    return out


def write_stand_csv(estimates: Sequence[StandEstimate], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stand_id", "mean_age", "cells", "area_ha", "flags"])
        for e in estimates:
            writer.writerow([e.stand_id, "NA" if math.isnan(e.mean_age) else repr(e.mean_age), e.cells, repr(e.area_ha), e.flags])


# ---------------------------------------------------------------------------
# Plot-level application
# ---------------------------------------------------------------------------


class Routing(Enum):
    """Which species and SI drive model choice for plot-level application."""

    OBSERVED_SI = "observed-si"
    PREDICTED_SI = "predicted-si"
    OBSERVED_SPECIES = "observed-species"
    PREDICTED_SPECIES = "predicted-species"


@dataclass
class ApplyTally:
    skipped: list[tuple[str, str]] = field(default_factory=list)
    substitutions: Counter = field(default_factory=Counter)


def apply_to_plots(
    plots: Sequence[PlotRecord],
    registry: ModelRegistry,
    routing: Routing = Routing.OBSERVED_SI,
) -> tuple[list[tuple[str, float]], ApplyTally]:
    """Predict every plot with the model chosen by ``routing``.

    ``PREDICTED_SI`` snaps the plot's pSI; ``PREDICTED_SPECIES`` uses the mapped
    species with the observed SI. Plots that cannot be routed or lack a
    predictor are skipped and listed in the tally.
    """
    results = []
    tally = ApplyTally()
    for plot in plots:
        species = plot.species
        si = plot.si
        if routing is Routing.PREDICTED_SI:
            if math.isnan(plot.psi):
                tally.skipped.append((plot.plot_id, "no pSI"))
                continue
            si = snap_si(plot.psi)
        elif routing is Routing.PREDICTED_SPECIES:
            if plot.species_pred is None:
                tally.skipped.append((plot.plot_id, "no predicted species"))
                continue
            species = plot.species_pred
        model = route_model(registry, species, si, tally.substitutions)
        try:
            results.append((plot.plot_id, predict_age(model, plot.predictors)))
        except MissingPredictorError as exc:
            tally.skipped.append((plot.plot_id, str(exc)))
    return results, tally
