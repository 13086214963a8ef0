"""
ALS height metrics, Sentinel-2 spectral predictors and predictor vectors.

Metrics are computed by one grouped, sort-based engine so that a whole plot
and every 16 m cell of a raster go through identical arithmetic.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Mapping
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .geodata import Grid, PointCloud, Polygon, ReturnClass, zonal_weighted_mean

PERCENTILES = (10, 25, 50, 75, 90, 95)
RETURN_SETS = ("first", "first2m", "last")
CC_THRESHOLDS = (2, 5, 10)
N_SLICES = 10


def _stat_names(suffix: str) -> list[str]:
    names = [f"h{stat}_{suffix}" for stat in ("mean", "var", "cv", "kurt", "skew")]
    names += [f"h{p}_{suffix}" for p in PERCENTILES]
    return names


METRIC_NAMES: tuple[str, ...] = tuple(
    [n for s in RETURN_SETS for n in _stat_names(s)]
    + [f"d{i}" for i in range(N_SLICES)]
    + [f"cc{t}" for t in CC_THRESHOLDS]
    + ["n_first", "n_last"]
)
SPECTRAL_BANDS: tuple[str, ...] = ("s2_2", "s2_3", "s2_4", "s2_5", "s2_6", "s2_7", "s2_8", "s2_8A", "s2_11", "s2_12")
SPECTRAL_NAMES: tuple[str, ...] = SPECTRAL_BANDS + ("NDVI",)
TERRAIN_NAMES: tuple[str, ...] = ("DTM", "slope", "distC", "Lat", "Lon")
PREDICTOR_NAMES: tuple[str, ...] = METRIC_NAMES + SPECTRAL_NAMES + TERRAIN_NAMES + ("diffT", "h95_first2")

# leading CSV columns, in the order the published coefficient tables use them
CSV_LEAD = ("h95_first", "h95_first2", "cc2", "cc5", "cc10", "NDVI", "s2_8A", "s2_11",
            "DTM", "distC", "Lat", "Lon", "slope", "diffT")
CSV_COLUMNS: tuple[str, ...] = CSV_LEAD + tuple(n for n in PREDICTOR_NAMES if n not in CSV_LEAD)


class MissingPredictorError(KeyError):
    """A model needs a predictor that is absent or nodata."""

    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"predictor {self.name!r} is missing"


class AssemblyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Derived predictor names
# ---------------------------------------------------------------------------


def derived_parts(name: str) -> tuple[str, ...] | None:
    """Base predictors of a derived term, or None for a plain name.

    ``h95_first2`` and ``<name>_sq`` are squares, ``a:b`` is a product.
    """
    if name == "h95_first2":
        return ("h95_first", "h95_first")
    if ":" in name:
        a, b = name.split(":", 1)
        return (a, b)
    if name.endswith("_sq"):
        base = name[:-3]
        return (base, base)
    return None


def square_name(name: str) -> str:
    return "h95_first2" if name == "h95_first" else f"{name}_sq"


def interaction_name(a: str, b: str) -> str:
    return ":".join(sorted((a, b)))


def is_known_predictor(name: str) -> bool:
    if name in PREDICTOR_NAMES:
        return True
    parts = derived_parts(name)
    return parts is not None and all(p in PREDICTOR_NAMES for p in parts)


def resolve(name: str, lookup: Callable[[str], object]):
    """Value of ``name`` via ``lookup``, deriving squares and products when not stored.

    Works for scalars and numpy arrays alike.
    """
    try:
        return lookup(name)
    except KeyError:
        parts = derived_parts(name)
        if parts is None:
            raise
    a = lookup(parts[0])
    b = a if parts[1] == parts[0] else lookup(parts[1])
    return a * b


# ---------------------------------------------------------------------------
# Percentiles and the grouped metric engine
# ---------------------------------------------------------------------------


def percentile(heights: Sequence[float], p: float) -> float:
    """Linear-interpolation quantile at rank 1 + (n - 1) p of sorted ``heights``."""
    n = len(heights)
    if n == 0:
        raise ValueError("percentile of an empty sequence")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    h = (n - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, n - 1)
    return heights[lo] + (h - lo) * (heights[hi] - heights[lo])


def _grouped_stats(zs: np.ndarray, ks: np.ndarray, ngroups: int, suffix: str) -> dict[str, np.ndarray]:
    """Moments and percentiles per group; input must be sorted by (key, z)."""
    out = {name: np.full(ngroups, np.nan) for name in _stat_names(suffix)}
    if zs.size == 0:
        return out
    starts = np.flatnonzero(np.r_[True, ks[1:] != ks[:-1]])
    groups = ks[starts]
    n = np.diff(np.r_[starts, zs.size])

    mean = np.add.reduceat(zs, starts) / n
    dev = zs - np.repeat(mean, n)
    dev2 = dev * dev
    ss = np.add.reduceat(dev2, starts)
    m2 = ss / n
    m3 = np.add.reduceat(dev2 * dev, starts) / n
    m4 = np.add.reduceat(dev2 * dev2, starts) / n
    spread = m2 > 0
    var = np.where(n > 1, ss / np.maximum(n - 1, 1), 0.0)
    safe_m2 = np.where(spread, m2, 1.0)

    out[f"hmean_{suffix}"][groups] = mean
    out[f"hvar_{suffix}"][groups] = var
    out[f"hcv_{suffix}"][groups] = np.where(mean > 0, np.sqrt(var) / np.where(mean > 0, mean, 1.0), 0.0)
    out[f"hskew_{suffix}"][groups] = np.where(spread, m3 / safe_m2**1.5, 0.0)
    out[f"hkurt_{suffix}"][groups] = np.where(spread, m4 / (safe_m2 * safe_m2), 0.0)
    for p in PERCENTILES:
        h = (n - 1) * (p / 100)
        lo = np.floor(h).astype(np.int64)
        hi = np.minimum(lo + 1, n - 1)
        zlo = zs[starts + lo]
        out[f"h{p}_{suffix}"][groups] = zlo + (h - lo) * (zs[starts + hi] - zlo)
    return out


def _metric_table(cloud: PointCloud, keys: np.ndarray, ngroups: int) -> dict[str, np.ndarray]:
    """Every metric per group; NaN marks groups with no returns in a set."""
    # equal heights are interchangeable, so an unstable sort on z is enough;
    # the stable key sort is a radix sort when keys fit in 16 bits
    order = np.argsort(cloud.z)
    if ngroups > 1:
        key_dtype = np.uint16 if ngroups <= 1 << 16 else np.int64
        order = order[np.argsort(keys[order].astype(key_dtype), kind="stable")]
    z = cloud.z[order]
    keys = keys[order]
    cls = cloud.return_class[order]
    first = (cls == ReturnClass.FIRST) | (cls == ReturnClass.ONLY)
    last = (cls == ReturnClass.LAST) | (cls == ReturnClass.ONLY)
    zf, kf = z[first], keys[first]
    above = zf > 2
    table = {}
    table.update(_grouped_stats(zf, kf, ngroups, "first"))
    table.update(_grouped_stats(zf[above], kf[above], ngroups, "first2m"))
    table.update(_grouped_stats(z[last], keys[last], ngroups, "last"))

    n_first = np.bincount(kf, minlength=ngroups)
    n_last = np.bincount(keys[last], minlength=ngroups)
    has_first = n_first > 0
    denom = np.where(has_first, n_first, 1)
    for t in CC_THRESHOLDS:
        count = np.bincount(kf[zf > t], minlength=ngroups)
        table[f"cc{t}"] = np.where(has_first, count / denom, np.nan)

    top = np.full(ngroups, -np.inf)
    np.maximum.at(top, kf, zf)
    ztop = top[kf]
    bins = np.zeros(zf.size, dtype=np.int64)
    for i in range(1, N_SLICES):
        bins += zf >= ztop * i / N_SLICES
    bins[ztop == 0] = 0
    counts = np.bincount(kf * N_SLICES + bins, minlength=ngroups * N_SLICES).reshape(ngroups, N_SLICES)
    for i in range(N_SLICES):
        table[f"d{i}"] = np.where(has_first, counts[:, i] / denom, np.nan)
    table["n_first"] = n_first.astype(np.float64)
    table["n_last"] = n_last.astype(np.float64)
    return {name: table[name] for name in METRIC_NAMES}


def als_metrics(cloud: PointCloud) -> dict[str, float]:
    """Height statistics for first, first-above-2m and last returns plus cover and density slices.

    Fields of an empty return set are NaN.
    """
    if not cloud.normalized:
        raise ValueError("als_metrics requires a height-normalized point cloud")
    keys = np.zeros(len(cloud), dtype=np.int64)
    table = _metric_table(cloud, keys, 1)
    return {name: float(v[0]) for name, v in table.items()}


def metrics_grid(cloud: PointCloud, template: Grid) -> dict[str, Grid]:
    """Rasterize every metric onto ``template``'s cells.

    Cells without first returns are nodata in every layer; points outside the
    template are ignored.
    """
    if not cloud.normalized:
        raise ValueError("metrics_grid requires a height-normalized point cloud")
    row, col = template.cell_index(cloud.x, cloud.y)
    inside = row >= 0
    cloud = cloud.subset(inside)
    keys = row[inside] * template.ncols + col[inside]
    ncells = template.nrows * template.ncols
    table = _metric_table(cloud, keys, ncells)
    has_first = table["n_first"] > 0
    out = {}
    for name, values in table.items():
        ok = has_first & ~np.isnan(values)
        grid_values = np.where(ok, values, template.nodata).reshape(template.nrows, template.ncols)
        out[name] = template.with_values(grid_values)
    return out


# ---------------------------------------------------------------------------
# Spectral predictors
# ---------------------------------------------------------------------------


def ndvi(s2_8, s2_4):
    """(NIR - red) / (NIR + red); a zero denominator gives 0."""
    nir = np.asarray(s2_8, dtype=np.float64)
    red = np.asarray(s2_4, dtype=np.float64)
    if np.any(nir < 0) or np.any(red < 0):
        raise ValueError("band reflectance must be non-negative")
    total = nir + red
    out = np.where(total > 0, (nir - red) / np.where(total > 0, total, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def spectral_vector(bands: Mapping[str, Grid], polygon: Polygon) -> dict[str, float]:
    """Area-weighted band means over a plot polygon, plus NDVI from the band means."""
    out = {}
    for name in SPECTRAL_BANDS:
        if name in bands:
            out[name] = zonal_weighted_mean(bands[name], polygon)
    if "s2_8" in out and "s2_4" in out:
        out["NDVI"] = ndvi(out["s2_8"], out["s2_4"])
    return out


def ndvi_grid(s2_8: Grid, s2_4: Grid) -> Grid:
    valid = s2_8.valid & s2_4.valid
    nir = np.where(valid, s2_8.values, 0.0)
    red = np.where(valid, s2_4.values, 0.0)
    return s2_8.with_values(np.where(valid, ndvi(nir, red), s2_8.nodata))


# ---------------------------------------------------------------------------
# Predictor vectors
# ---------------------------------------------------------------------------


class PredictorVector(Mapping):
    """Named predictor values. NaN entries are missing and raise on access."""

    def __init__(self, values: Mapping[str, float]):
        self._values = {k: float(v) for k, v in values.items()}

    def __getitem__(self, name: str) -> float:
        value = self._values.get(name)
        if value is None or math.isnan(value):
            raise MissingPredictorError(name)
        return value

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def __contains__(self, name) -> bool:
        value = self._values.get(name)
        return value is not None and not math.isnan(value)

    def __repr__(self):
        return f"PredictorVector({self._values!r})"

    @property
    def missing(self) -> frozenset[str]:
        return frozenset(k for k, v in self._values.items() if math.isnan(v))

    def value(self, name: str) -> float:
        """Stored or derived (square / interaction) value."""
        return resolve(name, self.__getitem__)

    def raw(self) -> dict[str, float]:
        return dict(self._values)

    def replace(self, **updates: float) -> PredictorVector:
        values = dict(self._values)
        values.update(updates)
        return PredictorVector(values)


def assemble_predictors(
    metrics: Mapping[str, float],
    spectral: Mapping[str, float] | None,
    terrain: Mapping[str, float],
    diffT: float,
) -> PredictorVector:
    """Merge metric, spectral and terrain inputs; adds ``h95_first2``.

    Absent spectral data or NaN inputs are recorded as missing.
    """
    merged: dict[str, float] = {}
    spectral = {name: math.nan for name in SPECTRAL_NAMES} if spectral is None else spectral
    for source in (metrics, spectral, terrain, {"diffT": diffT}):
        for name, value in source.items():
            if name in merged:
                raise AssemblyError(f"predictor {name!r} supplied by more than one input")
            merged[name] = math.nan if value is None else float(value)
    for name in SPECTRAL_NAMES + TERRAIN_NAMES:
        merged.setdefault(name, math.nan)
    h95 = merged.get("h95_first", math.nan)
    merged["h95_first2"] = h95 * h95
    return PredictorVector(merged)


def _fmt(value: float) -> str:
    return "NA" if math.isnan(value) else repr(value)


def write_predictor_csv(rows: Sequence[tuple[str, PredictorVector]], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("plot_id",) + CSV_COLUMNS)
        for plot_id, vector in rows:
            raw = vector.raw()
            writer.writerow([plot_id] + [_fmt(raw.get(name, math.nan)) for name in CSV_COLUMNS])
