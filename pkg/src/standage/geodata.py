"""
Grid, point-cloud and polygon primitives shared by the rest of the package.

Grids follow the ESRI ASCII convention: row 0 is the northern edge and the
georeference is the lower-left corner of the lower-left cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import shapely

DEFAULT_NODATA = -9999.0

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


class GridFormatError(ValueError):
    """Malformed ASCII grid header or value line."""


class DimensionError(ValueError):
    """Array shape does not agree with the declared grid dimensions."""


class EmptyZoneError(ValueError):
    """A polygon overlaps no valid grid cell."""


@dataclass(frozen=True, eq=False)
class Grid:
    """Single-band raster. ``values`` has shape (nrows, ncols), north row first."""

    values: np.ndarray
    xll: float
    yll: float
    cellsize: float
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise DimensionError(f"grid values must be a non-empty 2-D array, got shape {values.shape}")
        if not self.cellsize > 0:
            raise ValueError(f"cellsize must be positive, got {self.cellsize}")
        if not math.isfinite(self.nodata):
            raise ValueError("nodata sentinel must be finite")
        if not np.all(np.isfinite(values) | (values == self.nodata)):
            raise ValueError("grid cells must be finite or equal to the nodata sentinel")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "xll", float(self.xll))
        object.__setattr__(self, "yll", float(self.yll))
        object.__setattr__(self, "cellsize", float(self.cellsize))
        object.__setattr__(self, "nodata", float(self.nodata))

    @property
    def nrows(self) -> int:
        return self.values.shape[0]

    @property
    def ncols(self) -> int:
        return self.values.shape[1]

    @property
    def ytop(self) -> float:
        return self.yll + self.nrows * self.cellsize

    @property
    def valid(self) -> np.ndarray:
        return self.values != self.nodata

    def same_geometry(self, other: Grid) -> bool:
        return (
            self.values.shape == other.values.shape
            and self.xll == other.xll
            and self.yll == other.yll
            and self.cellsize == other.cellsize
        )

    def with_values(self, values: np.ndarray, nodata: float | None = None) -> Grid:
        """New grid on the same georeference."""
        return Grid(values, self.xll, self.yll, self.cellsize, self.nodata if nodata is None else nodata)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Center coordinates as two (nrows, ncols) arrays."""
        cols = self.xll + (np.arange(self.ncols) + 0.5) * self.cellsize
        rows = self.ytop - (np.arange(self.nrows) + 0.5) * self.cellsize
        return np.meshgrid(cols, rows)

    def cell_index(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Row and column of the cell containing each point; -1 when outside."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        col = np.floor((x - self.xll) / self.cellsize).astype(np.int64)
        row = np.floor((self.ytop - y) / self.cellsize).astype(np.int64)
        inside = (col >= 0) & (col < self.ncols) & (row >= 0) & (row < self.nrows)
        return np.where(inside, row, -1), np.where(inside, col, -1)

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return (
            self.same_geometry(other)
            and self.nodata == other.nodata
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


# ---------------------------------------------------------------------------
# ASCII grid I/O
# ---------------------------------------------------------------------------


def format_number(value: float) -> str:
    """Up to 10 significant digits with trailing zeros trimmed."""
    text = f"{value:.10g}"
    return "0" if text == "-0" else text


def read_grid(path) -> Grid:
    """Parse an ESRI ASCII grid (``ncols``, ``nrows``, ``xllcorner`` ... header)."""
    lines = Path(path).read_text().splitlines()
    header: dict[str, float] = {}
    pos = 0
    while pos < len(lines) and len(header) < 6:
        line = lines[pos]
        parts = line.split()
        if not parts:
            pos += 1
            continue
        key = parts[0].lower()
        if key not in _HEADER_KEYS and key not in ("xllcenter", "yllcenter"):
            # NODATA_value is optional; the first numeric token starts the data block
            if "ncols" in header and "nrows" in header and key[0] in "+-.0123456789":
                break
            raise GridFormatError(f"line {pos + 1}: unexpected header entry {line.strip()!r}")
        if len(parts) != 2:
            raise GridFormatError(f"line {pos + 1}: expected '<key> <value>', got {line.strip()!r}")
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise GridFormatError(f"line {pos + 1}: non-numeric header value {line.strip()!r}") from None
        pos += 1

    for required in ("ncols", "nrows", "cellsize"):
        if required not in header:
            raise GridFormatError(f"missing header entry {required!r}")
    ncols, nrows = header["ncols"], header["nrows"]
    if ncols != int(ncols) or nrows != int(nrows) or ncols < 1 or nrows < 1:
        raise GridFormatError(f"ncols/nrows must be positive integers, got {ncols}, {nrows}")
    ncols, nrows = int(ncols), int(nrows)
    cellsize = header["cellsize"]
    if "xllcorner" in header:
        xll = header["xllcorner"]
    elif "xllcenter" in header:
        xll = header["xllcenter"] - cellsize / 2
    else:
        raise GridFormatError("missing header entry 'xllcorner'")
    if "yllcorner" in header:
        yll = header["yllcorner"]
    elif "yllcenter" in header:
        yll = header["yllcenter"] - cellsize / 2
    else:
        raise GridFormatError("missing header entry 'yllcorner'")
    nodata = header.get("nodata_value", DEFAULT_NODATA)

    rows = []
    for lineno in range(pos, len(lines)):
        parts = lines[lineno].split()
        if not parts:
            continue
        if len(parts) != ncols:
            raise DimensionError(f"line {lineno + 1}: expected {ncols} values, found {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise GridFormatError(f"line {lineno + 1}: non-numeric value") from None
    if len(rows) != nrows:
        raise DimensionError(f"expected {nrows} rows of values, found {len(rows)}")
    return Grid(np.array(rows), xll, yll, cellsize, nodata)


def write_grid(grid: Grid, path) -> None:
    out = [
        f"ncols {grid.ncols}",
        f"nrows {grid.nrows}",
        f"xllcorner {format_number(grid.xll)}",
        f"yllcorner {format_number(grid.yll)}",
        f"cellsize {format_number(grid.cellsize)}",
        f"NODATA_value {format_number(grid.nodata)}",
    ]
    for row in grid.values:
        out.append(" ".join(format_number(v) for v in row.tolist()))
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------


class ReturnClass(IntEnum):
    FIRST = 1
    INTERMEDIATE = 2
    LAST = 3
    ONLY = 4


class PointRecord(NamedTuple):
    x: float
    y: float
    z: float
    return_class: ReturnClass


def classify_returns(return_number, number_of_returns) -> np.ndarray:
    return_number = np.asarray(return_number)
    number_of_returns = np.asarray(number_of_returns)
    first = return_number == 1
    last = return_number == number_of_returns
    cls = np.full(return_number.shape, ReturnClass.INTERMEDIATE, dtype=np.uint8)
    cls[first] = ReturnClass.FIRST
    cls[last] = ReturnClass.LAST
    cls[first & last] = ReturnClass.ONLY
    return cls


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Column-oriented laser returns. ``z`` is height above ground once normalized."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    return_class: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arrays = {}
        for name in ("x", "y", "z"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            arrays[name] = arr
        cls = np.array(self.return_class, dtype=np.uint8).reshape(-1)
        n = arrays["x"].size
        if any(a.size != n for a in arrays.values()) or cls.size != n:
            raise DimensionError("point attribute arrays differ in length")
        for name, arr in arrays.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite {name} coordinate in point cloud")
        if n and (cls.min() < ReturnClass.FIRST or cls.max() > ReturnClass.ONLY):
            raise ValueError("invalid return class code")
        for name, arr in [*arrays.items(), ("return_class", cls)]:
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def from_records(cls, records: Iterable[PointRecord], normalized: bool = False) -> PointCloud:
        records = list(records)
        if not records:
            return cls(np.empty(0), np.empty(0), np.empty(0), np.empty(0, np.uint8), normalized)
        x, y, z, rc = zip(*records)
        return cls(x, y, z, [int(c) for c in rc], normalized)

    def __len__(self) -> int:
        return self.x.size

    def records(self) -> list[PointRecord]:
        return [
            PointRecord(float(a), float(b), float(c), ReturnClass(int(d)))
            for a, b, c, d in zip(self.x, self.y, self.z, self.return_class)
        ]

    @property
    def is_first(self) -> np.ndarray:
        return (self.return_class == ReturnClass.FIRST) | (self.return_class == ReturnClass.ONLY)

    @property
    def is_last(self) -> np.ndarray:
        return (self.return_class == ReturnClass.LAST) | (self.return_class == ReturnClass.ONLY)

    def subset(self, mask) -> PointCloud:
        return PointCloud(self.x[mask], self.y[mask], self.z[mask], self.return_class[mask], self.normalized)

    def translated(self, dx: float = 0.0, dy: float = 0.0) -> PointCloud:
        return PointCloud(self.x + dx, self.y + dy, self.z, self.return_class, self.normalized)


def read_points(path, normalized: bool = False) -> PointCloud:
    """Read ``x y z return_number number_of_returns`` text records."""
    data = np.loadtxt(path, comments="#", ndmin=2)
    if data.size == 0:
        return PointCloud(np.empty(0), np.empty(0), np.empty(0), np.empty(0, np.uint8), normalized)
    if data.shape[1] != 5:
        raise GridFormatError(f"{path}: expected 5 columns per point record, found {data.shape[1]}")
    return PointCloud(data[:, 0], data[:, 1], data[:, 2], classify_returns(data[:, 3], data[:, 4]), normalized)


class NormalizationTally(NamedTuple):
    dropped: int
    clamped: int


def bilinear(grid: Grid, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Interpolate between the four surrounding cell centers.

    Returns ``(values, ok)``; ``ok`` is False where a point lies outside the
    hull of cell centers or any of its four neighbours is nodata.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    u = (x - grid.xll) / grid.cellsize - 0.5
    v = (grid.ytop - y) / grid.cellsize - 0.5
    # positions within rounding error of a cell center land on it exactly
    u = np.where(np.abs(u - np.round(u)) < 1e-9, np.round(u), u)
    v = np.where(np.abs(v - np.round(v)) < 1e-9, np.round(v), v)
    c0 = np.floor(u).astype(np.int64)
    r0 = np.floor(v).astype(np.int64)
    # a point exactly on the last center row/column uses the preceding pair
    c0 = np.where((u == grid.ncols - 1) & (grid.ncols > 1), c0 - 1, c0)
    r0 = np.where((v == grid.nrows - 1) & (grid.nrows > 1), r0 - 1, r0)
    ok = (c0 >= 0) & (c0 + 1 < grid.ncols) & (r0 >= 0) & (r0 + 1 < grid.nrows)
    c0s = np.where(ok, c0, 0)
    r0s = np.where(ok, r0, 0)
    c1s = np.minimum(c0s + 1, grid.ncols - 1)
    r1s = np.minimum(r0s + 1, grid.nrows - 1)
    vals = grid.values
    v00 = vals[r0s, c0s]
    v01 = vals[r0s, c1s]
    v10 = vals[r1s, c0s]
    v11 = vals[r1s, c1s]
    nd = grid.nodata
    ok &= (v00 != nd) & (v01 != nd) & (v10 != nd) & (v11 != nd)
    fx = u - c0s
    fy = v - r0s
    # weighted form is exact at fractions 0 and 1
    top = (1 - fx) * v00 + fx * v01
    bottom = (1 - fx) * v10 + fx * v11
    out = (1 - fy) * top + fy * bottom
    return np.where(ok, out, np.nan), ok


def normalize_heights(cloud: PointCloud, dtm: Grid) -> tuple[PointCloud, NormalizationTally]:
    """Subtract bilinearly interpolated terrain elevation from every return.

    Points without four valid neighbouring DTM cells are dropped; heights
    below ground are clamped to zero. Both events are counted in the tally.
    """
    if cloud.normalized:
        raise ValueError("point cloud is already height-normalized")
    ground, ok = bilinear(dtm, cloud.x, cloud.y)
    kept = cloud.subset(ok)
    z = kept.z - ground[ok]
    below = z < 0
    z = np.where(below, 0.0, z)
    out = PointCloud(kept.x, kept.y, z, kept.return_class, normalized=True)
    return out, NormalizationTally(int((~ok).sum()), int(below.sum()))


# ---------------------------------------------------------------------------
# Terrain derivatives
# ---------------------------------------------------------------------------


def slope_grid(dtm: Grid) -> Grid:
    """Slope in degrees using Horn's 3x3 weighted finite differences.

    Border cells and cells with a nodata neighbour are nodata.
    """
    if dtm.nrows < 3 or dtm.ncols < 3:
        raise DimensionError(f"slope needs at least 3x3 cells, got {dtm.nrows}x{dtm.ncols}")
    z = dtm.values
    valid = dtm.valid
    a, b, c = z[:-2, :-2], z[:-2, 1:-1], z[:-2, 2:]
    d, f = z[1:-1, :-2], z[1:-1, 2:]
    g, h, i = z[2:, :-2], z[2:, 1:-1], z[2:, 2:]
    cs = dtm.cellsize
    dzdx = ((c + 2 * f + i) - (a + 2 * d + g)) / (8 * cs)
    # row 0 is north, so the southern row minus the northern row is -dz/dy
    dzdy = ((a + 2 * b + c) - (g + 2 * h + i)) / (8 * cs)
    interior = np.degrees(np.arctan(np.hypot(dzdx, dzdy)))

    ok = np.ones_like(interior, dtype=bool)
    for dr in range(3):
        for dc in range(3):
            ok &= valid[dr : dr + dtm.nrows - 2, dc : dc + dtm.ncols - 2]
    out = np.full(z.shape, dtm.nodata)
    out[1:-1, 1:-1] = np.where(ok, interior, dtm.nodata)
    return dtm.with_values(out)


def resample_mean(grid: Grid, factor: int) -> Grid:
    """Aggregate ``factor`` x ``factor`` blocks by their mean, ignoring nodata."""
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    if grid.nrows % factor or grid.ncols % factor:
        raise DimensionError(f"factor {factor} does not divide grid shape {grid.nrows}x{grid.ncols}")
    if factor == 1:
        return grid
    shape = (grid.nrows // factor, factor, grid.ncols // factor, factor)
    valid = grid.valid.reshape(shape)
    vals = np.where(valid, grid.values.reshape(shape), 0.0)
    total = vals.sum(axis=(1, 3))
    count = valid.sum(axis=(1, 3))
    out = np.where(count > 0, total / np.maximum(count, 1), grid.nodata)
    return Grid(out, grid.xll, grid.yll, grid.cellsize * factor, grid.nodata)


# ---------------------------------------------------------------------------
# Polygons
# ---------------------------------------------------------------------------

Ring = tuple[tuple[float, float], ...]


def _as_ring(coords) -> Ring:
    return tuple((float(x), float(y)) for x, y in coords)


@dataclass(frozen=True)
class Polygon:
    id: str
    exterior: Ring
    holes: tuple[Ring, ...] = ()
    attributes: dict[str, str] = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "exterior", _as_ring(self.exterior))
        object.__setattr__(self, "holes", tuple(_as_ring(h) for h in self.holes))
        for ring in (self.exterior, *self.holes):
            if len(ring) < 4:
                raise ValueError(f"polygon {self.id}: ring needs at least 4 vertices")
            if ring[0] != ring[-1]:
                raise ValueError(f"polygon {self.id}: ring is not closed")
        if not self.shape.area > 0:
            raise ValueError(f"polygon {self.id}: area must be positive")

    @classmethod
    def box(cls, id, xmin, ymin, xmax, ymax, **attributes) -> Polygon:
        ring = ((xmin, ymin), (xmax, ymin), (xmax, ymax), (xmin, ymax), (xmin, ymin))
        return cls(str(id), ring, (), {k: str(v) for k, v in attributes.items()})

    @cached_property
    def shape(self) -> shapely.Polygon:
        return shapely.Polygon(self.exterior, self.holes)

    @property
    def area(self) -> float:
        return self.shape.area

    def attribute(self, key: str, default=None):
        return self.attributes.get(key, default)


def _parse_coords(text: str, lineno: int) -> Ring:
    coords = []
    for pair in text.split(","):
        parts = pair.split()
        if len(parts) != 2:
            raise GridFormatError(f"line {lineno}: bad coordinate pair {pair.strip()!r}")
        coords.append((float(parts[0]), float(parts[1])))
    return tuple(coords)


def read_polygons(path) -> list[Polygon]:
    """Read ``id key=value;... : x y, x y, ...`` lines; ``hole:`` lines attach to the previous polygon."""
    pending: list[dict] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if text.startswith("hole:"):
            if not pending:
                raise GridFormatError(f"line {lineno}: hole before any polygon")
            pending[-1]["holes"].append(_parse_coords(text[5:], lineno))
            continue
        head, sep, coords = text.partition(":")
        if not sep:
            raise GridFormatError(f"line {lineno}: missing ':' separator")
        head_parts = head.split(None, 1)
        if not head_parts:
            raise GridFormatError(f"line {lineno}: missing polygon id")
        attrs = {}
        if len(head_parts) == 2:
            for item in head_parts[1].split(";"):
                item = item.strip()
                if not item:
                    continue
                key, eq, value = item.partition("=")
                if not eq:
                    raise GridFormatError(f"line {lineno}: attribute {item!r} is not key=value")
                attrs[key.strip()] = value.strip()
        pending.append(
            {"id": head_parts[0], "attributes": attrs, "exterior": _parse_coords(coords, lineno), "holes": []}
        )
    return [Polygon(p["id"], p["exterior"], tuple(p["holes"]), p["attributes"]) for p in pending]


def write_polygons(polygons: Sequence[Polygon], path) -> None:
    def ring(r):
        return ", ".join(f"{x!r} {y!r}" for x, y in r)

    lines = []
    for poly in polygons:
        attrs = ";".join(f"{k}={v}" for k, v in poly.attributes.items())
        head = f"{poly.id} {attrs}" if attrs else poly.id
        lines.append(f"{head} : {ring(poly.exterior)}")
        lines.extend(f"hole: {ring(h)}" for h in poly.holes)
    Path(path).write_text("\n".join(lines) + "\n")


def _window(grid: Grid, bounds) -> tuple[slice, slice]:
    xmin, ymin, xmax, ymax = bounds
    cs = grid.cellsize
    c0 = max(int(math.floor((xmin - grid.xll) / cs)), 0)
    c1 = min(int(math.floor((xmax - grid.xll) / cs)) + 1, grid.ncols)
    r0 = max(int(math.floor((grid.ytop - ymax) / cs)), 0)
    r1 = min(int(math.floor((grid.ytop - ymin) / cs)) + 1, grid.nrows)
    return slice(r0, max(r1, r0)), slice(c0, max(c1, c0))


def cell_overlap_areas(grid: Grid, polygon: Polygon) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices of cells intersecting ``polygon`` and their intersection areas."""
    rows, cols = _window(grid, polygon.shape.bounds)
    rr, cc = np.mgrid[rows, cols]
    rr, cc = rr.ravel(), cc.ravel()
    if rr.size == 0:
        return np.empty(0, np.int64), np.empty(0)
    cs = grid.cellsize
    x0 = grid.xll + cc * cs
    y1 = grid.ytop - rr * cs
    boxes = shapely.box(x0, y1 - cs, x0 + cs, y1)
    areas = shapely.area(shapely.intersection(boxes, polygon.shape))
    keep = areas > 0
    return (rr * grid.ncols + cc)[keep], areas[keep]


def zonal_weighted_mean(grid: Grid, polygon: Polygon) -> float:
    """Mean of cell values weighted by their area of intersection with ``polygon``."""
    index, areas = cell_overlap_areas(grid, polygon)
    values = grid.values.ravel()[index]
    ok = values != grid.nodata
    if not ok.any():
        raise EmptyZoneError(f"polygon {polygon.id} intersects no valid cell")
    w = areas[ok]
    return float(np.dot(values[ok], w) / w.sum())


def cells_in_polygon(grid: Grid, polygon: Polygon) -> np.ndarray:
    """Sorted flat indices of cells whose center lies inside or on the polygon boundary."""
    rows, cols = _window(grid, polygon.shape.bounds)
    rr, cc = np.mgrid[rows, cols]
    rr, cc = rr.ravel(), cc.ravel()
    if rr.size == 0:
        return np.empty(0, np.int64)
    x = grid.xll + (cc + 0.5) * grid.cellsize
    y = grid.ytop - (rr + 0.5) * grid.cellsize
    inside = shapely.intersects_xy(polygon.shape, x, y)
    return np.sort(rr[inside] * grid.ncols + cc[inside])
