"""
Command-line entry point: ``standage <metrics|fit|predict|validate|synth|curves>``.

Every subcommand writes its products into ``--out`` together with
``manifest.txt``, a key=value file that can be passed back as ``--config`` to
repeat the run. Flags given on the command line override config values.
Diagnostics go to stderr. Exit codes: 0 success, 1 runtime failure,
2 invalid input.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
import shapely

from . import __version__
from .evaluation import (
    BASELINE,
    EvalPair,
    SceneSpec,
    breakdown,
    format_report,
    scatter_export,
    synth_scene,
    write_manifest,
    write_report_csv,
)
from .fitting import (
    PlotTableError,
    TrainingSet,
    best_link,
    compare_links,
    format_fit_report,
    ols_fit,
    read_plot_table,
    stepwise_select,
    write_fit_csv,
    write_plot_table,
)
from .geodata import (
    DimensionError,
    Grid,
    GridFormatError,
    normalize_heights,
    read_grid,
    read_points,
    read_polygons,
    write_grid,
)
from .mapping import LayerStack, StackError, predict_map, stand_estimates, write_stand_csv
from .models import (
    Link,
    ModelRegistry,
    RegistryFormatError,
    RoutingError,
    Species,
    builtin_registry,
    load_registry,
    response_curve,
    route_model,
    save_registry,
    snap_si,
)
from .predictors import als_metrics, assemble_predictors, is_known_predictor, metrics_grid, write_predictor_csv

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INVALID = 2

# options that never change outputs and are left out of manifests
_VOLATILE = {"config", "threads", "command", "handler"}


class InputError(ValueError):
    """Invalid user input; ``field`` names the offending option."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def log(message: str) -> None:
    print(message, file=sys.stderr)


# ---------------------------------------------------------------------------
# Config files and manifests
# ---------------------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise InputError("config", f"line {lineno}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _manifest_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Path):
        return str(value.resolve())
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run_manifest(args: argparse.Namespace) -> dict[str, str]:
    entries = {"command": args.command, "version": __version__}
    for key in sorted(vars(args)):
        value = getattr(args, key)
        if key in _VOLATILE or value is None:
            continue
        entries[key] = _manifest_value(value)
    return entries


def _parse_bool(field: str, text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off", ""):
        return False
    raise InputError(field, f"expected true or false, got {text!r}")


# ---------------------------------------------------------------------------
# Argument helpers
# ---------------------------------------------------------------------------


def _require(args, *fields: str) -> None:
    for field in fields:
        if getattr(args, field) is None:
            raise InputError(field, "is required (flag or config entry)")


def _check_inputs(args, *fields: str) -> None:
    for field in fields:
        path = getattr(args, field)
        if path is not None and not Path(path).exists():
            raise InputError(field, f"{path} does not exist")


def _out_dir(args) -> Path:
    _require(args, "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _mix(field: str, text: str, key_type) -> dict:
    out = {}
    for item in text.split(","):
        if not item.strip():
            continue
        key, sep, weight = item.partition(":")
        try:
            out[key_type(key.strip())] = float(weight) if sep else 1.0
        except ValueError as exc:
            raise InputError(field, str(exc)) from None
    if not out:
        raise InputError(field, "empty mix")
    return out


def _assignments(field: str, text: str | None) -> dict[str, float]:
    out = {}
    for item in (text or "").split(","):
        if not item.strip():
            continue
        name, sep, value = item.partition("=")
        name = name.strip()
        if not sep or not is_known_predictor(name):
            raise InputError(field, f"expected predictor=value, got {item.strip()!r}")
        try:
            out[name] = float(value)
        except ValueError:
            raise InputError(field, f"bad number in {item.strip()!r}") from None
    return out


def _registry(args):
    if args.registry is None:
        return builtin_registry()
    _check_inputs(args, "registry")
    return load_registry(args.registry)


def _finish(args, out: Path) -> None:
    write_manifest(run_manifest(args), out / "manifest.txt")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_metrics(args) -> int:
    _require(args, "points", "dtm")
    _check_inputs(args, "points", "dtm", "plots")
    if not args.cellsize > 0:
        raise InputError("cellsize", "must be positive")
    out = _out_dir(args)
    cloud, tally = normalize_heights(read_points(args.points), read_grid(args.dtm))
    log(f"normalization: dropped={tally.dropped} clamped={tally.clamped} kept={len(cloud)}")
    if len(cloud) == 0:
        raise RuntimeError("no points remain after height normalization")

    if args.grid:
        cs = args.cellsize
        xll = math.floor(cloud.x.min() / cs) * cs
        yll = math.floor(cloud.y.min() / cs) * cs
        ncols = int(math.floor((cloud.x.max() - xll) / cs)) + 1
        nrows = int(math.floor((cloud.y.max() - yll) / cs)) + 1
        template = Grid(np.zeros((nrows, ncols)), xll, yll, cs)
        grids = metrics_grid(cloud, template)
        for name, grid in grids.items():
            write_grid(grid, out / f"{name}.asc")
        log(f"wrote {len(grids)} metric grids ({nrows}x{ncols})")
    else:
        if args.plots is not None:
            zones = [(p.id, shapely.intersects_xy(p.shape, cloud.x, cloud.y)) for p in read_polygons(args.plots)]
        else:
            zones = [(args.plot_id or Path(args.points).stem, np.ones(len(cloud), dtype=bool))]
        rows = []
        for plot_id, inside in zones:
            metrics = als_metrics(cloud.subset(inside))
            rows.append((plot_id, assemble_predictors(metrics, None, {}, math.nan)))
        write_predictor_csv(rows, out / "metrics.csv")
        log(f"wrote metrics for {len(rows)} plot(s)")
    _finish(args, out)
    return EXIT_OK


def _fit_stratum(data: TrainingSet, args, candidates: list[str]):
    link = Link.LOG if args.link == "auto" else Link(args.link)
    fit = stepwise_select(data, candidates, link, squares=args.squares, interactions=args.interactions)
    if args.link == "auto":
        scores = compare_links(data, fit.names)
        chosen = best_link(scores)
        for lk, s in scores.items():
            log(f"  {lk.value}: RMSE={s.rmse:.3f} MD={s.md:.3f}")
        if chosen is not link:
            fit = ols_fit(data, fit.names, chosen)
    return fit


def cmd_fit(args) -> int:
    _require(args, "plots")
    _check_inputs(args, "plots")
    out = _out_dir(args)
    records = read_plot_table(args.plots)
    strata = defaultdict(list)
    for r in records:
        strata[(r.species, r.si)].append(r)
    requested = [c.strip() for c in args.candidates.split(",") if c.strip()] if args.candidates else None
    if requested:
        unknown = [c for c in requested if not is_known_predictor(c)]
        if unknown:
            raise InputError("candidates", f"unknown predictors {', '.join(unknown)}")

    fits, skipped = [], []
    for (species, si), rows in sorted(strata.items()):
        label = f"{species.label} SI {si}"
        data = TrainingSet.from_records(rows)
        candidates = requested or [
            name for name, col in sorted(data.columns.items()) if np.ptp(col) > 0
        ]
        candidates = [c for c in candidates if c in data.columns]
        if "h95_first" not in candidates:
            skipped.append(f"{label}: h95_first unavailable or constant")
            continue
        if data.n <= len(candidates) + 2:
            skipped.append(f"{label}: n={data.n} too small for {len(candidates)} candidates")
            continue
        log(f"fitting {label} (n={data.n}, {len(candidates)} candidates)")
        fits.append(_fit_stratum(data, args, candidates))
    for reason in skipped:
        log(f"skipped {reason}")
    if not fits:
        raise RuntimeError("no stratum could be fitted")

    registry = ModelRegistry({(f.model.species, f.model.si): f.model for f in fits}, f"fit:{Path(args.plots).name}")
    save_registry(registry, out / "registry.txt")
    report = format_fit_report(fits)
    if skipped:
        report += "".join(f"Skipped {reason}\n" for reason in skipped)
    (out / "fit_report.txt").write_text(report)
    write_fit_csv(fits, out / "fit.csv")
    _finish(args, out)
    return EXIT_OK


def _load_layers(directory: Path) -> dict[str, Grid]:
    layers = {}
    for path in sorted(directory.glob("*.asc")):
        if is_known_predictor(path.stem):
            layers[path.stem] = read_grid(path)
        else:
            log(f"ignoring {path.name}: not a predictor name")
    return layers


def cmd_predict(args) -> int:
    _require(args, "layers", "species", "psi")
    _check_inputs(args, "layers", "species", "psi", "mask", "stands")
    if not Path(args.layers).is_dir():
        raise InputError("layers", f"{args.layers} is not a directory")
    out = _out_dir(args)
    registry = _registry(args)
    stack = LayerStack(
        _load_layers(Path(args.layers)),
        read_grid(args.species),
        read_grid(args.psi),
        read_grid(args.mask) if args.mask is not None else None,
    )
    age, tally = predict_map(stack, registry, threads=args.threads)
    write_grid(age, out / "age.asc")
    log(tally.summary())
    if args.stands is not None:
        estimates = stand_estimates(age, read_polygons(args.stands))
        write_stand_csv(estimates, out / "stands.csv")
        empty = sum(not e.has_estimate for e in estimates)
        if empty:
            log(f"warning: {empty} stand(s) without an estimate")
    _finish(args, out)
    return EXIT_OK


def cmd_validate(args) -> int:
    _require(args, "stands", "age_map")
    _check_inputs(args, "stands", "age_map")
    out = _out_dir(args)
    stands = read_polygons(args.stands)
    estimates = stand_estimates(read_grid(args.age_map), stands)
    pairs, warnings = [], 0
    for stand, est in zip(stands, estimates):
        observed = stand.attribute(args.age_attribute)
        if observed is None:
            log(f"warning: stand {stand.id} has no {args.age_attribute!r} attribute; excluded")
            warnings += 1
            continue
        if not est.has_estimate:
            log(f"warning: stand {stand.id} has no valid map cells; excluded")
            warnings += 1
            continue
        cls = stand.attribute(args.class_attribute)
        if cls is None:
            label = "unclassified"
        elif args.class_attribute.lower() == "psi":
            label = f"pSI {snap_si(float(cls))}"
        else:
            label = str(cls)
        pairs.append(EvalPair(float(observed), est.mean_age, stand.area, label))
    log(f"warnings: {warnings}")
    if not pairs:
        raise RuntimeError("no stand could be evaluated")
    rows = breakdown(pairs, weighted=not args.unweighted)
    title = "Area-weighted stand validation" if not args.unweighted else "Stand validation"
    (out / "report.txt").write_text(format_report(rows, title))
    write_report_csv(rows, out / "report.csv")
    scatter_export(pairs, out / "scatter.csv")
    _finish(args, out)
    return EXIT_OK


def cmd_synth(args) -> int:
    out = _out_dir(args)
    registry = _registry(args)
    if args.sigma_zero:
        registry = registry.map_models(lambda m: m.with_sigma(0.0))
    try:
        lo, hi = (float(v) for v in args.age_range.split(","))
    except ValueError:
        raise InputError("age_range", f"expected lo,hi, got {args.age_range!r}") from None
    baseline = dict(BASELINE)
    baseline.update(_assignments("baseline", args.baseline))
    if not args.psi_noise >= 0:
        raise InputError("psi_noise", "must be non-negative")
    try:
        spec = SceneSpec(
            ncols=args.ncols,
            nrows=args.nrows,
            species_mix=_mix("species_mix", args.species_mix, Species.parse),
            si_mix=_mix("si_mix", args.si_mix, int),
            age_range=(lo, hi),
            seed=args.seed,
            baseline=baseline,
        )
    except ValueError as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError("scene", str(exc)) from None
    scene = synth_scene(registry, spec)
    layers = out / "layers"
    layers.mkdir(exist_ok=True)
    for name, grid in scene.stack.predictors.items():
        write_grid(grid, layers / f"{name}.asc")
    psi = scene.si
    if args.psi_noise > 0:
        # separate stream so the scene itself does not depend on the noise setting
        rng = np.random.default_rng([args.seed, 1])
        psi = psi.with_values(psi.values + rng.normal(0.0, args.psi_noise, psi.values.shape))
    write_grid(scene.stack.species, out / "species.asc")
    write_grid(scene.si, out / "si.asc")
    write_grid(psi, out / "psi.asc")
    write_grid(scene.truth, out / "truth.asc")
    write_grid(scene.observed, out / "observed.asc")
    write_plot_table(scene.plots, out / "plots.csv")
    write_manifest({**spec.manifest(), "redraws": str(scene.redraws), "registry": registry.provenance}, out / "scene.txt")
    log(f"scene {spec.nrows}x{spec.ncols}: redraws={scene.redraws}")
    _finish(args, out)
    return EXIT_OK


def cmd_curves(args) -> int:
    _require(args, "species", "si", "lo", "hi")
    out = _out_dir(args)
    registry = _registry(args)
    try:
        species = Species.parse(args.species)
    except ValueError as exc:
        raise InputError("species", str(exc)) from None
    if args.steps < 2:
        raise InputError("steps", "need at least 2 steps")
    model = route_model(registry, species, args.si)
    if model.si != args.si:
        log(f"note: {species.label} SI {args.si} routed to SI {model.si}")
    baseline = {**BASELINE, "h95_first": 15.0}
    baseline.update(_assignments("baseline", args.baseline))
    baseline["h95_first2"] = baseline["h95_first"] ** 2
    try:
        curve = response_curve(model, args.sweep, args.lo, args.hi, args.steps, baseline)
    except ValueError as exc:
        raise InputError("sweep", str(exc)) from None
    with (out / "curve.csv").open("w") as fh:
        fh.write(f"{args.sweep},age\n")
        fh.writelines(f"{x!r},{y!r}\n" for x, y in curve)
    _finish(args, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value file; command-line flags take precedence")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--out", type=Path, help="output directory")

    parser = argparse.ArgumentParser(prog="standage", description="Forest stand age mapping from ALS metrics.")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)
    commands = {}

    def add(name, handler, help):
        sub = subs.add_parser(name, parents=[common], help=help)
        sub.set_defaults(handler=handler)
        commands[name] = sub
        return sub

    p = add("metrics", cmd_metrics, "ALS metrics per plot or per grid cell")
    p.add_argument("--points", type=Path, help="point records: x y z return_number number_of_returns")
    p.add_argument("--dtm", type=Path, help="terrain model (ASCII grid)")
    p.add_argument("--plots", type=Path, help="plot polygons; one CSV row per polygon")
    p.add_argument("--plot-id", help="row id when no plot polygons are given")
    p.add_argument("--grid", action="store_true", help="write one ASCII grid per metric")
    p.add_argument("--cellsize", type=float, default=16.0)

    p = add("fit", cmd_fit, "stepwise model fitting per species and SI")
    p.add_argument("--plots", type=Path, help="plot table CSV")
    p.add_argument("--link", choices=["log", "sqrt", "identity", "auto"], default="log")
    p.add_argument("--candidates", help="comma-separated candidate predictors (default: all complete columns)")
    p.add_argument("--squares", action="store_true", help="offer squared terms")
    p.add_argument("--interactions", action="store_true", help="offer pairwise products")

    p = add("predict", cmd_predict, "wall-to-wall age map")
    p.add_argument("--layers", type=Path, help="directory of predictor grids named <predictor>.asc")
    p.add_argument("--species", type=Path, help="species code grid (1 spruce, 2 pine, 3 birch)")
    p.add_argument("--psi", type=Path, help="predicted site index grid")
    p.add_argument("--mask", type=Path, help="forest mask grid (non-zero = forest)")
    p.add_argument("--registry", type=Path, help="model registry file (default: published models)")
    p.add_argument("--stands", type=Path, help="stand polygons for mean-age estimates")

    p = add("validate", cmd_validate, "weighted stand-level validation")
    p.add_argument("--stands", type=Path, help="stand polygons with an observed age attribute")
    p.add_argument("--age-map", type=Path, help="predicted age grid")
    p.add_argument("--age-attribute", default="age")
    p.add_argument("--class-attribute", default="psi")
    p.add_argument("--unweighted", action="store_true", help="use equal stand weights")

    p = add("synth", cmd_synth, "synthetic scene with known ages")
    p.add_argument("--ncols", type=int, default=100)
    p.add_argument("--nrows", type=int, default=100)
    p.add_argument("--species-mix", default="spruce:1")
    p.add_argument("--si-mix", default="14:1,17:1,20:1,23:1")
    p.add_argument("--age-range", default="10,120")
    p.add_argument("--baseline", help="predictor=value overrides for the constant layers")
    p.add_argument("--sigma-zero", action="store_true", help="generate without residual noise")
    p.add_argument("--psi-noise", type=float, default=0.0, help="sd of noise added to the written pSI grid")
    p.add_argument("--registry", type=Path)

    p = add("curves", cmd_curves, "predicted age along one predictor")
    p.add_argument("--species")
    p.add_argument("--si", type=int)
    p.add_argument("--sweep", default="h95_first")
    p.add_argument("--lo", type=float)
    p.add_argument("--hi", type=float)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--baseline", help="predictor=value overrides")
    p.add_argument("--registry", type=Path)
    return parser, commands


def parse_args(argv=None) -> argparse.Namespace:
    parser, commands = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    if not args.config.exists():
        raise InputError("config", f"{args.config} does not exist")
    config = read_config(args.config)
    if config.pop("command", args.command) != args.command:
        raise InputError("config", f"written for a different command than {args.command!r}")
    config.pop("version", None)
    sub = commands[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, text in config.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise InputError(key, f"unknown option for {args.command}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = _parse_bool(key, text)
        else:
            # argparse converts string defaults with the option's type
            defaults[key] = text
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        if args.threads < 1:
            raise InputError("threads", "must be at least 1")
        return args.handler(args)
    except SystemExit as exc:
        # argparse reports usage errors with status 2
        return int(exc.code or 0)
    except InputError as exc:
        log(f"error: {exc}")
        return EXIT_INVALID
    except (GridFormatError, DimensionError, PlotTableError, RegistryFormatError, StackError, RoutingError) as exc:
        log(f"error: invalid input: {exc}")
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log(f"error: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
