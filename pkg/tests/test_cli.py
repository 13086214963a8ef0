import csv
import math

import numpy as np
import pytest

from standage.cli import main, read_config
from standage.geodata import Polygon, read_grid, write_grid, write_polygons

from conftest import make_grid


def run(*args):
    return main([str(a) for a in args])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert run("synth", "--out", out, "--ncols", 24, "--nrows", 18, "--seed", 11) == 0
    return out


# -- metrics ------------------------------------------------------------------


@pytest.fixture
def tiny_cloud(tmp_path):
    pts = tmp_path / "pts.txt"
    pts.write_text("# x y z rn nr\n5 5 101 1 1\n6 6 103 1 1\n7 7 106 1 2\n8 8 112 1 1\n9 9 100.5 2 2\n")
    dtm = tmp_path / "dtm.asc"
    write_grid(make_grid(np.full((3, 3), 100.0), xll=-8, yll=-8), dtm)
    return pts, dtm


def test_metrics_single_plot(tmp_path, tiny_cloud, capsys):
    pts, dtm = tiny_cloud
    assert run("metrics", "--points", pts, "--dtm", dtm, "--out", tmp_path / "m") == 0
    (row,) = read_csv(tmp_path / "m" / "metrics.csv")
    assert row["plot_id"] == "pts"
    assert float(row["cc2"]) == 0.75
    assert float(row["h95_first2"]) == float(row["h95_first"]) ** 2
    assert "dropped=0 clamped=0" in capsys.readouterr().err


def test_metrics_grid_flag(tmp_path, tiny_cloud):
    pts, dtm = tiny_cloud
    assert run("metrics", "--points", pts, "--dtm", dtm, "--out", tmp_path / "g", "--grid") == 0
    files = {p.stem for p in (tmp_path / "g").glob("*.asc")}
    assert {"h95_first", "cc2", "d9", "n_last"} <= files and len(files) == 48
    assert read_grid(tmp_path / "g" / "cc2.asc").values[0, 0] == 0.75


def test_metrics_per_polygon(tmp_path, tiny_cloud):
    pts, dtm = tiny_cloud
    plots = tmp_path / "plots.txt"
    write_polygons([Polygon.box("a", 4, 4, 6.5, 6.5), Polygon.box("b", 6.5, 6.5, 10, 10)], plots)
    assert run("metrics", "--points", pts, "--dtm", dtm, "--plots", plots, "--out", tmp_path / "p") == 0
    rows = read_csv(tmp_path / "p" / "metrics.csv")
    assert [r["plot_id"] for r in rows] == ["a", "b"]
    assert float(rows[0]["n_first"]) == 2


def test_metrics_missing_dtm(tmp_path, tiny_cloud, capsys):
    pts, _ = tiny_cloud
    assert run("metrics", "--points", pts, "--out", tmp_path / "m") == 2
    assert "dtm" in capsys.readouterr().err
    assert run("metrics", "--points", pts, "--dtm", tmp_path / "nope.asc", "--out", tmp_path / "m") == 2


def test_metrics_runtime_failure_when_all_points_dropped(tmp_path, tiny_cloud):
    pts, _ = tiny_cloud
    far = tmp_path / "far.asc"
    write_grid(make_grid(np.zeros((3, 3)), xll=1000, yll=1000), far)
    assert run("metrics", "--points", pts, "--dtm", far, "--out", tmp_path / "m") == 1


# -- predict ------------------------------------------------------------------


def one_cell_stack(tmp_path):
    layers = tmp_path / "layers"
    layers.mkdir()
    write_grid(make_grid([[20.0]]), layers / "h95_first.asc")
    write_grid(make_grid([[0.5]]), layers / "cc5.asc")
    write_grid(make_grid([[1.0]]), tmp_path / "species.asc")
    write_grid(make_grid([[26.0]]), tmp_path / "psi.asc")
    return layers


def test_predict_hand_value(tmp_path, capsys):
    layers = one_cell_stack(tmp_path)
    code = run("predict", "--layers", layers, "--species", tmp_path / "species.asc", "--psi", tmp_path / "psi.asc",
               "--out", tmp_path / "out")
    assert code == 0
    assert read_grid(tmp_path / "out" / "age.asc").values[0, 0] == pytest.approx(54.43, abs=0.005)
    assert "predicted=1" in capsys.readouterr().err


def test_predict_geometry_mismatch_names_layer(tmp_path, capsys):
    layers = one_cell_stack(tmp_path)
    write_grid(make_grid([[0.5, 0.5]]), layers / "cc10.asc")
    code = run("predict", "--layers", layers, "--species", tmp_path / "species.asc", "--psi", tmp_path / "psi.asc",
               "--out", tmp_path / "out")
    assert code == 2
    assert "cc10" in capsys.readouterr().err


def test_predict_deterministic_across_threads_and_reruns(tmp_path, scene):
    args = ["predict", "--layers", scene / "layers", "--species", scene / "species.asc", "--psi", scene / "psi.asc"]
    outputs = []
    for i, threads in enumerate((1, 8, 8)):
        out = tmp_path / f"o{i}"
        assert run(*args, "--threads", threads, "--out", out) == 0
        outputs.append((out / "age.asc").read_bytes())
    assert outputs[0] == outputs[1] == outputs[2]


def test_manifest_replays_run(tmp_path, scene):
    first = tmp_path / "first"
    assert run("predict", "--layers", scene / "layers", "--species", scene / "species.asc",
               "--psi", scene / "psi.asc", "--out", first) == 0
    config = read_config(first / "manifest.txt")
    assert config["command"] == "predict" and "threads" not in config
    assert run("predict", "--config", first / "manifest.txt", "--out", tmp_path / "again") == 0
    assert (first / "age.asc").read_bytes() == (tmp_path / "again" / "age.asc").read_bytes()


def test_config_values_and_flag_precedence(tmp_path, scene):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# predict run\nlayers={scene / 'layers'}\nspecies={scene / 'species.asc'}\npsi={scene / 'psi.asc'}\nout={tmp_path / 'cfg-out'}\n")
    assert run("predict", "--config", cfg) == 0
    assert (tmp_path / "cfg-out" / "age.asc").exists()
    assert run("predict", "--config", cfg, "--out", tmp_path / "flag-out") == 0
    assert (tmp_path / "flag-out" / "age.asc").exists()


def test_config_errors(tmp_path, scene, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour=blue\n")
    assert run("predict", "--config", cfg) == 2
    assert "colour" in capsys.readouterr().err
    cfg.write_text("command=fit\n")
    assert run("predict", "--config", cfg) == 2
    cfg.write_text("just words\n")
    assert run("predict", "--config", cfg) == 2
    assert run("predict", "--config", tmp_path / "none.cfg") == 2


def test_predict_with_stands(tmp_path):
    layers = one_cell_stack(tmp_path)
    stands = tmp_path / "stands.txt"
    write_polygons([Polygon.box("in", 0, 0, 16, 16), Polygon.box("out", 100, 100, 120, 120)], stands)
    assert run("predict", "--layers", layers, "--species", tmp_path / "species.asc", "--psi", tmp_path / "psi.asc",
               "--stands", stands, "--out", tmp_path / "o") == 0
    rows = read_csv(tmp_path / "o" / "stands.csv")
    assert rows[0]["flags"] == "" and rows[1]["flags"] == "no-estimate"


# -- validate -----------------------------------------------------------------


def two_stand_fixture(tmp_path, first=90.0, second=60.0):
    age = tmp_path / "age.asc"
    write_grid(make_grid([[first, first, first, second]], cellsize=100), age)
    stands = tmp_path / "stands.txt"
    write_polygons([
        Polygon.box("big", 0, 0, 300, 100, age=100, psi=14.3),
        Polygon.box("small", 300, 0, 400, 100, age=50, psi=17),
        Polygon.box("noage", 0, 0, 100, 100, psi=14),
        Polygon.box("outside", 1000, 0, 1100, 100, age=70),
    ], stands)
    return age, stands


def test_validate_two_stand_weighted(tmp_path, capsys):
    age, stands = two_stand_fixture(tmp_path)
    assert run("validate", "--stands", stands, "--age-map", age, "--out", tmp_path / "v") == 0
    rows = {r["class"]: r for r in read_csv(tmp_path / "v" / "report.csv")}
    assert float(rows["All"]["md"]) == 5.0 and float(rows["All"]["rmse"]) == 10.0
    assert float(rows["All"]["md_pct"]) == pytest.approx(5.714285714, abs=1e-8)
    assert set(rows) == {"pSI 14", "pSI 17", "All"}
    err = capsys.readouterr().err
    assert "warnings: 2" in err and "noage" in err and "outside" in err
    assert len(read_csv(tmp_path / "v" / "scatter.csv")) == 2


def test_validate_perfect_stands(tmp_path):
    age, stands = two_stand_fixture(tmp_path, 100.0, 50.0)
    assert run("validate", "--stands", stands, "--age-map", age, "--out", tmp_path / "v") == 0
    assert all(float(r["rmse"]) == 0 for r in read_csv(tmp_path / "v" / "report.csv"))


def test_validate_unweighted(tmp_path):
    age, stands = two_stand_fixture(tmp_path)
    assert run("validate", "--stands", stands, "--age-map", age, "--unweighted", "--out", tmp_path / "v") == 0
    rows = {r["class"]: r for r in read_csv(tmp_path / "v" / "report.csv")}
    assert float(rows["All"]["md"]) == 0.0


# -- fit ----------------------------------------------------------------------


def test_fit_synthetic_strata(tmp_path, scene):
    out = tmp_path / "fit"
    assert run("fit", "--plots", scene / "plots.csv", "--out", out) == 0
    report = (out / "fit_report.txt").read_text()
    assert "Model for spruce SI 14" in report
    assert (out / "registry.txt").read_text().startswith("# provenance=fit:plots.csv")


def test_fit_coefficients_within_three_se(tmp_path):
    scene = tmp_path / "s"
    assert run("synth", "--out", scene, "--ncols", 50, "--nrows", 40, "--si-mix", "23:1", "--age-range", "10,70",
               "--seed", 2) == 0
    out = tmp_path / "fit"
    assert run("fit", "--plots", scene / "plots.csv", "--out", out, "--candidates", "h95_first,h95_first2") == 0
    rows = {r["variable"]: r for r in read_csv(out / "fit.csv")}
    # truth: the published SI 23 block with cc10 and diffT folded into the intercept
    truth = {"Intercept": 2.020 - 3.920e-01 * 0.4, "h95_first": 1.650e-01, "h95_first2": -2.740e-03}
    for name, value in truth.items():
        est, se = float(rows[name]["estimate"]), float(rows[name]["std_error"])
        assert abs(est - value) < 3 * se, name


def test_fit_skips_small_strata(tmp_path):
    plots = tmp_path / "plots.csv"
    lines = ["plot_id,species,si,age,h95_first,cc5"]
    lines += [f"s{i},spruce,14,{20 + 3 * i + (i % 3)},{5 + i},{(i % 5) / 5}" for i in range(30)]
    lines += [f"b{i},birch,8,{30 + i},{4 + i},0.{i}" for i in range(3)]
    plots.write_text("\n".join(lines) + "\n")
    assert run("fit", "--plots", plots, "--out", tmp_path / "f") == 0
    report = (tmp_path / "f" / "fit_report.txt").read_text()
    assert "Model for spruce SI 14" in report
    assert "Skipped birch SI 8: n=3" in report


def test_fit_link_auto(tmp_path, scene, capsys):
    assert run("fit", "--plots", scene / "plots.csv", "--out", tmp_path / "f", "--link", "auto") == 0
    err = capsys.readouterr().err
    assert "sqrt: RMSE=" in err and "identity: RMSE=" in err


def test_fit_bad_row_and_bad_link(tmp_path, capsys):
    plots = tmp_path / "plots.csv"
    plots.write_text("plot_id,species,si,age,h95_first\np1,spruce,14,55,18\np2,spruce,14,old,18\n")
    assert run("fit", "--plots", plots, "--out", tmp_path / "f") == 2
    assert "row 3" in capsys.readouterr().err
    assert run("fit", "--plots", plots, "--out", tmp_path / "f", "--link", "cubic") == 2


# -- synth and curves ---------------------------------------------------------


def test_synth_outputs(scene):
    names = {p.name for p in scene.iterdir()}
    assert {"species.asc", "psi.asc", "si.asc", "truth.asc", "observed.asc", "plots.csv", "scene.txt", "manifest.txt"} <= names
    scene_manifest = (scene / "scene.txt").read_text()
    assert "seed=11" in scene_manifest and "baseline.distC=20000.0" in scene_manifest


def test_synth_is_idempotent(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--out", tmp_path / name, "--ncols", 8, "--nrows", 6, "--seed", 3, "--psi-noise", 3.9) == 0
    for f in ("truth.asc", "observed.asc", "psi.asc", "plots.csv", "layers/h95_first.asc"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_psi_noise_leaves_scene_unchanged(tmp_path):
    assert run("synth", "--out", tmp_path / "a", "--ncols", 8, "--nrows", 6, "--seed", 3) == 0
    assert run("synth", "--out", tmp_path / "b", "--ncols", 8, "--nrows", 6, "--seed", 3, "--psi-noise", 2) == 0
    assert (tmp_path / "a" / "truth.asc").read_bytes() == (tmp_path / "b" / "truth.asc").read_bytes()
    assert (tmp_path / "a" / "psi.asc").read_bytes() != (tmp_path / "b" / "psi.asc").read_bytes()


def test_synth_validation(tmp_path, capsys):
    assert run("synth", "--out", tmp_path, "--species-mix", "oak:1") == 2
    assert "species_mix" in capsys.readouterr().err
    assert run("synth", "--out", tmp_path, "--age-range", "1,500") == 2
    assert run("synth", "--out", tmp_path, "--baseline", "h99=3") == 2


def test_curves(tmp_path):
    assert run("curves", "--species", "spruce", "--si", 26, "--lo", 0, "--hi", 32, "--steps", 5, "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "curve.csv")
    assert [float(r["h95_first"]) for r in rows] == [0, 8, 16, 24, 32]
    ages = [float(r["age"]) for r in rows]
    assert ages == sorted(ages)


def test_curves_validation(tmp_path, capsys):
    assert run("curves", "--species", "spruce", "--si", 26, "--lo", 0, "--out", tmp_path) == 2
    assert "hi" in capsys.readouterr().err
    assert run("curves", "--species", "spruce", "--si", 26, "--lo", 0, "--hi", 1, "--sweep", "NDVI", "--out", tmp_path) == 2
    assert run("curves", "--species", "elm", "--si", 26, "--lo", 0, "--hi", 1, "--out", tmp_path) == 2


def test_no_subcommand_is_usage_error():
    assert run() == 2
