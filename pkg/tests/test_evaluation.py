import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from standage.evaluation import (
    BASELINE,
    EvalPair,
    SceneSpec,
    breakdown,
    format_report,
    invert_height,
    read_manifest,
    read_scatter,
    rmse_md,
    scatter_export,
    synth_scene,
    write_manifest,
    write_report_csv,
)
from standage.mapping import predict_map
from standage.models import AgeModel, Species, builtin_registry, predict_age

REG = builtin_registry()

pair_lists = st.lists(
    st.tuples(st.floats(1, 300), st.floats(1, 300), st.floats(0.01, 50), st.sampled_from(["SI 8", "SI 14", "SI 23"])),
    min_size=1,
    max_size=40,
)


def as_pairs(raw):
    return [EvalPair(o, p, w, lab) for o, p, w, lab in raw]


# -- rmse_md ------------------------------------------------------------------


def test_unweighted_example():
    row = rmse_md([EvalPair(100, 90), EvalPair(50, 60)])
    assert (row.rmse, row.md) == (10, 0)


def test_weighted_two_stand_example():
    row = rmse_md([EvalPair(100, 90, 3.0), EvalPair(50, 60, 1.0)], weighted=True)
    assert row.rmse == 10 and row.md == 5
    assert row.md_pct == 5 / (0.75 * 100 + 0.25 * 50) * 100
    assert row.md_pct == pytest.approx(5.71, abs=0.005)


def test_perfect_fit_and_errors():
    row = rmse_md([EvalPair(40, 40), EvalPair(60, 60)])
    assert (row.rmse, row.md) == (0, 0)
    with pytest.raises(ValueError):
        rmse_md([])
    zero = rmse_md([EvalPair(0, 1)])
    assert math.isnan(zero.rmse_pct) and math.isnan(zero.md_pct)
    with pytest.raises(ValueError):
        rmse_md([EvalPair(1, 1, -1)], weighted=True)


@settings(max_examples=100, deadline=None)
@given(pair_lists)
def test_uniform_weights_equal_unweighted_exactly(raw):
    pairs = [EvalPair(o, p, 2.5) for o, p, _, _ in raw]
    assert rmse_md(pairs, weighted=True) == rmse_md(pairs)


@settings(max_examples=100, deadline=None)
@given(pair_lists, st.booleans())
def test_row_invariants(raw, weighted):
    row = rmse_md(as_pairs(raw), weighted)
    assert row.rmse >= abs(row.md) - 1e-12
    assert row.rmse_pct == pytest.approx(100 * row.rmse / row.mean_observed, rel=1e-9)


@settings(max_examples=60, deadline=None)
@given(pair_lists, st.randoms())
def test_permutation_invariance(raw, rnd):
    pairs = as_pairs(raw)
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    a, b = rmse_md(pairs, True), rmse_md(shuffled, True)
    assert a.rmse == b.rmse and a.md == b.md


@settings(max_examples=60, deadline=None)
@given(pair_lists, pair_lists)
def test_md_linear_in_unions(a_raw, b_raw):
    a, b = as_pairs(a_raw), as_pairs(b_raw)
    na, nb = len(a), len(b)
    whole = rmse_md(a + b).md
    assert whole == pytest.approx((na * rmse_md(a).md + nb * rmse_md(b).md) / (na + nb), rel=1e-9, abs=1e-9)


# -- breakdown ----------------------------------------------------------------


def test_breakdown_single_class():
    pairs = [EvalPair(50, 40, 1, "SI 14"), EvalPair(30, 35, 1, "SI 14")]
    rows = breakdown(pairs)
    assert [r.label for r in rows] == ["SI 14", "All"]
    assert rows[0].rmse == rows[1].rmse and rows[0].md == rows[1].md


def test_breakdown_pools_rather_than_averages():
    pairs = [EvalPair(50, 50, 1, "SI 8"), EvalPair(50, 50, 1, "SI 8"), EvalPair(50, 40, 1, "SI 23"), EvalPair(50, 60, 1, "SI 23")]
    rows = breakdown(pairs)
    assert rows[-1].rmse == pytest.approx(10 / math.sqrt(2))


def test_breakdown_orders_by_si():
    pairs = [EvalPair(1, 1, 1, lab) for lab in ("SI 23", "SI 8", "pSI 14", "SI 11", "other")]
    assert [r.label for r in breakdown(pairs)] == ["SI 8", "SI 11", "pSI 14", "SI 23", "other", "All"]


@settings(max_examples=60, deadline=None)
@given(pair_lists)
def test_all_row_md_is_mass_weighted_class_md(raw):
    pairs = as_pairs(raw)
    rows = breakdown(pairs, weighted=True)
    total = math.fsum(p.weight for p in pairs)
    combined = math.fsum(
        r.md * math.fsum(p.weight for p in pairs if p.label == r.label) / total for r in rows[:-1]
    )
    assert rows[-1].md == pytest.approx(combined, rel=1e-9, abs=1e-9)
    assert rows[-1] == rmse_md(pairs, True, "All")


def test_report_text_and_csv(tmp_path):
    rows = breakdown([EvalPair(100, 90, 3, "pSI 14"), EvalPair(50, 60, 1, "pSI 17")], weighted=True)
    text = format_report(rows, "Stands")
    lines = text.splitlines()
    assert lines[0] == "Stands"
    assert lines[1].split() == ["pSI", "14", "pSI", "17", "All"]
    assert lines[2].split() == ["n", "1", "1", "2"]
    assert lines[5].split() == ["MD", "10.0", "-10.0", "5.0"]
    path = tmp_path / "r.csv"
    write_report_csv(rows, path)
    assert path.read_text().splitlines()[0] == "class,n,rmse,rmse_pct,md,md_pct,mean_observed"


def test_scatter_round_trip(tmp_path):
    pairs = [EvalPair(1 / 3, 2 / 7, 0.1, "SI 14"), EvalPair(100, 90, 3, "pSI 11"), EvalPair(5, 6, 1, "spruce")]
    path = tmp_path / "s.csv"
    scatter_export(pairs, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "observed,predicted,class,weight" and len(lines) == 4
    assert read_scatter(path) == pairs


def test_manifest_round_trip(tmp_path):
    entries = SceneSpec(seed=12).manifest()
    path = tmp_path / "m.txt"
    write_manifest(entries, path)
    assert read_manifest(path) == entries
    assert entries["seed"] == "12" and entries["baseline.distC"] == "20000.0"


# -- synthetic scenes ---------------------------------------------------------


def test_invert_height_round_trip():
    model = REG[(Species.SPRUCE, 23)]
    ages = np.array([10.0, 30.0, 60.0])
    h = invert_height(model, np.log(ages), BASELINE)
    for hi, age in zip(h, ages):
        x = dict(BASELINE, h95_first=float(hi))
        assert predict_age(model.with_sigma(0), x) == pytest.approx(age, rel=1e-12)


def test_invert_height_ascending_branch_and_unreachable():
    model = REG[(Species.SPRUCE, 23)]
    vertex = 0.165 / (2 * 0.00274)
    h = invert_height(model, np.log([20.0, 70.0, 500.0]), BASELINE)
    assert np.all(h[:2] < vertex)
    assert math.isnan(h[2])
    linear = AgeModel(Species.SPRUCE, 26, 3.0, (("h95_first", 0.05),), 0.0)
    assert invert_height(linear, np.log([50.0]), {})[0] == pytest.approx((math.log(50) - 3) / 0.05)
    assert math.isnan(invert_height(linear, np.log([10.0]), {})[0])


def test_scene_determinism_and_mix():
    spec = SceneSpec(ncols=15, nrows=10, seed=3)
    a, b = synth_scene(REG, spec), synth_scene(REG, spec)
    assert a.truth == b.truth and a.observed == b.observed
    assert all(a.stack.predictors[k] == b.stack.predictors[k] for k in a.stack.predictors)
    assert np.all(a.stack.species.values == 1)
    assert set(np.unique(a.si.values)) <= {14, 17, 20, 23}
    c = synth_scene(REG, SceneSpec(ncols=15, nrows=10, seed=4))
    assert c.truth != a.truth


def test_scene_mixed_species():
    spec = SceneSpec(ncols=30, nrows=30, seed=1, species_mix={Species.SPRUCE: 1, Species.PINE: 1, Species.BIRCH: 1},
                     si_mix={14: 1, 20: 1}, age_range=(20, 50))
    scene = synth_scene(REG, spec)
    assert set(np.unique(scene.stack.species.values)) == {1, 2, 3}
    lo, hi = scene.truth.values.min(), scene.truth.values.max()
    assert 20 <= lo and hi <= 50
    assert len(scene.plots) == 900


def test_sigma_zero_scene_is_recovered():
    reg0 = REG.map_models(lambda m: m.with_sigma(0.0))
    scene = synth_scene(reg0, SceneSpec(ncols=25, nrows=25, seed=8))
    age, tally = predict_map(scene.stack, reg0)
    assert tally.predicted == 625
    assert np.max(np.abs(age.values / scene.truth.values - 1)) < 1e-6
    assert scene.observed == scene.truth


def test_plot_table_matches_layers():
    scene = synth_scene(REG, SceneSpec(ncols=4, nrows=3, seed=0))
    p = scene.plots[5]
    assert p.plot_id == "r1c1"
    assert p.predictors["h95_first"] == scene.stack.predictors["h95_first"].values[1, 1]
    assert p.age == scene.observed.values[1, 1]
    assert p.predictors["h95_first2"] == p.predictors["h95_first"] ** 2


def test_unreachable_stratum_raises_clearly():
    # the printed spruce SI 11 block cannot reach any age at a realistic distC
    with pytest.raises(ValueError, match="spruce SI 11"):
        synth_scene(REG, SceneSpec(ncols=3, nrows=3, si_mix={11: 1}, max_redraws=5))


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(age_range=(1, 50))
    with pytest.raises(ValueError):
        SceneSpec(age_range=(50, 300))
    with pytest.raises(ValueError):
        SceneSpec(ncols=0)
    with pytest.raises(ValueError, match="baseline"):
        synth_scene(REG, SceneSpec(ncols=2, nrows=2, baseline={"cc10": 0.5}))
