import json
import statistics

import numpy as np
import pytest

from midrep import bench
from midrep.data import CELEBA_ATTRIBUTES, AttributeTable
from midrep.errors import ArgumentError, DataError, FixtureError, ProtocolError
from midrep.featex import REP_NAMES, FeatureSet


def make_table(labels, names, splits):
    n = labels.shape[0]
    files = [f"{i:06d}.jpg" for i in range(n)]
    return AttributeTable(list(names), files, labels.astype(np.int8)).with_partition(dict(zip(files, splits)))


def random_features(n, dims, seed=0, reps=REP_NAMES):
    rng = np.random.default_rng(seed)
    fs = FeatureSet()
    for rep in reps:
        fs.add(rep, np.arange(n), rng.normal(size=(n, dims)))
    return fs


def default_splits(n, n_train, n_val):
    return ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)


def test_identical_features_tie_to_earliest():
    rng = np.random.default_rng(0)
    n = 60
    shared = rng.normal(size=(n, 4))
    fs = FeatureSet()
    for rep in REP_NAMES:
        fs.add(rep, np.arange(n), shared)
    y = np.where(shared[:, 0] > 0, 1, -1)[:, None]
    table = make_table(y, ["A"], default_splits(n, 40, 10))
    result = bench.sweep(fs, table)
    assert result.chosen["A"] == "C2"
    assert result.ties["A"] == list(REP_NAMES)
    result.check()


def test_grid_size_full_attribute_set():
    n = 24
    rng = np.random.default_rng(1)
    labels = np.where(rng.random((n, 40)) < 0.5, 1, -1)
    labels[0], labels[1] = 1, -1
    table = make_table(labels, CELEBA_ATTRIBUTES, default_splits(n, 16, 4))
    result = bench.sweep(random_features(n, 3), table)
    assert sum(len(row) for row in result.grid.values()) == 280
    assert len(result.models) == 280
    result.check()


def test_planted_layer_recovered():
    n = 400
    fs = random_features(n, 8, seed=2)
    ids = np.arange(n)
    labels, keep = bench.plant_labels(fs.matrix("C4", ids), np.random.default_rng(3))
    kept = ids[keep]
    sub = FeatureSet()
    for rep in REP_NAMES:
        sub.add(rep, np.arange(kept.size), fs.matrix(rep, kept))
    table = make_table(labels[keep][:, None], ["Planted"], default_splits(kept.size, 250, 50))
    result = bench.sweep(sub, table)
    assert result.chosen["Planted"] == "C4"
    report = bench.evaluate(result, sub, table)
    assert report.accuracy["Planted"] > 95
    assert all(report.grid["Planted"]["C4"] >= v for v in report.grid["Planted"].values())


def test_plant_labels_balanced_and_margin():
    x = np.random.default_rng(4).normal(size=(1001, 5))
    labels, keep = bench.plant_labels(x, np.random.default_rng(5), margin=0.1)
    assert abs(int(labels.sum())) <= 1
    assert 0.85 < keep.mean() < 0.95


def test_val_selection_and_C_grid():
    n = 120
    fs = random_features(n, 5, seed=6)
    labels, _ = bench.plant_labels(fs.matrix("C5", np.arange(n)), np.random.default_rng(7))
    table = make_table(labels[:, None], ["A"], default_splits(n, 70, 25))
    result = bench.sweep(fs, table, selection_split="val", C_policy=bench.C_GRID)
    assert result.meta["selection_split"] == "val"
    assert np.float32(result.models[("A", "C5")].C) in np.float32(bench.C_GRID)
    with pytest.raises(ArgumentError):
        bench.sweep(fs, table, selection_split="test")


def test_C_grid_needs_validation():
    n = 40
    fs = random_features(n, 3)
    labels = np.array([1, -1] * 20)[:, None]
    table = make_table(labels, ["A"], ["train"] * 30 + ["test"] * 10)
    with pytest.raises(ProtocolError):
        bench.sweep(fs, table, C_policy=bench.C_GRID)


def test_evaluate_rejects_overlap():
    n = 40
    fs = random_features(n, 3)
    labels = np.array([1, -1] * 20)[:, None]
    table = make_table(labels, ["A"], default_splits(n, 20, 10))
    result = bench.sweep(fs, table, selection_split="val")
    with pytest.raises(ProtocolError):
        bench.evaluate(result, fs, table, test_split="val")
    with pytest.raises(ProtocolError):
        bench.evaluate(result, fs, table, test_split="train")


def test_missing_features_named():
    n = 30
    fs = random_features(n - 1, 3)
    labels = np.array([1, -1] * 15)[:, None]
    table = make_table(labels, ["A"], ["train"] * n)
    with pytest.raises(DataError, match="000029.jpg"):
        bench.sweep(fs, table)


def test_threads_match_serial():
    n = 80
    fs = random_features(n, 4, seed=8)
    rng = np.random.default_rng(9)
    labels = np.where(rng.random((n, 3)) < 0.5, 1, -1)
    table = make_table(labels, ["A", "B", "C"], default_splits(n, 50, 10))
    a = bench.sweep(fs, table, threads=1)
    b = bench.sweep(fs, table, threads=3)
    assert a.grid == b.grid and a.chosen == b.chosen
    assert all(a.models[k].identical(b.models[k]) for k in a.models)


@pytest.mark.parametrize("dataset,mean", [("celeba", 89.7825), ("lfwa", 85.88775)])
def test_table2_fixture_means(dataset, mean):
    acc = bench.load_published_table2(dataset)
    assert len(acc) == 40
    assert statistics.fmean(acc.values()) == pytest.approx(mean, abs=1e-9)


def test_table2_fixture_compare_zero_deltas():
    acc = bench.load_published_table2("celeba")
    report = bench.build_report(acc, meta={"dataset": "celeba"})
    rows = bench.compare_fixture(report, bench.fixture_path("published_table2.csv"))
    assert len(rows) == 40 and all(r.delta == 0 and r.passed for r in rows)
    renamed = dict(acc)
    renamed["Smiling_X"] = renamed.pop("Smiling")
    with pytest.raises(FixtureError):
        bench.compare_fixture(bench.build_report(renamed, meta={"dataset": "celeba"}),
                              bench.fixture_path("published_table2.csv"))


def test_overall_and_layer_fixtures():
    acc = bench.load_published_table2("lfwa")
    report = bench.build_report(acc, meta={"dataset": "lfwa"})
    rows = bench.compare_fixture(report, bench.fixture_path("published_table3.csv"), tolerance=0.05)
    ours = [r for r in rows if r.key == "ours"][0]
    assert ours.passed
    assert all(r.passed is None for r in rows if r.key != "ours")
    per_layer = {a: {r: 86.0 if r in ("C3", "C4", "C5") else 80.0 for r in REP_NAMES} for a in acc}
    report = bench.build_report(acc, per_layer=per_layer, meta={"dataset": "lfwa"})
    rows = bench.compare_fixture(report, bench.fixture_path("published_table4.csv"), tolerance=0.5)
    assert [r.key for r in rows] == list(REP_NAMES)
    assert [r.passed for r in rows] == [False, True, True, True, False, False, False]


def test_layer_means_need_full_coverage():
    with pytest.raises(DataError):
        bench.build_report({"A": 90.0, "B": 80.0}, per_layer={"A": {"C2": 90.0}, "B": {}})
    with pytest.raises(ArgumentError):
        bench.build_report({})


def sample_report():
    rng = np.random.default_rng(10)
    acc = {a: float(rng.uniform(60, 99)) for a in CELEBA_ATTRIBUTES}
    chosen = {a: REP_NAMES[i % 7] for i, a in enumerate(CELEBA_ATTRIBUTES)}
    per_layer = {a: {r: float(rng.uniform(60, 99)) for r in REP_NAMES} for a in CELEBA_ATTRIBUTES}
    return bench.build_report(acc, chosen, per_layer, per_layer, {"dataset": "celeba"})


def test_csv_mean_recomputes():
    report = sample_report()
    acc, chosen, overall = bench.parse_report_csv(bench.emit(report, "csv"))
    assert abs(statistics.fmean(acc.values()) - overall) <= 1e-9
    assert acc == report.accuracy and chosen == report.chosen


def test_emit_deterministic_and_round_trip(tmp_path):
    report = sample_report()
    for fmt in ("csv", "json", "markdown", "grid"):
        assert bench.emit(report, fmt) == bench.emit(report, fmt)
    bench.emit(report, "json", tmp_path / "r.json")
    back = bench.load_report(tmp_path / "r.json")
    assert back.accuracy == report.accuracy and back.layer_means == report.layer_means
    assert json.loads(bench.emit(back, "json")) == json.loads(bench.emit(report, "json"))
    with pytest.raises(ArgumentError):
        bench.emit(report, "xml")


def test_markdown_grid_shape():
    text = bench.emit(sample_report(), "markdown")
    section = text.split("## Selection accuracy grid (%)")[1].strip().splitlines()
    rows = section[2:]
    assert len(rows) == 40
    assert all(r.count("|") == 9 for r in rows)


def test_save_load_sweep(tmp_path):
    n = 50
    fs = random_features(n, 3, seed=11)
    labels = np.where(np.random.default_rng(12).random((n, 2)) < 0.5, 1, -1)
    table = make_table(labels, ["A", "B"], default_splits(n, 30, 10))
    result = bench.sweep(fs, table)
    bench.save_sweep(result, tmp_path / "s")
    back = bench.load_sweep(tmp_path / "s")
    assert back.grid == result.grid and back.chosen == result.chosen
    assert all(back.models[k].identical(result.models[k]) for k in result.models)
    a = bench.evaluate(result, fs, table)
    b = bench.evaluate(back, fs, table)
    assert a.accuracy == b.accuracy
