"""Per-attribute, per-representation SVM sweep, best-layer selection and benchmark reports."""

from __future__ import annotations

import csv
import io
import json
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import svm
from .data import AttributeTable
from .errors import ArgumentError, DataError, FixtureError, ProtocolError
from .featex import REP_NAMES, FeatureSet

C_GRID = (0.01, 0.1, 1.0, 10.0)


@dataclass
class SweepResult:
    grid: dict[str, dict[str, float]]  # attribute -> representation -> selection accuracy (fraction)
    chosen: dict[str, str]
    ties: dict[str, list[str]]
    models: dict[tuple[str, str], svm.SvmModel] = field(default_factory=dict, repr=False)
    meta: dict = field(default_factory=dict)

    @property
    def attributes(self) -> list[str]:
        return list(self.grid)

    def check(self) -> None:
        for attr, row in self.grid.items():
            best = self.chosen[attr]
            if any(row[best] < v for v in row.values()):
                raise AssertionError(f"{attr}: chosen {best} is not the row maximum")


def _select(row: dict[str, float], order) -> tuple[str, list[str]]:
    top = max(row.values())
    tied = [r for r in order if r in row and row[r] == top]
    return tied[0], tied


def _fit_one(x_tr, y_tr, x_val, y_val, C_policy, seed, attr, rep):
    if isinstance(C_policy, (int, float)):
        return svm.train(x_tr, y_tr, float(C_policy), seed=seed, attribute=attr, representation=rep)
    if x_val is None:
        raise ProtocolError("a C grid needs a non-empty validation split")
    best, best_acc = None, -1.0
    for C in C_policy:
        model = svm.train(x_tr, y_tr, float(C), seed=seed, attribute=attr, representation=rep)
        acc = svm.accuracy(model, x_val, y_val)
        if acc > best_acc:
            best, best_acc = model, acc
    return best


def sweep(features: FeatureSet, table: AttributeTable, selection_split: str = "train", C_policy=1.0,
          attributes=None, reps=REP_NAMES, seed: int = 0, threads: int = 1, balanced: bool = False) -> SweepResult:
    """Train one SVM per (attribute, representation) on the training split and pick the best layer.

    Selection accuracy is measured on ``selection_split`` (``"train"`` or
    ``"val"``).  ``C_policy`` is a fixed C or a sequence of candidates chosen
    on the validation split.  Ties go to the earliest representation.
    """
    if selection_split not in ("train", "val"):
        raise ArgumentError(f"selection split must be 'train' or 'val', got {selection_split!r}")
    attributes = list(table.names if attributes is None else attributes)
    train_ids = table.split_ids("train")
    sel_ids = table.split_ids(selection_split)
    val_ids = table.split_ids("val")
    if len(train_ids) == 0 or len(sel_ids) == 0:
        raise DataError(f"empty train or {selection_split} split")
    mats = {}
    for rep in reps:
        mats[rep] = (
            features.matrix(rep, train_ids, table.filenames),
            features.matrix(rep, sel_ids, table.filenames),
            features.matrix(rep, val_ids, table.filenames) if len(val_ids) else None,
        )

    def job(attr, rep):
        col = table.column(attr).astype(np.int64)
        x_tr, x_sel, x_val = mats[rep]
        y_val = col[val_ids] if x_val is not None else None
        model = _fit_one(x_tr, col[train_ids], x_val, y_val, C_policy, seed, attr, rep)
        return model, svm.accuracy(model, x_sel, col[sel_ids], balanced=balanced)

    pairs = [(a, r) for a in attributes for r in reps]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda p: job(*p), pairs))
    else:
        results = [job(*p) for p in pairs]

    grid: dict[str, dict[str, float]] = {a: {} for a in attributes}
    models = {}
    for (attr, rep), (model, acc) in zip(pairs, results):
        grid[attr][rep] = acc
        models[(attr, rep)] = model
    chosen, ties = {}, {}
    for attr, row in grid.items():
        chosen[attr], ties[attr] = _select(row, reps)
    meta = {"selection_split": selection_split, "C_policy": C_policy if isinstance(C_policy, (int, float))
            else list(C_policy), "seed": seed, "balanced": balanced, "representations": list(reps)}
    return SweepResult(grid, chosen, ties, models, meta)


def plant_labels(matrix, rng: np.random.Generator, margin: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic labels that are a linear function of one representation.

    Scores are a random Gaussian functional of the standardized features and
    labels are their sign about the median.  Rows whose score lies within
    ``margin`` standard deviations of the threshold are flagged out in the
    returned ``keep`` mask, so the kept rows are linearly separable with a
    margin.  Used to check that the sweep recovers the planted layer.
    """
    x = np.asarray(matrix, dtype=np.float64)
    z = svm.standardize_fit(x).apply(x)
    score = z @ rng.normal(size=z.shape[1])
    centered = score - np.median(score)
    labels = np.where(centered >= 0, 1, -1).astype(np.int8)
    keep = np.abs(centered) >= margin * score.std()
    return labels, keep


# --------------------------------------------------------------------------
# reports


@dataclass
class BenchmarkReport:
    accuracy: dict[str, float]  # attribute -> test accuracy (%) with the chosen representation
    chosen: dict[str, str]
    layer_means: dict[str, float]  # representation -> mean test accuracy (%) over all attributes
    overall: float
    grid: dict[str, dict[str, float]] = field(default_factory=dict)  # selection accuracy (%)
    meta: dict = field(default_factory=dict)

    def check(self) -> None:
        if abs(self.overall - statistics.fmean(self.accuracy.values())) > 1e-9:
            raise AssertionError("overall mean is not the mean of the per-attribute accuracies")


def build_report(accuracy: dict[str, float], chosen: dict[str, str] | None = None,
                 per_layer: dict[str, dict[str, float]] | None = None, grid=None, meta=None) -> BenchmarkReport:
    """Assemble a report from per-attribute accuracies (%).

    ``per_layer`` maps attribute -> representation -> accuracy and yields the
    layer-wise means; every layer must cover the same attribute set.
    """
    if not accuracy:
        raise ArgumentError("report needs at least one attribute")
    layer_means = {}
    if per_layer:
        reps = [r for r in REP_NAMES if r in next(iter(per_layer.values()))]
        for rep in reps:
            missing = [a for a in accuracy if rep not in per_layer.get(a, {})]
            if missing:
                raise DataError(f"layer {rep} lacks attributes {missing[:3]}")
            layer_means[rep] = statistics.fmean(per_layer[a][rep] for a in accuracy)
    return BenchmarkReport(
        dict(accuracy), dict(chosen or {a: "" for a in accuracy}), layer_means,
        statistics.fmean(accuracy.values()), dict(grid or {}), dict(meta or {}),
    )


def evaluate(result: SweepResult, features: FeatureSet, table: AttributeTable, test_split: str = "test",
             dataset: str = "") -> BenchmarkReport:
    """Test accuracy of each attribute's chosen model plus layer-wise means over all attributes."""
    test_ids = table.split_ids(test_split)
    if len(test_ids) == 0:
        raise DataError(f"{test_split} split is empty")
    used = {"train", result.meta.get("selection_split", "train")}
    for split in sorted(used):
        if split == test_split:
            raise ProtocolError(f"test split {test_split!r} is also the {split!r} split")
        overlap = np.intersect1d(test_ids, table.split_ids(split))
        if overlap.size:
            raise ProtocolError(f"test split shares {overlap.size} images with the {split} split")
    per_layer: dict[str, dict[str, float]] = {a: {} for a in result.attributes}
    for (attr, rep), model in result.models.items():
        x = features.matrix(rep, test_ids, table.filenames)
        y = table.column(attr)[test_ids].astype(np.int64)
        per_layer[attr][rep] = 100.0 * svm.accuracy(model, x, y)
    accuracy = {a: per_layer[a][result.chosen[a]] for a in result.attributes}
    grid = {a: {r: 100.0 * v for r, v in row.items()} for a, row in result.grid.items()}
    meta = dict(result.meta, dataset=dataset, test_split=test_split)
    return build_report(accuracy, result.chosen, per_layer, grid, meta)


# --------------------------------------------------------------------------
# fixtures


@dataclass(frozen=True)
class DiffRow:
    key: str
    column: str
    report: float | None
    fixture: float
    delta: float | None
    passed: bool | None


def fixture_path(name: str):
    """Path of a packaged fixture (``published_table2.csv`` etc.)."""
    return resources.files("midrep") / "fixtures" / name


def _read_csv(path) -> tuple[list[str], list[dict]]:
    text = Path(str(path)).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    if not reader.fieldnames:
        raise FixtureError(f"fixture {path} is empty")
    return list(reader.fieldnames), list(reader)


def _diff(key, column, got, want, tol):
    if got is None:
        return DiffRow(key, column, None, want, None, None)
    delta = got - want
    return DiffRow(key, column, got, want, delta, abs(delta) <= tol)


def compare_fixture(report: BenchmarkReport, path, tolerance: float = 0.0, column: str | None = None) -> list[DiffRow]:
    """Cell-wise deltas between a report and a published-numbers fixture.

    Recognized headers: ``attribute,<datasets>`` (per-attribute accuracy),
    ``source,<datasets>`` (overall means; the ``ours`` row is compared, others
    are listed for reference) and ``dataset,C2,...,F2`` (layer-wise means).
    ``column`` selects the dataset; it defaults to the report's ``dataset``
    metadata.
    """
    header, rows = _read_csv(path)
    column = (column or report.meta.get("dataset") or "").lower()
    kind = header[0]
    try:
        if kind == "attribute":
            if column not in header[1:]:
                raise FixtureError(f"fixture has no column {column!r}")
            names = [r["attribute"] for r in rows]
            for name in names:
                if name not in report.accuracy:
                    raise FixtureError(f"fixture attribute {name!r} is not in the report")
            for name in report.accuracy:
                if name not in names:
                    raise FixtureError(f"report attribute {name!r} is not in the fixture")
            return [_diff(r["attribute"], column, report.accuracy[r["attribute"]], float(r[column]), tolerance)
                    for r in rows]
        if kind == "source":
            if column not in header[1:]:
                raise FixtureError(f"fixture has no column {column!r}")
            return [_diff(r["source"], column, report.overall if r["source"].lower() == "ours" else None,
                          float(r[column]), tolerance) for r in rows]
        if kind == "dataset":
            for rep in header[1:]:
                if rep not in REP_NAMES:
                    raise FixtureError(f"fixture layer {rep!r} is not a representation")
            matching = [r for r in rows if r["dataset"].lower() == column]
            if not matching:
                raise FixtureError(f"fixture has no row for dataset {column!r}")
            return [_diff(rep, column, report.layer_means.get(rep), float(matching[0][rep]), tolerance)
                    for rep in header[1:]]
    except (KeyError, ValueError) as exc:
        raise FixtureError(f"malformed fixture {path}: {exc}") from None
    raise FixtureError(f"unrecognized fixture header {header}")


def load_published_table2(dataset: str) -> dict[str, float]:
    _, rows = _read_csv(fixture_path("published_table2.csv"))
    return {r["attribute"]: float(r[dataset.lower()]) for r in rows}


# --------------------------------------------------------------------------
# emit / parse

MEAN_ROW = "__overall__"


def _num(v: float) -> str:
    return repr(float(v))


def render_csv(report: BenchmarkReport) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["attribute", "representation", "accuracy"])
    for attr, acc in report.accuracy.items():
        w.writerow([attr, report.chosen.get(attr, ""), _num(acc)])
    w.writerow([MEAN_ROW, "", _num(report.overall)])
    return out.getvalue()


def render_grid_csv(report: BenchmarkReport) -> str:
    reps = [r for r in REP_NAMES if any(r in row for row in report.grid.values())]
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["attribute"] + reps)
    for attr, row in report.grid.items():
        w.writerow([attr] + [_num(row[r]) if r in row else "" for r in reps])
    return out.getvalue()


def render_json(report: BenchmarkReport) -> str:
    doc = {
        "accuracy": report.accuracy,
        "chosen": report.chosen,
        "layer_means": report.layer_means,
        "overall": report.overall,
        "grid": report.grid,
        "meta": report.meta,
    }
    return json.dumps(doc, indent=2) + "\n"


def render_markdown(report: BenchmarkReport) -> str:
    lines = ["## Attribute accuracy (%)", "", "| Attribute | Accuracy | Representation |", "|---|---:|---|"]
    for attr, acc in report.accuracy.items():
        lines.append(f"| {attr} | {acc:.2f} | {report.chosen.get(attr, '')} |")
    lines += ["", "## Overall", "", "| Dataset | Mean accuracy (%) |", "|---|---:|",
              f"| {report.meta.get('dataset', '') or '-'} | {report.overall:.2f} |"]
    if report.layer_means:
        reps = list(report.layer_means)
        lines += ["", "## Layer-wise mean accuracy (%)", "", "| | " + " | ".join(reps) + " |",
                  "|---|" + "---:|" * len(reps),
                  "| mean | " + " | ".join(f"{report.layer_means[r]:.2f}" for r in reps) + " |"]
    if report.grid:
        reps = [r for r in REP_NAMES if any(r in row for row in report.grid.values())]
        lines += ["", "## Selection accuracy grid (%)", "", "| Attribute | " + " | ".join(reps) + " |",
                  "|---|" + "---:|" * len(reps)]
        for attr, row in report.grid.items():
            cells = [f"{row[r]:.2f}" if r in row else "" for r in reps]
            lines.append(f"| {attr} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


_RENDERERS = {"csv": render_csv, "json": render_json, "markdown": render_markdown, "grid": render_grid_csv}


def emit(report: BenchmarkReport, fmt: str, path=None) -> str:
    """Render ``report`` as ``csv``, ``json``, ``markdown`` or ``grid`` (per-layer CSV); writes ``path`` if given."""
    try:
        text = _RENDERERS[fmt](report)
    except KeyError:
        raise ArgumentError(f"unknown report format {fmt!r}") from None
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def parse_report_json(text: str) -> BenchmarkReport:
    doc = json.loads(text)
    return BenchmarkReport(doc["accuracy"], doc["chosen"], doc["layer_means"], doc["overall"], doc["grid"], doc["meta"])


def parse_report_csv(text: str) -> tuple[dict[str, float], dict[str, str], float]:
    """Per-attribute accuracies, chosen layers and the emitted overall mean from :func:`render_csv` output."""
    rows = list(csv.DictReader(io.StringIO(text)))
    acc, chosen, overall = {}, {}, None
    for r in rows:
        if r["attribute"] == MEAN_ROW:
            overall = float(r["accuracy"])
        else:
            acc[r["attribute"]] = float(r["accuracy"])
            chosen[r["attribute"]] = r["representation"]
    if overall is None:
        raise DataError("report CSV has no overall row")
    return acc, chosen, overall


def load_report(path) -> BenchmarkReport:
    return parse_report_json(Path(path).read_text(encoding="utf-8"))


def save_sweep(result: SweepResult, directory) -> None:
    """Write the selection grid/choices as JSON plus one model file per (attribute, representation)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for k, ((attr, rep), model) in enumerate(sorted(result.models.items())):
        fname = f"model_{k:04d}.msvm"
        svm.save_model(model, directory / fname)
        index.append({"attribute": attr, "representation": rep, "file": fname})
    doc = {"grid": result.grid, "chosen": result.chosen, "ties": result.ties, "meta": result.meta, "models": index}
    (directory / "sweep.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_sweep(directory) -> SweepResult:
    directory = Path(directory)
    doc = json.loads((directory / "sweep.json").read_text(encoding="utf-8"))
    models = {(m["attribute"], m["representation"]): svm.load_model(directory / m["file"]) for m in doc["models"]}
    return SweepResult(doc["grid"], doc["chosen"], doc["ties"], models, doc["meta"])
