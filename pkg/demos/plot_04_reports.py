"""
Reports and published-number fixtures
=====================================

Feeds the packaged per-attribute accuracies through the report pipeline,
renders them and diffs them against the overall and layer-wise fixtures.
"""

# %%
from midrep import bench

for dataset in ("celeba", "lfwa"):
    report = bench.build_report(bench.load_published_table2(dataset), meta={"dataset": dataset})
    print(f"{dataset}: mean over {len(report.accuracy)} attributes = {report.overall:.4f}")
    for row in bench.compare_fixture(report, bench.fixture_path("published_table3.csv"), tolerance=0.05):
        status = "n/a" if row.passed is None else ("ok" if row.passed else "FAIL")
        print(f"   {row.key:10s} fixture {row.fixture:5.1f}  {status}")

# %%
# The CSV form ends with an overall row that can be recomputed from the
# per-attribute rows.
report = bench.build_report(bench.load_published_table2("celeba"), meta={"dataset": "celeba"})
text = bench.emit(report, "csv")
print("\n".join(text.splitlines()[:4] + ["..."] + text.splitlines()[-2:]))

# %%
# Markdown is meant for pasting into notes.
print(bench.emit(report, "markdown")[:400])
