"""
Recovering a planted layer
==========================

Labels that are a linear function of one representation should lead the
best-layer sweep back to that representation.  This runs a single small
trial per layer on a narrow random network.
"""

# %%
import time

import numpy as np

from midrep import bench, featex, netdef
from midrep.data import AttributeTable
from midrep.synthetic import noise_patches

t0 = time.perf_counter()
spec = netdef.build_network("table1", side=56, width=0.0625)
weights = netdef.init_weights(spec, seed=0)
n, n_train, n_val = 2000, 1500, 250
x = noise_patches(n, 56, seed=0)

features = featex.FeatureSet()
for start in range(0, n, 100):
    ids = np.arange(start, min(start + 100, n))
    for rep, mat in featex.extract_batch(spec, weights, x[ids]).items():
        features.add(rep, ids, mat)
print({rep: mat.shape for rep, (_, mat) in features.reps.items()}, f"{time.perf_counter() - t0:.0f}s")

# %%
# For each layer, plant labels, drop the rows closest to the threshold and
# run the sweep with the train split as the selection split.
splits = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val))
rng = np.random.default_rng(100)
for planted in featex.REP_NAMES:
    labels, keep = bench.plant_labels(features.matrix(planted, np.arange(n)), rng)
    kept = np.flatnonzero(keep)
    sub = featex.FeatureSet()
    for rep in featex.REP_NAMES:
        sub.add(rep, np.arange(kept.size), features.matrix(rep, kept))
    files = [f"{i:06d}.png" for i in kept]
    table = AttributeTable(["Planted"], files, labels[kept][:, None]).with_partition(dict(zip(files, splits[kept])))
    result = bench.sweep(sub, table, C_policy=0.1)
    report = bench.evaluate(result, sub, table)
    row = " ".join(f"{r}:{100 * v:.1f}" for r, v in result.grid["Planted"].items())
    print(f"planted {planted} -> chosen {result.chosen['Planted']}, test {report.accuracy['Planted']:.1f}% | {row}")
print(f"{time.perf_counter() - t0:.0f}s total")

# %%
# F1 and F2 are adjacent affine stages, so a functional planted on one is
# nearly as learnable from the other and the two can swap at this sample
# size.  The acceptance suite uses twice as many images and ten trials per
# layer.
