"""
Layer shapes and the pooling schedule
=====================================

Builds the reference network, walks its output shapes at the default 112
pixel input and shows how each convolutional tap is pooled down to a 3x3 grid.
"""

# %%
# The network is a flat list of layers; ``infer_shapes`` propagates an input
# side through it without touching any weights.
from midrep import featex, netdef

spec = netdef.build_network("table1")
for name, shape in netdef.infer_shapes(spec, 112):
    print(f"{name:8s} {shape}")

# %%
# Each tap becomes a fixed-length representation.  Conv maps are averaged
# then max-pooled to 3x3; FC taps are used as they are.
shapes = dict(netdef.infer_shapes(spec, 112))
for rep in featex.REP_NAMES:
    c, *spatial = shapes[featex.REP_TO_TAP[rep]]
    if spatial:
        stages = featex.derive_schedule(spatial[0])
        print(f"{rep}: {spatial[0]}x{spatial[0]} -> {stages} -> {c} x 3 x 3 = {9 * c}")
    else:
        print(f"{rep}: {c}")

# %%
# The schedule is defined for every side from 3 up; a few examples.
for side in (3, 5, 7, 14, 28, 56, 100):
    print(side, featex.derive_schedule(side))

# %%
# Doubling the input to 224 doubles every conv map; the FC stack no longer
# fits and reports ``None``.
doubled = dict(netdef.infer_shapes(spec, 224))
print("Conv6 at 224:", doubled["Conv6"], " FC1 at 224:", doubled["FC1"])
