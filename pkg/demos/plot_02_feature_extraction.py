"""
Extracting mid-level representations
====================================

Runs a randomly initialised network on a synthetic face-sized image and pulls
out all seven representations, including the flip-averaged conv grids, the
condensed C6 variants and the doubled-input mode.
"""

# %%
import numpy as np

from midrep import data, featex, netdef
from midrep.synthetic import color_blobs

spec = netdef.build_network("table1")
weights = netdef.init_weights(spec, seed=0)

# %%
# Aligned inputs are 120x120 on [0, 255]; preprocessing takes the centre
# 112x112 patch and rescales it to roughly [-1, 1].
images, _ = color_blobs(1, seed=3)
patch = data.preprocess(images[0]).data
print("patch", patch.shape, f"range [{patch.min():.3f}, {patch.max():.3f}]")

rep = featex.extract(spec, weights, patch)
for name, vec in rep.features.items():
    print(f"{name}: {vec.shape[0]} values, mean {vec.mean():+.4f}")
print("provenance", rep.provenance)

# %%
# Flip averaging makes the FC representations mirror invariant.
mirrored = featex.extract(spec, weights, featex.mirror(patch))
print("F1 mirror difference:", np.abs(rep["F1"] - mirrored["F1"]).max())

# %%
# The condensed C6 keeps two of the three grid rows: the upper or the lower
# half of the face.
upper = featex.condense_c6(rep, "upper")
lower = featex.condense_c6(rep, "lower")
print("condensed C6", upper.shape, lower.shape)

# %%
# A 240x240 aligned image gives a 224x224 patch.  Conv representations keep
# their lengths because the pooling schedule adapts; FC taps are refused.
big = np.kron(images[0], np.ones((1, 2, 2), np.float32))
doubled = featex.extract(spec, weights, data.preprocess(big, doubled=True).data, reps=featex.CONV_REPS)
print({k: v.shape[0] for k, v in doubled.features.items()})
