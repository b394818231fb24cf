"""
Training on a toy task
======================

Trains a quarter-width network on 60 synthetic images of coloured discs
(three classes) with momentum SGD, the plateau schedule and gradient
clipping.  Takes about a minute on one core.
"""

# %%
import time

import numpy as np

from midrep import netdef, trainer
from midrep.synthetic import color_blobs
from midrep.trainer import TrainConfig

images, labels = color_blobs(60, seed=0)
spec = netdef.build_network("table1", width=0.25, num_classes=3)
config = TrainConfig(epochs=30, batch_size=8, seed=0, clip_norm=5.0)

t0 = time.perf_counter()
weights, log = trainer.train_cnn(spec, images[:45], labels[:45], images[45:], labels[45:], config)
print(f"trained in {time.perf_counter() - t0:.0f}s; decays at epochs {log.decay_events}")
for e in log.epochs[::5]:
    print(f"epoch {e['epoch']:2d}  loss {e['loss']:.4f}  val {e['val_acc']:.3f}  lr {e['lr']:.2e}")

# %%
# The returned weights are those of the best validation epoch.
print("validation accuracy", trainer.evaluate_classifier(spec, weights, images[45:], labels[45:]))

# %%
# Backprop agrees with central differences on a small stack.
small = netdef.build_network("table1", side=56, width=0.125, num_classes=3)
x = np.random.default_rng(0).uniform(-1, 1, (3, 56, 56))
print("gradient check:", trainer.grad_check(small, netdef.init_weights(small, 0), x, 1, probes=50))
