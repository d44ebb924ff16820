"""
Picking the exponent without data
=================================

Train a small classifier, then choose one exponent for all layers by
minimising the weight reconstruction error with a Nelder-Mead simplex.
"""

import numpy as np

from nupes.quant import QuantConfig
from nupes.runtime import QuantPolicy, calibrate, evaluate, fixture_splits, make_dataset, train_fixture
from nupes.search import grid_probe, objective, powerquant_datafree

ds = make_dataset(num_classes=4, num_samples=14_000, input_dim=8, seed=0, separation=3.0)
train, calib, test = fixture_splits(ds, 1024, 8000, seed=0)
model = train_fixture((64, 32), train, epochs=30, seed=0)
print(f"full precision test accuracy: {evaluate(model, test):.4f}")

###############################################################################
# The search: a handful of simplex steps is enough.

res = powerquant_datafree(model, bits=4)
for t in res.search.trace:
    print(f"iter {t['iteration']:2d}  best a={t['best_a']:.4f}  error={t['error']:.4f}")

###############################################################################
# A grid over the whole range shows the curve the simplex walked down.

weights = [l.weights for l in model.layers]
probe = grid_probe(lambda a: objective(weights, a), step=0.05)
for a, e in zip(probe.exponents, probe.errors):
    print(f"a={a:.2f} " + "#" * int(40 * probe.errors.min() / e))

###############################################################################
# Accuracy at W4/A4, every layer at 4 bits.

flags = dict(first_last_8bit=False)
for name, a in (("uniform", 1.0), ("searched", res.exponent)):
    pol = calibrate(model, QuantPolicy(4, 4, a, **flags), calib.features)
    print(f"{name:9s} a={a:.3f}  accuracy={evaluate(model, test, pol):.4f}")
