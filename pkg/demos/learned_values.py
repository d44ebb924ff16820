"""
Learning quantized values and exponents
=======================================

Layer by layer, the quantized weights are learned directly in code units
through a soft staircase, optionally together with the exponent of each
layer. Compare with the data-free exponent and with plain uniform codes.
"""

import time

from nupes.gptq import OptConfig, optimize_model
from nupes.runtime import QuantPolicy, calibrate, evaluate, fixture_splits, make_dataset, train_fixture
from nupes.search import powerquant_datafree

STEPS = 2000  # the full protocol uses 10k

ds = make_dataset(num_classes=4, num_samples=14_000, input_dim=8, seed=1, separation=3.0)
train, calib, test = fixture_splits(ds, 1024, 8000, seed=1)
model = train_fixture((64, 32), train, epochs=30, seed=1)
flags = dict(first_last_8bit=False)

print(f"full precision      {evaluate(model, test):.4f}")
naive = calibrate(model, QuantPolicy(4, 4, 1.0, **flags), calib.features)
print(f"uniform W4/A4       {evaluate(model, test, naive):.4f}")
pq = powerquant_datafree(model, 4)
pq_pol = calibrate(model, pq.policy(4, 4, **flags), calib.features)
print(f"data-free a={pq.exponent:.3f}  {evaluate(model, test, pq_pol):.4f}")

###############################################################################
# Learned values (``w``) and learned values plus per-layer exponents (``wa``).

for mode in ("w", "wa"):
    t0 = time.perf_counter()
    qm, report = optimize_model(model, calib.features, OptConfig(steps=STEPS, mode=mode, seed=1),
                                QuantPolicy(4, 4, 0.5, **flags))
    exps = " ".join(f"{r['learned_a']:.3f}" for r in report)
    print(f"learned {mode:2s}          {evaluate(qm, test):.4f}   a=[{exps}]  "
          f"({time.perf_counter() - t0:.0f} s)")
    for r in report:
        print(f"    layer {r['layer']}: loss {r['initial_loss']:.4f} -> {r['final_loss']:.4f}")
