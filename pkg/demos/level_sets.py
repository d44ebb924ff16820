"""
Where do the quantization levels sit?
=====================================

Four 4-bit level sets normalised to [-1, 1], and what each does to a
bell-shaped weight tensor.
"""

import numpy as np

from nupes.quant import QuantConfig, generate_levels, reconstruction_error

###############################################################################
# The level sets. Uniform levels are evenly spaced; a power exponent below one
# squeezes them towards zero, where most weights live.

for fmt in ("uniform", "power", "log2", "fp4-e2m1"):
    lv = generate_levels(fmt, 4, 0.5)
    pos = lv[lv > 0]
    print(f"{fmt:9s} {len(lv):2d} levels  positive: " + " ".join(f"{v:.3f}" for v in pos))

###############################################################################
# Reconstruction error of Gaussian weights as the exponent moves away from 1.

w = np.random.default_rng(0).standard_normal(4096)
print()
for a in (1.0, 0.8, 0.6, 0.5, 0.4, 0.3):
    print(f"a={a:.1f}  ||w - Q(w)||_2 = {reconstruction_error(w, QuantConfig(4, a)):.3f}")
