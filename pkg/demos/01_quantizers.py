#!/usr/bin/env python3
"""Walk through the weight and activation quantizers.

Shows the tanh normalization into [0,1], integer codes and the symmetric
signed remap at several bit-widths, the one-step error bound, and how
8-bit codes nest: dropping least-significant bits reproduces the coarser
grids to within one step.
"""

import numpy as np

from anyprec import QuantScheme, bitshift_truncate, normalize_weights, quantize_weights

rng = np.random.default_rng(0)
w = rng.normal(0, 0.12, size=12).astype(np.float32)

print("master weights:")
print(" ", np.round(w, 4))
print("normalized into [0,1] (layer-wise tanh):")
print(" ", np.round(normalize_weights(w), 4))
print()

for n in (1, 2, 4, 8):
    q = quantize_weights(w, QuantScheme(n))
    deq = q.dequantized()
    print(f"N={n}: codes {q.codes.tolist()}")
    print(f"      signed {q.signed.tolist()}  scale {q.scale:.6f}")
    print(f"      dequantized range [{deq.min():+.4f}, {deq.max():+.4f}]"
          f"  (mean |w| = {np.abs(w).mean():.4f})")
print()

print("bit-shift nesting: 8-bit codes >> k vs quantizing directly")
q8 = quantize_weights(w, QuantScheme(8))
for n in (4, 2, 1):
    shifted = bitshift_truncate(q8.codes, 8, n)
    direct = quantize_weights(w, QuantScheme(n)).codes
    diff = np.abs(shifted.astype(int) - direct.astype(int))
    print(f"  8 -> {n} bits: shifted {shifted.tolist()}")
    print(f"             direct {direct.tolist()}   max |diff| = {diff.max()}")
