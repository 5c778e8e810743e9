#!/usr/bin/env python3
"""Unlock bit-widths that were never trained.

The model trains at {1,2,4,8,32}; selecting 3 bits then fails because no
BatchNorm statistics exist for it. Calibration forwards a few batches at
the new precision to re-estimate the statistics (weights untouched), after
which every precision from 1 to 8 bits is available.
"""

from anyprec import (
    PrecisionUnavailableError, TrainConfig, bn_calibrate, evaluate, init_model,
    synth_dataset, train,
)

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

train_ds = synth_dataset("two_gaussians", 1024, seed=3)
test_ds = synth_dataset("two_gaussians", 512, seed=4, split="test")
model = init_model(ARCH, BITS, seed=0)
train(model, train_ds, TrainConfig(candidate_bits=BITS, epochs=12, batch_size=32,
                                   lr_decay_epochs=[8], seed=0), eval_dataset=test_ds)

try:
    model.select_bitwidth(3)
except PrecisionUnavailableError as e:
    print(f"before calibration: {e}")

for n in (3, 5, 6, 7):
    bn_calibrate(model, n, train_ds, num_batches=50)
print("calibrated bits 3, 5, 6, 7\n")

print("bit  accuracy")
for n in range(1, 9):
    acc = evaluate(model, test_ds.images, test_ds.labels, [n])[n][1]
    tag = "calibrated" if n in (3, 5, 6, 7) else "trained"
    print(f"  {n}   {acc*100:5.1f}%   ({tag})")
