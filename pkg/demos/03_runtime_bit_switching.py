#!/usr/bin/env python3
"""Deploy once, pick the precision at load time.

Packs a trained model into the binary deployment format (8-bit codes per
quantized layer, one scale per layer, every BatchNorm copy), then loads it
at 8, 4, 2, and 1 bits. Lower precisions are derived purely by shifting
bits off the stored codes; no data and no retraining. Quantized layers
execute exactly in integers via AND+popcount over packed bit planes.
"""

import os
import tempfile

import numpy as np

from anyprec import (
    TrainConfig, evaluate, init_model, load_model, synth_dataset, save_model, train,
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

with tempfile.TemporaryDirectory() as d:
    path = os.path.join(d, "model.apdnn")
    save_model(model, path)
    print(f"packed model: {os.path.getsize(path)} bytes\n")

    print("runtime  accuracy   (training-path accuracy for comparison)")
    for bits in (8, 4, 2, 1):
        runtime = load_model(path, bits)
        logits = runtime.infer(test_ds.images)
        acc = (logits.argmax(axis=1) == test_ds.labels).mean()
        model.select_bitwidth(bits)
        train_acc = evaluate(model, test_ds.images, test_ds.labels, [bits])[bits][1]
        print(f"  {bits} bit   {acc*100:5.1f}%     ({train_acc*100:5.1f}% quantizing the master directly)")

    print("\nswitching 8 -> 4 -> 8 leaves the 8-bit outputs untouched:")
    m8 = load_model(path, 8)
    first = m8.infer(test_ds.images[:4])
    again = m8.switch_bits(4).switch_bits(8).infer(test_ds.images[:4])
    print("  identical:", np.array_equal(first, again))
