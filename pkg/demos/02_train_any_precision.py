#!/usr/bin/env python3
"""Train one model that runs at five precisions.

A small MLP learns a synthetic two-Gaussian task jointly at bit-widths
{1,2,4,8,32}: every step runs one forward/backward per bit-width (highest
first, lower bits distilling from the next higher one), accumulates the
gradients on the shared master weights, and applies a single update. Each
bit-width keeps its own BatchNorm statistics.
"""

from anyprec import TrainConfig, evaluate, init_model, synth_dataset, train

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
config = TrainConfig(candidate_bits=BITS, epochs=12, batch_size=32,
                     lr_decay_epochs=[8], kd_mode="recursive", seed=0)
result = train(model, train_ds, config, eval_dataset=test_ds)

print("epoch  " + "  ".join(f"{b:>5}b" for b in BITS))
by_epoch = {}
for row in result.history:
    if row.split == "test":
        by_epoch.setdefault(row.epoch, {})[row.bit] = row.accuracy
for epoch in sorted(by_epoch):
    accs = by_epoch[epoch]
    print(f"{epoch:>5}  " + "  ".join(f"{accs[b]*100:5.1f}%" for b in BITS))

print("\nfinal test accuracy per runtime bit-width:")
for bit, (loss, acc) in evaluate(model, test_ds.images, test_ds.labels, BITS).items():
    print(f"  {bit:>2} bits: {acc*100:5.1f}%  (loss {loss:.3f})")
