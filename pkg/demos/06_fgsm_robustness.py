#!/usr/bin/env python3
"""Cross-precision robustness to single-step gradient attacks.

Adversarial examples crafted against one bit-width transfer imperfectly to
the others, so a model that can switch precision at runtime gets a free
defensive lever: the attack/defense accuracy matrix below usually shows
off-diagonal cells above their row's diagonal.
"""

from anyprec import TrainConfig, cross_bit_robustness, init_model, synth_dataset, train

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

EPS = 0.05
result = cross_bit_robustness(model, test_ds, EPS, BITS)

print(f"sign-gradient attack, step size {EPS}\n")
print("clean accuracy per bit: " +
      "  ".join(f"{b}b={result.clean[b]*100:.1f}%" for b in BITS))
print("\nattack \\ defend" + "".join(f"{b:>8}" for b in BITS))
for a in BITS:
    row = "".join(f"{result.matrix[a][d]*100:7.1f}%" for d in BITS)
    print(f"{a:>14} {row}")
print("\nread a row: accuracy under an attack crafted at that bit-width,")
print("evaluated while defending at each column's bit-width.")
