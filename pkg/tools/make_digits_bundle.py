#!/usr/bin/env python3
"""Regenerate the bundled desk-scale digits corpus in MNIST IDX layout.

Source: the classic 8x8 handwritten digits set shipped with scikit-learn
(UCI optical recognition of handwritten digits). Deterministic stratified
split, then the training half is augmented with all 1-pixel shifts
(identity + 4 cardinal + 4 diagonal = 9x) and shuffled with a fixed seed.
Pixel intensities (0..16) are rescaled to 0..255 bytes.

scikit-learn is only needed to run this script; the package itself reads
the committed IDX files.
"""

import sys
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from anyprec.data import write_idx  # noqa: E402

OUT = Path(__file__).resolve().parents[1] / "src" / "anyprec" / "datasets"
TEST_SIZE = 600
SPLIT_SEED = 0
SHUFFLE_SEED = 1


def shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape
    ys, xs = slice(max(0, dy), h + min(0, dy)), slice(max(0, dx), w + min(0, dx))
    yd, xd = slice(max(0, -dy), h + min(0, -dy)), slice(max(0, -dx), w + min(0, -dx))
    out[yd, xd] = img[ys, xs]
    return out


def main() -> None:
    d = load_digits()
    images = np.round(d.images / 16.0 * 255.0).astype(np.uint8)
    tr_x, te_x, tr_y, te_y = train_test_split(
        images, d.target.astype(np.uint8), test_size=TEST_SIZE,
        random_state=SPLIT_SEED, stratify=d.target,
    )

    shifts = [(0, 0), (0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1)]
    aug_x = np.concatenate([np.stack([shift(im, dy, dx) for im in tr_x]) for dy, dx in shifts])
    aug_y = np.concatenate([tr_y] * len(shifts))
    order = np.random.default_rng(SHUFFLE_SEED).permutation(len(aug_x))
    aug_x, aug_y = aug_x[order], aug_y[order]

    OUT.mkdir(parents=True, exist_ok=True)
    write_idx(aug_x, aug_y, OUT / "digits-train-images-idx3-ubyte", OUT / "digits-train-labels-idx1-ubyte")
    write_idx(te_x, te_y, OUT / "digits-test-images-idx3-ubyte", OUT / "digits-test-labels-idx1-ubyte")
    print(f"train: {aug_x.shape}, test: {te_x.shape} -> {OUT}")


if __name__ == "__main__":
    main()
