"""Write the scikit-learn 8x8 digits set as IDX files under data/digits/.

The first 1297 images form the training split and the last 500 the test
split. Pixel intensities (0..16) are scaled by 16 and clamped to 255.
"""
import struct
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

N_TRAIN = 1297


def write_images(path, images):
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    digits = load_digits()
    images = np.clip(digits.images * 16, 0, 255)
    labels = digits.target
    out = Path(__file__).resolve().parent.parent / "data" / "digits"
    out.mkdir(parents=True, exist_ok=True)
    write_images(out / "train-images.idx", images[:N_TRAIN])
    write_labels(out / "train-labels.idx", labels[:N_TRAIN])
    write_images(out / "test-images.idx", images[N_TRAIN:])
    write_labels(out / "test-labels.idx", labels[N_TRAIN:])
    print(f"wrote {N_TRAIN} train / {len(labels) - N_TRAIN} test images to {out}")


if __name__ == "__main__":
    main()
