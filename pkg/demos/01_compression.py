"""Squeezing a perturbation out of an image.

A budget-8 (L-inf) random sign pattern is added to one CIFAR-10 image, then
each compression op is applied to both the clean and the perturbed copy.
"pattern kept" is the cosine between what the op lets through (the difference
of the two outputs) and the injected pattern: 1 means the pattern survives
intact, 0 means whatever difference remains no longer looks like it.
Quantizing ops (JPEG, BDR) can leave a large difference between the copies,
but it is rounding noise rather than the pattern a model could latch onto.
"image change" is how far the op moves the clean image, the price of the
squeeze.

    python demos/01_compression.py [out_dir]
"""
import os
import sys

import numpy as np

from iss.analysis import export_png
from iss.imageops import parse_op

from _data import desk_data

out_dir = sys.argv[1] if len(sys.argv) > 1 else "demo_out"
os.makedirs(out_dir, exist_ok=True)

train, _ = desk_data(train_count=10, test_count=10)
clean = train.images[:1]
rng = np.random.default_rng(0)
noise = rng.choice([-8, 8], size=clean.shape)
perturbed = np.clip(clean.astype(int) + noise, 0, 255).astype(np.uint8)

print(f"{'op':<14}{'pattern kept':>14}{'image change':>14}")
for text in ("identity", "gray", "jpeg:10", "bdr:2", "median", "gray+jpeg:10"):
    op = parse_op(text)
    a, b = op(clean).astype(float), op(perturbed).astype(float)
    diff = (b - a).ravel()
    kept = diff @ noise.ravel() / (np.linalg.norm(diff) * np.linalg.norm(noise) + 1e-12)
    distortion = np.linalg.norm(a - clean) / 255
    print(f"{text:<14}{kept:>14.3f}{distortion:>14.3f}")
    with open(os.path.join(out_dir, f"op_{text.replace(':', '').replace('+', '_')}.png"), "wb") as f:
        f.write(export_png(op(perturbed)[0]))
