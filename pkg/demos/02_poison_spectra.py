"""What poisons look like in the frequency domain.

Generates every poison family on a small CIFAR-10 subset and reports the
share of spectral energy in the upper half of the DCT plane (white noise is
about 0.5) and the mean spread between colour channels.  Class-wise patch
poisons (LSP) are smooth and colourful, so grayscale is the natural squeeze;
sliding-window and PGD poisons are textured, so JPEG is.

A handful of perturbations per method are written as PNGs, rescaled so
zero is mid-gray.

    python demos/02_poison_spectra.py [out_dir]
"""
import os
import sys

import numpy as np

from iss import harness
from iss.analysis import export_png, spectrum_report

from _data import desk_data

out_dir = sys.argv[1] if len(sys.argv) > 1 else "demo_out"
os.makedirs(out_dir, exist_ok=True)

train, _ = desk_data(train_count=500, test_count=10)
print(f"{'method':<14}{'high-freq ratio':>16}{'channel spread':>16}")
for method in ("lsp", "lsp_adaptive", "ar", "ops", "em", "tap"):
    pert = harness.make_poison(method, train, seed=0)
    rep = spectrum_report(method, pert.deltas[:200])
    print(f"{method:<14}{rep.mean_high_freq_ratio:>16.3f}{rep.mean_channel_spread:>16.4f}")
    for i in np.flatnonzero(np.diff(train.labels, prepend=-1))[:4]:
        with open(os.path.join(out_dir, f"delta_{method}_{i:03d}.png"), "wb") as f:
            f.write(export_png(pert.deltas[i]))
