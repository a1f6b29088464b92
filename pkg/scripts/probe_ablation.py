"""Pre-freeze probe of the ablation-direction experiment: C vs A and F vs E
mean SSIM per seed, with the exact protocol the acceptance test uses."""

import sys
import tempfile
import time

from crossview.data import SynthSpec, generate_synthetic, load_all
from crossview.trainer import evaluate_pixel_metrics, quick_train

SEEDS = (101, 202, 303)
STEPS = 240


def main():
    with tempfile.TemporaryDirectory() as d:
        manifest, _ = generate_synthetic(
            SynthSpec(seed=7, n_samples=8, image_size=64, n_classes=4), d)
        samples = load_all(manifest)

    t0 = time.time()
    for seed in SEEDS:
        vals = {}
        for bid in "ACEF":
            state = quick_train(bid, samples, steps=STEPS, seed=seed,
                                batch_size=4, image_size=64)
            vals[bid] = evaluate_pixel_metrics(state, samples)["ssim"]
        print(f"seed {seed}: " +
              " ".join(f"{b}={vals[b]:.4f}" for b in "ACEF") +
              f"  C>=A: {vals['C'] >= vals['A']}  F>=E: {vals['F'] >= vals['E']}")
    print(f"elapsed {time.time() - t0:.0f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
