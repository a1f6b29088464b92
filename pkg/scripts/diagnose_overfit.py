"""Trajectory diagnosis of the overfit run: SSIM of coarse vs refined output
every 100 steps, plus pixel-loss trajectory, for baselines H and D."""

import sys
import tempfile
import numpy as np
import torch

from crossview.data import SynthSpec, generate_synthetic, load_all, collate
from crossview.metrics import ssim, to_metric_space
from crossview.trainer import (build_ablation, build_state, synthesize,
                               train_step)


def eval_both(state, samples):
    s_coarse, s_ref = [], []
    for start in range(0, len(samples), 8):
        batch = collate(samples[start:start + 8])
        stage1, sel = synthesize(state, batch)
        for i in range(batch.condition.shape[0]):
            real = to_metric_space(batch.target_image[i])
            s_coarse.append(ssim(real, to_metric_space(stage1.coarse_image[i])))
            if sel is not None:
                s_ref.append(ssim(real, to_metric_space(sel.refined_image[i])))
    return float(np.mean(s_coarse)), (float(np.mean(s_ref)) if s_ref else None)


def run(baseline, steps, samples, seed=7):
    tc, ac, ab = build_ablation(baseline)
    state = build_state(tc, ac, ab, image_size=64, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0, 0x0D0E)))
    order = list(range(len(samples)))
    print(f"--- baseline {baseline}")
    for step in range(1, steps + 1):
        idx = [order[(step * 4 + k) % len(samples)] for k in range(4)]
        batch = collate([samples[i] for i in idx])
        state, bd = train_step(state, batch)
        if step % 100 == 0 or step == 1:
            c, r = eval_both(state, samples)
            row = bd.as_floats()
            print(f"step {step:4d} ssim_coarse={c:.4f} "
                  f"ssim_refined={r if r is None else round(r, 4)} "
                  f"p1={row['pixel_1']:.4f} "
                  f"p3={row['pixel_3'] if row['pixel_3'] != '' else '-'}")
    return state


def main():
    with tempfile.TemporaryDirectory() as d:
        manifest, _ = generate_synthetic(
            SynthSpec(seed=7, n_samples=8, image_size=64, n_classes=4), d)
        samples = load_all(manifest)
    run("H", 500, samples)
    run("D", 500, samples)
    return 0


if __name__ == "__main__":
    sys.exit(main())
