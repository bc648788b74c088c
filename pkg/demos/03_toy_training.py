"""Train a small three-stage cascade on synthetic pedestrians and watch the losses move.

Stage 1 trains alone; stages 2 and 3 keep the lower stage frozen for the first half of their
epochs and then fine-tune it at a reduced learning rate. Perceptual loss uses the offline toy
feature network so no pretrained weights are needed.
"""
import argparse
from pathlib import Path

import numpy as np
import torch

from pmcgan import cascade as cs
from pmcgan import dataset as ds
from pmcgan import losses as L
from pmcgan.evaluation import sample_multimodal, save_png, tile_grid
from pmcgan.networks import GeneratorSpec
from pmcgan.synthetic import random_scene

parser = argparse.ArgumentParser()
parser.add_argument("--out", default="runs/toy/demo")
parser.add_argument("--epochs", type=int, default=6)
parser.add_argument("--per-stage", type=int, default=6, help="training crops per stage")
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

rng = np.random.default_rng(args.seed)
scenes = [random_scene(rng, 384, 640, n_pedestrians=4, h_range=(64, 300), scene_id=f"s{k}") for k in range(8)]
spec = cs.ModelSpec(GeneratorSpec(base_width=16, n_levels=2, msrb_per_level=1, carb_per_level=1, max_width=32,
                                  carb_reduction=4), d_width=16, d_layers=2, e_width=16, e_blocks=3)
schedule = cs.TrainSchedule(epochs_per_stage=args.epochs, checkpoint_every=2)
out = Path(args.out)

previous = None
for stage in (1, 2, 3):
    samples = ds.build_stage_dataset(scenes, ds.get_stage(stage), rng)[: args.per_stage]
    weights = L.LossWeights().for_stage(stage)
    perceptual = L.PerceptualLoss(L.ToyFeatures()) if weights.use_vgg else None
    state = cs.train_stage(stage, samples, out, schedule, weights, spec, seed=args.seed,
                           perceptual=perceptual, previous_checkpoint=previous)
    rows = cs.read_loss_log(out / f"stage{stage}" / "losses.jsonl")
    for epoch in sorted({r["epoch"] for r in rows}):
        ep = [r for r in rows if r["epoch"] == epoch]
        print(f"stage {stage} epoch {epoch:2d}: total {np.mean([r['total'] for r in ep]):7.3f} "
              f"l1 {np.mean([r['l1'] for r in ep]):.3f}  kl {np.mean([r['kl'] for r in ep]):.2e}")
    previous = cs.checkpoint_path(out, stage)

    # five codes for the first training crop
    batch = cs.make_batch(samples[:1], stage)
    with torch.no_grad():
        images = sample_multimodal(batch.cond, state.cascade.eval(), n=5, rng=args.seed)
    grid = tile_grid(torch.cat([batch.B, images]), ncols=6)
    save_png(grid, out / f"samples_stage{stage}.png")
    print(f"  real + 5 samples -> {out / f'samples_stage{stage}.png'}")

print(f"checkpoints under {out}/stage*/latest.pt")
