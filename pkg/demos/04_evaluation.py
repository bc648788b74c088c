"""Score a trained cascade: FID over five codes per input, latent interpolation and sample diversity.

Uses the checkpoints from 03_toy_training.py. FID here runs on the offline random-conv extractor;
pass --inception with PMCGAN_INCEPTION_WEIGHTS set to use Inception-v3 pool features instead.
"""
import argparse
from pathlib import Path

import numpy as np
import torch

from pmcgan import cascade as cs
from pmcgan import dataset as ds
from pmcgan import evaluation as ev
from pmcgan.synthetic import random_scene

parser = argparse.ArgumentParser()
parser.add_argument("--run", default="runs/toy/demo")
parser.add_argument("--stage", type=int, default=1, choices=(1, 2, 3))
parser.add_argument("--inception", action="store_true")
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

run = Path(args.run)
cascade = cs.load_cascade(cs.checkpoint_path(run, args.stage))
rng = np.random.default_rng(args.seed + 100)  # held-out scenes, not the training ones
scenes = [random_scene(rng, 384, 640, n_pedestrians=4, h_range=(64, 300), scene_id=f"v{k}") for k in range(4)]
samples = ds.build_stage_dataset(scenes, ds.get_stage(args.stage), rng)[:8]
batch = cs.make_batch(samples, args.stage)
print(f"{len(samples)} held-out stage-{args.stage} inputs")

extractor = ev.InceptionFeatures() if args.inception else ev.ToyExtractor(dim=32, seed=0)
with torch.no_grad():
    result = ev.compute_fid(batch.B, batch.cond, cascade, extractor, rng=args.seed)
print(f"FID {result.fid:.3f} from {result.n_real} real vs {result.n_fake} generated (5 codes per input)")

# sanity anchors: a set against itself, and the real crops against pure noise
feats = ev.extract_features(batch.B, extractor)
self_stats = ev.feature_stats(feats)
noise = ev.feature_stats(ev.extract_features(torch.rand_like(batch.B) * 2 - 1, extractor))
print(f"self-FID {ev.frechet_distance(self_stats, self_stats):.2e} | real vs noise {ev.frechet_distance(self_stats, noise):.3f}")

cond = batch.cond[:1]
g = torch.Generator().manual_seed(args.seed)
z0, z1 = torch.randn(1, 16, generator=g), torch.randn(1, 16, generator=g)
with torch.no_grad():
    ts, path = ev.interpolate_latents(cond, z0, z1, 10, cascade)
    many = ev.sample_multimodal(cond, cascade, 5, rng=args.seed)
steps = [(path[k + 1] - path[k]).abs().mean().item() for k in range(len(ts) - 1)]
print("interpolation step sizes:", " ".join(f"{s:.4f}" for s in steps))
div = ev.pairwise_diversity(many, ev.mask_of(cond))
print(f"mean pairwise diversity inside the mask: {np.mean(list(div.values())):.4f}")
ev.save_png(ev.tile_grid(path, ncols=10), run / f"interpolation_stage{args.stage}.png")
ev.save_png(ev.tile_grid(many, ncols=5), run / f"multimodal_stage{args.stage}.png")
print(f"grids -> {run}")
