"""Command-line entry point: ``pmcgan {prepare|train|generate|fid|interpolate|augment}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import augmentation as aug
from . import cascade as cs
from . import dataset as ds
from . import evaluation as ev
from . import losses as L
from .config import RunConfig, load_config
from .errors import (ConfigError, EmptyDataset, MissingAsset, MissingCheckpoint, NonConvergent, NonFiniteLoss,
                     PMCGANError)

log = logging.getLogger("pmcgan")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4


# --------------------------------------------------------------------------- helpers


def stage_data_dir(cfg: RunConfig, split: str, stage: int) -> Path:
    return cfg.work_dir / "data" / split / f"stage{stage}"


def checkpoint_root(cfg: RunConfig) -> Path:
    return cfg.work_dir / "checkpoints"


def resolve_checkpoint(cfg: RunConfig, stage: int, explicit: str | None = None) -> Path:
    path = Path(explicit) if explicit else cs.checkpoint_path(checkpoint_root(cfg), stage)
    if not path.is_file():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    return path


def deepest_checkpoint(cfg: RunConfig, explicit: str | None = None) -> Path:
    if explicit:
        return resolve_checkpoint(cfg, 0, explicit)
    for stage in (3, 2, 1):
        path = cs.checkpoint_path(checkpoint_root(cfg), stage)
        if path.is_file():
            return path
    raise MissingCheckpoint(f"no stage checkpoint under {checkpoint_root(cfg)}")


def load_samples(cfg: RunConfig, split: str, stage: int) -> list[ds.PedestrianSample]:
    path = stage_data_dir(cfg, split, stage)
    if not (path / "manifest.jsonl").is_file():
        raise MissingAsset(f"no prepared stage-{stage} data at {path}; run `pmcgan prepare` first")
    samples = ds.load_stage_dataset(path)
    if not samples:
        raise EmptyDataset(f"prepared stage-{stage} data at {path} is empty")
    return samples


def perceptual_for(cfg: RunConfig, stage: int) -> L.PerceptualLoss | None:
    weights = cfg.loss_weights().for_stage(stage)
    if not weights.use_vgg:
        return None
    if cfg.get("loss", "toy_vgg"):
        return L.PerceptualLoss(L.ToyFeatures())
    return L.PerceptualLoss(L.VGG19Features(cfg.get("paths", "vgg_weights") or None))


def extractor_for(cfg: RunConfig, toy: bool):
    if toy or cfg.get("eval", "toy_extractor"):
        return ev.ToyExtractor(cfg.get("eval", "toy_dim"), seed=0)
    return ev.InceptionFeatures(cfg.get("paths", "inception_weights") or None)


def pick_sample(samples, sample_id: str | None) -> ds.PedestrianSample:
    if sample_id is None:
        return samples[0]
    for s in samples:
        if s.sample_id == sample_id:
            return s
    raise MissingAsset(f"sample {sample_id!r} is not in the prepared dataset")


def write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------- subcommands


def cmd_prepare(cfg: RunConfig, args) -> int:
    root = cfg.path("data_root")
    splits = [args.split] if args.split else [cfg.get("paths", "split")]
    counts = {}
    for split in splits:
        scenes = [ds.load_scene(root, split, name) for name in ds.list_scenes(root, split)]
        for stage in (1, 2, 3):
            rng = np.random.default_rng([cfg.seed, stage])
            samples = ds.build_stage_dataset(scenes, ds.get_stage(stage), rng,
                                             pedestrian_class=cfg.get("data", "pedestrian_class"),
                                             expansions=cfg.get("data", "expansions"))
            out = stage_data_dir(cfg, split, stage)
            ds.save_stage_dataset(samples, out)
            cfg.write_snapshot(out)
            counts[f"{split}/stage{stage}"] = len(samples)
            log.info("%s stage %d: %d samples -> %s", split, stage, len(samples), out)
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    stage = args.stage
    samples = load_samples(cfg, cfg.get("paths", "split"), stage)
    out = checkpoint_root(cfg)
    cfg.write_snapshot(out / f"stage{stage}")

    def report(epoch, rep):
        log.debug("epoch %d l1=%.4f total=%.4f", epoch, rep.l1, rep.total)

    state = cs.train_stage(stage, samples, out, cfg.schedule(), cfg.loss_weights(), cfg.model_spec(), cfg.seed,
                           perceptual_for(cfg, stage), previous_checkpoint=args.previous, on_step=report)
    print(json.dumps({"stage": stage, "epoch": state.epoch, "steps": state.step,
                      "checkpoint": str(cs.checkpoint_path(out, stage))}))
    return EXIT_OK


def _cascade_and_sample(cfg: RunConfig, args):
    stage = args.stage
    cascade = cs.load_cascade(resolve_checkpoint(cfg, stage, args.checkpoint))
    if cascade.depth < stage:
        raise MissingCheckpoint(f"checkpoint holds {cascade.depth} stage(s), stage {stage} requested")
    split = args.split or cfg.get("paths", "split")
    sample = pick_sample(load_samples(cfg, split, stage), args.input)
    cond, B = cs.sample_tensors(sample)
    return cascade, sample, cond, B


def _runner(cascade, stage):
    return lambda cond, z: cascade(cond, z, stage)


def cmd_generate(cfg: RunConfig, args) -> int:
    cascade, sample, cond, _ = _cascade_and_sample(cfg, args)
    n = args.n or cfg.get("eval", "n_samples")
    images = ev.sample_multimodal(cond, _runner(cascade, args.stage), n, rng=cfg.seed,
                                  latent_dim=cascade.G[0].spec.latent_dim)
    out = cfg.work_dir / "generate" / f"stage{args.stage}" / (sample.sample_id or "sample")
    for k in range(n):
        ev.save_png(ev.to_uint8(images[k]), out / f"sample_{k:02d}.png")
    ev.save_png(ev.tile_grid(images), out / "grid.png")
    diversity = ev.pairwise_diversity(images, ev.mask_of(cond)) if n > 1 else {}
    write_json(out / "report.json", {"sample_id": sample.sample_id, "n": n, "seed": cfg.seed,
                                     "diversity": {f"{i}-{j}": v for (i, j), v in diversity.items()}})
    cfg.write_snapshot(out)
    print(str(out))
    return EXIT_OK


def cmd_interpolate(cfg: RunConfig, args) -> int:
    cascade, sample, cond, _ = _cascade_and_sample(cfg, args)
    steps = args.steps or cfg.get("eval", "steps")
    g = torch.Generator().manual_seed(cfg.seed)
    dim = cascade.G[0].spec.latent_dim
    z_first, z_last = torch.randn(1, dim, generator=g), torch.randn(1, dim, generator=g)
    if args.same_endpoints:
        z_last = z_first.clone()
    ts, images = ev.interpolate_latents(cond, z_first, z_last, steps, _runner(cascade, args.stage))
    out = cfg.work_dir / "interpolate" / f"stage{args.stage}" / (sample.sample_id or "sample")
    ev.save_png(ev.tile_grid(images), out / "strip.png")
    write_json(out / "report.json", {"sample_id": sample.sample_id, "steps": steps, "t": ts, "seed": cfg.seed})
    cfg.write_snapshot(out)
    print(str(out))
    return EXIT_OK


def cmd_fid(cfg: RunConfig, args) -> int:
    stage = args.stage
    cascade = cs.load_cascade(resolve_checkpoint(cfg, stage, args.checkpoint))
    split = args.split or cfg.get("paths", "eval_split")
    if not (stage_data_dir(cfg, split, stage) / "manifest.jsonl").is_file():
        split = cfg.get("paths", "split")
    samples = load_samples(cfg, split, stage)
    if args.n:
        samples = samples[:args.n]
    pairs = [cs.sample_tensors(s) for s in samples]
    inputs = torch.cat([c for c, _ in pairs])
    real = torch.cat([b for _, b in pairs])
    extractor = extractor_for(cfg, args.toy_extractor)
    res = ev.compute_fid(real, inputs, _runner(cascade, stage), extractor, cfg.get("eval", "n_codes"), rng=cfg.seed,
                         latent_dim=cascade.G[0].spec.latent_dim)
    payload = {**res.as_dict(), "stage": stage, "split": split, "extractor": type(extractor).__name__,
               "n_codes": cfg.get("eval", "n_codes"), "seed": cfg.seed}
    out = cfg.work_dir / "fid" / f"stage{stage}"
    write_json(out / "report.json", payload)
    cfg.write_snapshot(out)
    print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


def cmd_augment(cfg: RunConfig, args) -> int:
    root = cfg.path("data_root")
    split = args.split or cfg.get("paths", "split")
    scenes = [ds.load_scene(root, split, name) for name in ds.list_scenes(root, split)]
    n = cfg.get("augment", "n_images") if args.n is None else args.n
    out = cfg.work_dir / "augment"
    cascade = cs.load_cascade(deepest_checkpoint(cfg, args.checkpoint)) if n else None
    size_model = aug.fit_size_model(scenes, cfg.get("augment", "n_bins"), cfg.get("data", "pedestrian_class")) if n else None
    manifest = aug.emit_augmented_set(scenes, cascade, out, n, cfg.seed, size_model=size_model,
                                      thresholds=cfg.thresholds(),
                                      latent_dim=cascade.G[0].spec.latent_dim if cascade else 16,
                                      pedestrian_class=cfg.get("data", "pedestrian_class"))
    cfg.write_snapshot(out)
    print(json.dumps({"images": len(manifest), "out": str(out)}))
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "generate": cmd_generate,
    "fid": cmd_fid,
    "interpolate": cmd_interpolate,
    "augment": cmd_augment,
}


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [run] [paths] [data] [model] [train] [loss] [eval] [augment]")
    common.add_argument("--seed", type=int, help="overrides [run] seed")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pmcgan", description="Cascaded mask-conditioned pedestrian synthesis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="crop per-stage pedestrian datasets from raw scenes")
    p.add_argument("--split", help="scene split to prepare (default: [paths] split)")

    p = sub.add_parser("train", parents=[common], help="train one cascade stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--previous", help="explicit checkpoint of the previous stage")

    for name, help_text in (("generate", "sample several pedestrians for one input"),
                            ("interpolate", "interpolate between two latent codes"),
                            ("fid", "FID of a stage against its real crops")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
        p.add_argument("--checkpoint", help="checkpoint file (default: <work_dir>/checkpoints/stage<i>/latest.pt)")
        p.add_argument("--split", help="prepared split to read inputs from")
        if name != "fid":
            p.add_argument("--input", help="sample id from the prepared manifest (default: first sample)")
        if name == "generate":
            p.add_argument("--n", type=int, help="number of latent codes (default: [eval] n_samples)")
        if name == "interpolate":
            p.add_argument("--steps", type=int, help="images along the path (default: [eval] steps)")
            p.add_argument("--same-endpoints", action="store_true", help="use one code for both ends")
        if name == "fid":
            p.add_argument("--n", type=int, help="use only the first N inputs")
            p.add_argument("--toy-extractor", action="store_true", help="offline random-conv features instead of Inception")

    p = sub.add_parser("augment", parents=[common], help="paste synthesized pedestrians into scenes")
    p.add_argument("--n", type=int, help="images to emit (default: [augment] n_images)")
    p.add_argument("--split", help="scene split to augment")
    p.add_argument("--checkpoint", help="cascade checkpoint (default: deepest trained stage)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.set, args.seed)
        if getattr(args, "n", None) is not None and args.n < 0:
            raise ConfigError("--n must be non-negative")
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (MissingAsset, MissingCheckpoint, EmptyDataset, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except (NonFiniteLoss, NonConvergent) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except PMCGANError as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
