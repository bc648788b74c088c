"""Three-stage coarse-to-fine training.

Stage ``i`` owns ``G_i``, ``E_i`` and a fresh pair of discriminators. From
stage 2 on, ``G_i`` sees the previous stage's output upsampled and appended
to its condition stack. Lower stages are frozen for the first half of a
stage's epochs and fine-tuned jointly, at ``w`` times smaller learning
rates per stage of distance, for the second half.
"""
from __future__ import annotations

import hashlib
import json
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import losses as L
from .dataset import IMAGE_CHANNELS, MASK_CHANNEL, MASK_FILL, PedestrianSample, build_condition_stack, shuffled
from .errors import InvalidStage, MissingAsset, MissingCheckpoint, NonFiniteLoss, ShapeMismatch
from .networks import GeneratorSpec, LatentEncoder, PatchDiscriminator, UMARGenerator, reparameterize

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pmcgan-checkpoint/1"


@dataclass
class TrainSchedule:
    total_stages: int = 3
    epochs_per_stage: int = 200
    batch_size: int = 1
    base_lr: float = 2e-4
    w: float = 0.01
    beta1: float = 0.5
    beta2: float = 0.999
    checkpoint_every: int = 10

    @property
    def half(self) -> int:
        return self.epochs_per_stage // 2


@dataclass
class ModelSpec:
    """Generator template plus discriminator/encoder sizes shared by all stages."""

    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    d_width: int = 64
    d_layers: int = 3
    e_width: int = 64
    e_blocks: int = 4

    def for_stage(self, stage: int) -> GeneratorSpec:
        return replace(self.generator, stage=stage)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["generator"] = GeneratorSpec(**d["generator"])
        return cls(**d)


# --------------------------------------------------------------------------- schedule


def stage_learning_rate(i: int, h: int, lr: float = 2e-4, w: float = 0.01) -> float:
    if not 1 <= i <= h:
        raise InvalidStage(f"stage ordinal {i} outside 1..{h}")
    return w ** (h - i) * lr


def trainable_sets(stage: int, epoch: int, epochs_per_stage: int = 200) -> frozenset[str]:
    if stage not in (1, 2, 3):
        raise InvalidStage(f"stage must be 1, 2 or 3, got {stage!r}")
    if not 1 <= epoch <= epochs_per_stage:
        raise InvalidStage(f"epoch {epoch} outside 1..{epochs_per_stage}")
    s = stage
    if s == 1 or epoch <= epochs_per_stage // 2:
        return frozenset({f"G{s}", f"E{s}", f"D{s}"})
    return frozenset({f"G{s - 1}", f"G{s}", f"E{s - 1}", f"E{s}", f"D{s}"})


def lr_decay_factor(epoch: int, schedule: TrainSchedule) -> float:
    """Constant for the first half, then linear towards zero over the second half."""
    start = schedule.half
    return 1.0 - max(0, epoch - start) / float(schedule.epochs_per_stage - start + 1)


# --------------------------------------------------------------------------- cascade


def integrate_stages(prev: torch.Tensor | None, cond: torch.Tensor) -> torch.Tensor:
    """Append the 2x nearest-upsampled previous output to the current condition stack."""
    if prev is None:
        return cond
    if prev.shape[1] != 3 or tuple(prev.shape[-2:]) != (cond.shape[-2] // 2, cond.shape[-1] // 2):
        raise ShapeMismatch(f"previous output {tuple(prev.shape)} is not half of condition {tuple(cond.shape)}")
    return torch.cat([cond, F.interpolate(prev, scale_factor=2, mode="nearest")], 1)


def downsample_condition(cond: torch.Tensor, fill: float = MASK_FILL) -> torch.Tensor:
    """Halve a condition stack: area-average the image, nearest for categorical planes, re-mask."""
    image = F.avg_pool2d(cond[:, IMAGE_CHANNELS], 2)
    rest = cond[:, 3:, ::2, ::2]
    mask = rest[:, MASK_CHANNEL - 3:MASK_CHANNEL - 2]
    image = image * (1 - mask) + fill * mask
    return torch.cat([image, rest], 1)


def condition_pyramid(cond: torch.Tensor, levels: int) -> list[torch.Tensor]:
    """Condition stacks for stages ``1..levels``, coarsest first."""
    out = [cond]
    for _ in range(levels - 1):
        out.insert(0, downsample_condition(out[0]))
    return out


def image_pyramid(B: torch.Tensor, levels: int) -> list[torch.Tensor]:
    out = [B]
    for _ in range(levels - 1):
        out.insert(0, F.avg_pool2d(out[0], 2))
    return out


class Cascade(nn.Module):
    """Generators and encoders of stages ``1..k``."""

    def __init__(self, generators: Sequence[UMARGenerator], encoders: Sequence[LatentEncoder]):
        super().__init__()
        self.G = nn.ModuleList(generators)
        self.E = nn.ModuleList(encoders)

    @property
    def depth(self) -> int:
        return len(self.G)

    def forward(self, cond: torch.Tensor, z: torch.Tensor, stage: int | None = None) -> torch.Tensor:
        """Run stages ``1..stage`` from the top-resolution condition stack; one code drives all stages."""
        stage = stage or self.depth
        if not 1 <= stage <= self.depth:
            raise MissingCheckpoint(f"cascade holds {self.depth} stage(s), stage {stage} requested")
        prev = None
        for j, c in enumerate(condition_pyramid(cond, stage)):
            prev = self.G[j](integrate_stages(prev, c), z)
        return prev

    def module(self, name: str) -> nn.Module:
        kind, j = name[0], int(name[1:])
        return (self.G if kind == "G" else self.E)[j - 1]


@contextmanager
def frozen(module: nn.Module):
    flags = [p.requires_grad for p in module.parameters()]
    module.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


# --------------------------------------------------------------------------- state


@dataclass
class StageState:
    stage: int
    cascade: Cascade
    d_img: PatchDiscriminator
    d_ped: PatchDiscriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    schedule: TrainSchedule
    model_spec: ModelSpec
    rng: torch.Generator
    seed: int = 0
    epoch: int = 0
    step: int = 0

    def module(self, name: str) -> nn.Module:
        if name == f"D{self.stage}":
            return nn.ModuleList([self.d_img, self.d_ped])
        return self.cascade.module(name)

    def module_names(self) -> list[str]:
        names = []
        for j in range(1, self.stage + 1):
            names += [f"G{j}", f"E{j}"]
        return names + [f"D{self.stage}"]

    def frozen_names(self, epoch: int) -> set[str]:
        return set(self.module_names()) - trainable_sets(self.stage, epoch, self.schedule.epochs_per_stage)

    def set_epoch_lr(self, epoch: int) -> None:
        factor = lr_decay_factor(epoch, self.schedule)
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = group["initial_lr"] * factor


def _build_optimizers(cascade: Cascade, d_img, d_ped, stage: int, schedule: TrainSchedule):
    betas = (schedule.beta1, schedule.beta2)
    groups = []
    for j in range(1, stage + 1):
        lr = stage_learning_rate(j, stage, schedule.base_lr, schedule.w)
        for kind in "GE":
            groups.append({"params": list(cascade.module(f"{kind}{j}").parameters()), "lr": lr, "initial_lr": lr, "name": f"{kind}{j}"})
    opt_g = torch.optim.Adam(groups, betas=betas)
    lr_d = stage_learning_rate(stage, stage, schedule.base_lr, schedule.w)
    opt_d = torch.optim.Adam(
        [{"params": list(d_img.parameters()) + list(d_ped.parameters()), "lr": lr_d, "initial_lr": lr_d, "name": f"D{stage}"}],
        betas=betas,
    )
    return opt_g, opt_d


def _new_stage_modules(spec: ModelSpec, stage: int):
    gspec = spec.for_stage(stage)
    G = UMARGenerator(gspec)
    E = LatentEncoder(3, spec.e_width, spec.e_blocks, gspec.latent_dim, gspec.leaky_slope)
    d_in = gspec.in_channels + 3
    D_img = PatchDiscriminator(d_in, spec.d_width, spec.d_layers, gspec.leaky_slope)
    D_ped = PatchDiscriminator(d_in, spec.d_width, spec.d_layers, gspec.leaky_slope)
    return G, E, D_img, D_ped


def new_stage_state(
    stage: int,
    model_spec: ModelSpec | None = None,
    schedule: TrainSchedule | None = None,
    seed: int = 0,
    previous: Cascade | None = None,
) -> StageState:
    """Fresh state for ``stage``; stages >= 2 extend the cascade of the previous stage."""
    model_spec = model_spec or ModelSpec()
    schedule = schedule or TrainSchedule()
    if stage not in (1, 2, 3):
        raise InvalidStage(f"stage must be 1, 2 or 3, got {stage!r}")
    if stage > 1 and (previous is None or previous.depth != stage - 1):
        raise MissingCheckpoint(f"stage {stage} needs a trained stage-{stage - 1} cascade")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 1000 * stage)
        G, E, D_img, D_ped = _new_stage_modules(model_spec, stage)
    gens = list(previous.G) if previous is not None else []
    encs = list(previous.E) if previous is not None else []
    cascade = Cascade(gens + [G], encs + [E])
    opt_g, opt_d = _build_optimizers(cascade, D_img, D_ped, stage, schedule)
    return StageState(
        stage=stage,
        cascade=cascade,
        d_img=D_img,
        d_ped=D_ped,
        opt_g=opt_g,
        opt_d=opt_d,
        schedule=schedule,
        model_spec=model_spec,
        rng=torch.Generator().manual_seed(seed),
        seed=seed,
    )


# --------------------------------------------------------------------------- batches


@dataclass
class Batch:
    conds: list[torch.Tensor]
    images: list[torch.Tensor]

    @property
    def cond(self) -> torch.Tensor:
        return self.conds[-1]

    @property
    def B(self) -> torch.Tensor:
        return self.images[-1]

    @property
    def M(self) -> torch.Tensor:
        return self.cond[:, MASK_CHANNEL:MASK_CHANNEL + 1]

    def mask(self, level: int) -> torch.Tensor:
        return self.conds[level][:, MASK_CHANNEL:MASK_CHANNEL + 1]


def sample_tensors(sample: PedestrianSample) -> tuple[torch.Tensor, torch.Tensor]:
    cond = torch.from_numpy(build_condition_stack(sample)).permute(2, 0, 1)[None].contiguous()
    B = torch.from_numpy(np.ascontiguousarray(sample.B, dtype=np.float32)).permute(2, 0, 1)[None].contiguous()
    return cond, B


def make_batch(samples: Sequence[PedestrianSample], stage: int) -> Batch:
    pairs = [sample_tensors(s) for s in samples]
    cond = torch.cat([c for c, _ in pairs])
    B = torch.cat([b for _, b in pairs])
    return Batch(condition_pyramid(cond, stage), image_pyramid(B, stage))


# --------------------------------------------------------------------------- training


def _check_finite(name: str, terms: dict) -> None:
    bad = {k: float(v.detach().sum()) for k, v in terms.items() if torch.is_tensor(v) and not torch.isfinite(v).all()}
    if bad:
        raise NonFiniteLoss(f"non-finite {name} loss terms: {sorted(bad)}", bad)


def _cascade_forward(state: StageState, batch: Batch, trainable: frozenset, z: torch.Tensor | None):
    """One pass through stages ``1..stage``. With ``z=None`` each stage draws its code from its encoder."""
    first = min(int(n[1:]) for n in trainable if n[0] in "GE")
    prev, kl = None, 0.0
    for j in range(1, state.stage + 1):
        G, E = state.cascade.G[j - 1], state.cascade.E[j - 1]
        with torch.set_grad_enabled(j >= first):
            if z is None:
                mu, logvar = E(batch.images[j - 1] * batch.mask(j - 1))
                zj = reparameterize(mu, logvar, generator=state.rng)
                if f"E{j}" in trainable:
                    kl = kl + L.kl_divergence(mu, logvar)
            else:
                zj = z
            prev = G(integrate_stages(prev, batch.conds[j - 1]), zj)
    return prev, kl


def train_step(
    batch: Batch,
    state: StageState,
    weights: L.LossWeights,
    epoch: int | None = None,
    perceptual: L.PerceptualLoss | None = None,
) -> L.LossReport:
    """One discriminator update followed by one generator/encoder update."""
    epoch = epoch or max(state.epoch, 0) + 1
    trainable = trainable_sets(state.stage, epoch, state.schedule.epochs_per_stage)
    if weights.use_vgg and perceptual is None:
        raise MissingAsset("perceptual loss enabled but no feature extractor supplied")
    for name in state.module_names():
        if name[0] != "D":
            state.module(name).requires_grad_(name in trainable)
    D_img, D_ped = state.d_img, state.d_ped
    cond, B, M = batch.cond, batch.B, batch.M

    fake_vae, kl = _cascade_forward(state, batch, trainable, None)
    z = torch.randn(B.shape[0], state.model_spec.generator.latent_dim, generator=state.rng)
    fake_clr, _ = _cascade_forward(state, batch, trainable, z)

    # discriminators
    D_img.requires_grad_(True)
    D_ped.requires_grad_(True)
    d_terms = {
        "d_img": L.d_adversarial(D_img, cond, B, fake_vae) + L.d_adversarial(D_img, cond, B, fake_clr),
        "d_ped": L.d_adversarial(D_ped, cond, B, fake_vae, M) + L.d_adversarial(D_ped, cond, B, fake_clr, M),
    }
    _check_finite("discriminator", d_terms)
    state.opt_d.zero_grad(set_to_none=True)
    (d_terms["d_img"] + d_terms["d_ped"]).backward()
    state.opt_d.step()

    # generator and encoder
    D_img.requires_grad_(False)
    D_ped.requires_grad_(False)
    E_top = state.cascade.E[state.stage - 1]
    with frozen(E_top):
        mu_rec, _ = E_top(fake_clr * M)
    terms = {
        "adv_img_vae": L.g_adversarial(D_img, cond, fake_vae),
        "adv_ped_vae": L.g_adversarial(D_ped, cond, fake_vae, M),
        "l1": L.recon_l1(fake_vae, B),
        "kl": kl if torch.is_tensor(kl) else fake_vae.new_zeros(()),
        "adv_img_clr": L.g_adversarial(D_img, cond, fake_clr),
        "adv_ped_clr": L.g_adversarial(D_ped, cond, fake_clr, M),
        "latent_l1": L.latent_recovery_l1(mu_rec, z),
    }
    if weights.use_vgg:
        terms["vgg"] = perceptual(fake_vae, B)
    total = L.weighted_total(terms, weights)
    _check_finite("generator", {**terms, "total": total})
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()
    D_img.requires_grad_(True)
    D_ped.requires_grad_(True)

    state.step += 1
    return L.total_objective(terms, weights, **d_terms)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(state: StageState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "stage": state.stage,
        "epoch": state.epoch,
        "step": state.step,
        "seed": state.seed,
        "model_spec": state.model_spec.to_dict(),
        "generator_specs": [g.spec.to_dict() for g in state.cascade.G],
        "schedule": asdict(state.schedule),
        "generators": [g.state_dict() for g in state.cascade.G],
        "encoders": [e.state_dict() for e in state.cascade.E],
        "d_img": state.d_img.state_dict(),
        "d_ped": state.d_ped.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "rng": state.rng.get_state(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def _read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise MissingCheckpoint(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    return payload


def load_checkpoint(path: str | Path) -> StageState:
    payload = _read_checkpoint(path)
    stage = payload["stage"]
    model_spec = ModelSpec.from_dict(payload["model_spec"])
    schedule = TrainSchedule(**payload["schedule"])
    gens, encs = [], []
    for j, (gs, gspec) in enumerate(zip(payload["generators"], payload["generator_specs"]), 1):
        G = UMARGenerator(GeneratorSpec(**gspec))
        G.load_state_dict(gs)
        E = LatentEncoder(3, model_spec.e_width, model_spec.e_blocks, G.spec.latent_dim, G.spec.leaky_slope)
        E.load_state_dict(payload["encoders"][j - 1])
        gens.append(G)
        encs.append(E)
    cascade = Cascade(gens, encs)
    _, _, D_img, D_ped = _new_stage_modules(model_spec, stage)
    D_img.load_state_dict(payload["d_img"])
    D_ped.load_state_dict(payload["d_ped"])
    opt_g, opt_d = _build_optimizers(cascade, D_img, D_ped, stage, schedule)
    opt_g.load_state_dict(payload["opt_g"])
    opt_d.load_state_dict(payload["opt_d"])
    rng = torch.Generator()
    rng.set_state(payload["rng"])
    return StageState(stage, cascade, D_img, D_ped, opt_g, opt_d, schedule, model_spec, rng,
                      payload["seed"], payload["epoch"], payload["step"])


def load_cascade(path: str | Path) -> Cascade:
    cascade = load_checkpoint(path).cascade
    cascade.eval()
    return cascade


def checkpoint_path(root: str | Path, stage: int, name: str = "latest.pt") -> Path:
    return Path(root) / f"stage{stage}" / name


def train_stage(
    stage: int,
    samples: Sequence[PedestrianSample],
    out_dir: str | Path,
    schedule: TrainSchedule | None = None,
    weights: L.LossWeights | None = None,
    model_spec: ModelSpec | None = None,
    seed: int = 0,
    perceptual: L.PerceptualLoss | None = None,
    previous_checkpoint: str | Path | None = None,
    resume: bool = True,
    on_step: Callable[[int, L.LossReport], None] | None = None,
) -> StageState:
    """Train one stage for ``schedule.epochs_per_stage`` epochs, writing checkpoints and a loss log.

    Checkpoints land in ``out_dir/stage{i}/`` every ``checkpoint_every``
    epochs, at the freeze boundary and at the end; ``latest.pt`` always
    points at the newest one. An existing ``latest.pt`` is resumed.
    """
    schedule = schedule or TrainSchedule()
    weights = (weights or L.LossWeights()).for_stage(stage)
    if not samples:
        raise ValueError("no training samples")
    stage_dir = Path(out_dir) / f"stage{stage}"
    latest = stage_dir / "latest.pt"

    if resume and latest.is_file():
        state = load_checkpoint(latest)
        log.info("resuming stage %d from epoch %d", stage, state.epoch)
    else:
        previous = None
        if stage > 1:
            prev_path = Path(previous_checkpoint) if previous_checkpoint else checkpoint_path(out_dir, stage - 1)
            previous = load_checkpoint(prev_path).cascade
        state = new_stage_state(stage, model_spec, schedule, seed, previous)

    batches_src = list(samples)
    stage_dir.mkdir(parents=True, exist_ok=True)
    bs = state.schedule.batch_size
    with open(stage_dir / "losses.jsonl", "a") as loss_log:
        for epoch in range(state.epoch + 1, state.schedule.epochs_per_stage + 1):
            state.set_epoch_lr(epoch)
            order = list(shuffled(batches_src, state.seed * 100_003 + epoch))
            for k in range(0, len(order), bs):
                batch = make_batch(order[k:k + bs], stage)
                report = train_step(batch, state, weights, epoch, perceptual)
                loss_log.write(json.dumps({"stage": stage, "epoch": epoch, "step": state.step, **report.as_dict()}) + "\n")
                if on_step:
                    on_step(epoch, report)
            state.epoch = epoch
            if epoch % state.schedule.checkpoint_every == 0 or epoch in (state.schedule.half, state.schedule.epochs_per_stage):
                save_checkpoint(state, stage_dir / f"epoch{epoch:03d}.pt")
                save_checkpoint(state, latest)
            loss_log.flush()
    return state


def read_loss_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
