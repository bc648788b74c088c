"""Hybrid cVAE-GAN / cLR-GAN objective in least-squares form.

Two discriminators score every fake: ``D_img`` the whole crop and
``D_ped`` the masked pedestrian. Both see the condition stack
concatenated with the image they score.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import MissingAsset, ShapeMismatch
from .networks import reparameterize

TERM_NAMES = ("adv_img_vae", "adv_ped_vae", "l1", "kl", "adv_img_clr", "adv_ped_clr", "latent_l1", "vgg")


@dataclass(frozen=True)
class LossWeights:
    lambda_l1: float = 10.0
    lambda_latent: float = 0.5
    lambda_kl: float = 0.01
    lambda_vgg: float = 1.0
    use_vgg: bool = True

    def __post_init__(self):
        for name in ("lambda_l1", "lambda_latent", "lambda_kl", "lambda_vgg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def for_stage(self, stage: int) -> "LossWeights":
        # the perceptual term destabilises first-stage training
        return replace(self, use_vgg=self.use_vgg and stage > 1)

    def coefficient(self, term: str) -> float:
        return {
            "l1": self.lambda_l1,
            "kl": self.lambda_kl,
            "latent_l1": self.lambda_latent,
            "vgg": self.lambda_vgg if self.use_vgg else 0.0,
        }.get(term, 1.0)


def weighted_total(terms: Mapping[str, object], weights: LossWeights):
    """Generator-side objective; works on floats and on tensors alike."""
    total = 0.0
    for name in TERM_NAMES:
        if name == "vgg" and not weights.use_vgg:
            continue
        total = total + weights.coefficient(name) * terms.get(name, 0.0)
    return total


@dataclass
class LossReport:
    adv_img_clr: float = 0.0
    adv_ped_clr: float = 0.0
    adv_img_vae: float = 0.0
    adv_ped_vae: float = 0.0
    l1: float = 0.0
    latent_l1: float = 0.0
    kl: float = 0.0
    vgg: float = 0.0
    total: float = 0.0
    d_img: float = 0.0
    d_ped: float = 0.0
    extras: dict = field(default_factory=dict)

    def terms(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in TERM_NAMES}

    def as_dict(self) -> dict:
        return asdict(self)


def _scalar(v) -> float:
    return float(v.detach().double().item()) if torch.is_tensor(v) else float(v)


def total_objective(terms: Mapping[str, object], weights: LossWeights, **discriminator) -> LossReport:
    values = {name: _scalar(terms.get(name, 0.0)) for name in TERM_NAMES}
    if not weights.use_vgg:
        values["vgg"] = 0.0
    report = LossReport(**values, **{k: _scalar(v) for k, v in discriminator.items()})
    report.total = weighted_total(values, weights)
    return report


# --------------------------------------------------------------------------- adversarial


def lsgan_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return ((real_scores - 1) ** 2).mean() + (fake_scores**2).mean()


def lsgan_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return ((fake_scores - 1) ** 2).mean()


def score(D: nn.Module, cond: torch.Tensor, image: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    if mask is not None:
        image = image * mask
    return D(torch.cat([cond, image], 1))


def d_adversarial(D, cond, real, fake, mask=None) -> torch.Tensor:
    """Discriminator loss; the fake is detached so nothing flows back into G or E."""
    return lsgan_d_loss(score(D, cond, real, mask), score(D, cond, fake.detach(), mask))


def g_adversarial(D, cond, fake, mask=None) -> torch.Tensor:
    return lsgan_g_loss(score(D, cond, fake, mask))


@dataclass
class AdversarialTerms:
    fake: torch.Tensor
    g_img: torch.Tensor
    d_img: torch.Tensor
    g_ped: torch.Tensor
    d_ped: torch.Tensor


def _both(D_img, D_ped, cond, real, fake, mask) -> AdversarialTerms:
    return AdversarialTerms(
        fake=fake,
        g_img=g_adversarial(D_img, cond, fake),
        d_img=d_adversarial(D_img, cond, real, fake),
        g_ped=g_adversarial(D_ped, cond, fake, mask),
        d_ped=d_adversarial(D_ped, cond, real, fake, mask),
    )


def clr_adversarial(G, D_img, D_ped, x, cond, B, M, z) -> AdversarialTerms:
    """Random-code path: ``fake = G(x, z)`` scored by both discriminators."""
    return _both(D_img, D_ped, cond, B, G(x, z), M)


def cvae_adversarial(G, E, D_img, D_ped, x, cond, B, M, eps=None, generator=None):
    """Encoded-code path. Returns ``(terms, z, mu, logvar)`` with ``z`` drawn from ``E(B * M)``."""
    mu, logvar = E(B * M)
    z = reparameterize(mu, logvar, eps, generator)
    return _both(D_img, D_ped, cond, B, G(x, z), M), z, mu, logvar


# --------------------------------------------------------------------------- reconstruction / latent


def recon_l1(fake: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    if fake.shape != real.shape:
        raise ShapeMismatch(f"{tuple(fake.shape)} vs {tuple(real.shape)}")
    return (fake - real).abs().mean()


def latent_recovery_l1(mu_rebuilt: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    return (mu_rebuilt - z).abs().mean()


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over latent dims, averaged over the batch."""
    kl = -0.5 * (1 + logvar - mu**2 - logvar.exp()).sum(-1)
    return kl.mean()


# --------------------------------------------------------------------------- perceptual

# relu1_1, relu2_1, relu3_1, relu4_1, relu5_1 in torchvision's vgg19().features
VGG_SLICES = ((0, 2), (2, 7), (7, 12), (12, 21), (21, 30))
VGG_LAYER_WEIGHTS = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)
VGG_WEIGHTS_ENV = "PMCGAN_VGG_WEIGHTS"


class VGG19Features(nn.Module):
    """Frozen VGG-19 returning the five tap activations."""

    mean = (0.485, 0.456, 0.406)
    std = (0.229, 0.224, 0.225)

    def __init__(self, weights_path: str | os.PathLike | None = None):
        super().__init__()
        from torchvision.models import vgg19

        path = weights_path or os.environ.get(VGG_WEIGHTS_ENV)
        if not path or not Path(path).is_file():
            raise MissingAsset(f"VGG-19 weights not found at {path!r}; set {VGG_WEIGHTS_ENV} or use the toy extractor")
        net = vgg19(weights=None)
        state = torch.load(path, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
        features = net.features
        self.slices = nn.ModuleList(nn.Sequential(*[features[i] for i in range(a, b)]) for a, b in VGG_SLICES)
        self.register_buffer("_mean", torch.tensor(self.mean).view(1, 3, 1, 1))
        self.register_buffer("_std", torch.tensor(self.std).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        h = ((x + 1) / 2 - self._mean) / self._std
        out = []
        for s in self.slices:
            h = s(h)
            out.append(h)
        return out


class ToyFeatures(nn.Module):
    """Deterministic stand-in for VGG: one fixed random conv per scale.

    Tap ``k`` is ``LeakyReLU(conv_k(avgpool^k(x)))``; each tap is a monotone
    function of a linear map of the input, so the loss grows monotonically
    along any straight line leaving the reference image.
    """

    def __init__(self, widths=(8, 8, 16, 16, 16), seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        for w in widths:
            conv = nn.Conv2d(3, w, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) / 27**0.5)
                conv.bias.zero_()
            self.convs.append(conv)
        self.act = nn.LeakyReLU(0.2)
        self.requires_grad_(False)

    def forward(self, x):
        out = []
        for k, conv in enumerate(self.convs):
            if k:
                x = F.avg_pool2d(x, 2)
            out.append(self.act(conv(x)))
        return out


class PerceptualLoss(nn.Module):
    def __init__(self, extractor: nn.Module, layer_weights=VGG_LAYER_WEIGHTS):
        super().__init__()
        self.extractor = extractor
        self.layer_weights = tuple(layer_weights)
        self.calls = 0

    def forward(self, fake, real):
        self.calls += 1
        f_fake = self.extractor(fake)
        f_real = self.extractor(real)
        loss = fake.new_zeros(())
        for w, a, b in zip(self.layer_weights, f_fake, f_real):
            loss = loss + w * (a - b.detach()).abs().mean()
        return loss


def perceptual_vgg(fake, real, loss: PerceptualLoss):
    return loss(fake, real)
