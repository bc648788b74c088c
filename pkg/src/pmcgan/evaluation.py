"""FID under the five-codes-per-input protocol, multimodal sampling and latent interpolation."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .dataset import MASK_CHANNEL
from .errors import DimensionMismatch, InsufficientData, MissingAsset, NonConvergent

INCEPTION_WEIGHTS_ENV = "PMCGAN_INCEPTION_WEIGHTS"
EIG_TOLERANCE = 1e-6

Generator = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        if self.sigma.shape != (self.mu.size, self.mu.size):
            raise DimensionMismatch(f"mean of size {self.mu.size} with covariance {self.sigma.shape}")
        if self.n < 2:
            raise InsufficientData(f"feature statistics need n >= 2, got {self.n}")

    @property
    def dim(self) -> int:
        return self.mu.size


def feature_stats(features: np.ndarray) -> FeatureStats:
    """Mean and unbiased (n-1) covariance of an ``n x d`` feature matrix."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] < 2:
        raise InsufficientData(f"need at least two feature vectors, got {f.shape[0]}")
    return FeatureStats(f.mean(0), np.cov(f, rowvar=False, ddof=1).reshape(f.shape[1], f.shape[1]), f.shape[0])


def _psd_sqrt_eigvals(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    if not np.all(np.isfinite(m)):
        raise NonConvergent(f"{what} contains non-finite entries")
    try:
        vals, vecs = np.linalg.eigh((m + m.T) / 2)
    except np.linalg.LinAlgError as exc:
        raise NonConvergent(f"eigendecomposition of {what} failed: {exc}") from exc
    floor = -EIG_TOLERANCE * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < floor:
        raise NonConvergent(f"{what} has eigenvalue {vals.min():.3g}, not positive semidefinite")
    return np.sqrt(np.clip(vals, 0.0, None)), vecs


def trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """``tr((sigma_a sigma_b)^(1/2))`` via ``sqrt(a) b sqrt(a)``, which is symmetric PSD with the same spectrum."""
    s, v = _psd_sqrt_eigvals(sigma_a, "first covariance")
    root_a = (v * s) @ v.T
    roots, _ = _psd_sqrt_eigvals(root_a @ sigma_b @ root_a, "covariance product")
    return float(roots.sum())


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    if a.dim != b.dim:
        raise DimensionMismatch(f"feature dimensions differ: {a.dim} vs {b.dim}")
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2 * trace_sqrt_product(a.sigma, b.sigma))
    return max(value, 0.0)


# --------------------------------------------------------------------------- extractors


class InceptionFeatures(nn.Module):
    """Inception-v3 pool features (2048-d) from a local torchvision state dict."""

    input_size = 299
    dim = 2048

    def __init__(self, weights_path: str | os.PathLike | None = None):
        super().__init__()
        from torchvision.models import inception_v3

        path = weights_path or os.environ.get(INCEPTION_WEIGHTS_ENV)
        if not path or not Path(path).is_file():
            raise MissingAsset(
                f"Inception-v3 weights not found at {path!r}; set {INCEPTION_WEIGHTS_ENV} or use the toy extractor"
            )
        net = inception_v3(weights=None, aux_logits=True, init_weights=False, transform_input=False)
        net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        net.fc = nn.Identity()
        self.net = net
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        # images arrive in [-1, 1], the range the network was trained on
        return self.net(x)


class ToyExtractor(nn.Module):
    """Fixed random conv features with global pooling; a cheap offline stand-in for Inception."""

    input_size = 32

    def __init__(self, dim: int = 64, seed: int = 0):
        super().__init__()
        self.dim = dim
        g = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(3, 32, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(32, dim, 3, stride=2, padding=1)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                fan_in = conv.weight[0].numel()
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) / fan_in**0.5)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=g) * 0.1)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), 0.2)
        h = torch.tanh(self.conv2(h))
        return h.mean((2, 3))


def _as_batch(images) -> torch.Tensor:
    if torch.is_tensor(images):
        return images if images.dim() == 4 else images[None]
    return torch.stack([torch.as_tensor(np.asarray(im)) if not torch.is_tensor(im) else im for im in images])


@torch.no_grad()
def extract_features(images, extractor: nn.Module, batch_size: int = 32) -> np.ndarray:
    """One feature row per image; images are ``N x 3 x H x W`` in [-1, 1], resized to the extractor's input size."""
    x = _as_batch(images).float()
    size = getattr(extractor, "input_size", None)
    rows = []
    for k in range(0, x.shape[0], batch_size):
        chunk = x[k:k + batch_size]
        if size and tuple(chunk.shape[-2:]) != (size, size):
            chunk = F.interpolate(chunk, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
        rows.append(extractor(chunk).double().reshape(chunk.shape[0], -1))
    return torch.cat(rows).numpy()


# --------------------------------------------------------------------------- FID


def torch_rng(rng: np.random.Generator | int | None) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    return torch.Generator().manual_seed(int(rng.integers(2**62)))


@dataclass
class FIDResult:
    fid: float
    n_real: int
    n_fake: int
    real: FeatureStats
    fake: FeatureStats

    def as_dict(self) -> dict:
        return {"fid": self.fid, "n_real": self.n_real, "n_fake": self.n_fake}


@torch.no_grad()
def generate_codes(inputs: torch.Tensor, generator: Generator, n_codes: int = 5, rng=None,
                   latent_dim: int = 16) -> torch.Tensor:
    """``n_codes`` outputs per input condition stack, each from an independent ``z ~ N(0, I)``."""
    g = torch_rng(rng)
    out = []
    for k in range(inputs.shape[0]):
        cond = inputs[k:k + 1]
        for _ in range(n_codes):
            out.append(generator(cond, torch.randn(1, latent_dim, generator=g)))
    return torch.cat(out)


def compute_fid(
    real_images,
    inputs: torch.Tensor,
    generator: Generator,
    extractor: nn.Module,
    n_codes: int = 5,
    rng=None,
    latent_dim: int = 16,
) -> FIDResult:
    """Pool ``n_codes`` generations per input into one set and compare it with the real set."""
    real = _as_batch(real_images)
    if real.shape[0] == 0 or inputs.shape[0] == 0:
        raise InsufficientData("FID needs non-empty real and input sets")
    fake = generate_codes(inputs, generator, n_codes, rng, latent_dim)
    a = feature_stats(extract_features(real, extractor))
    b = feature_stats(extract_features(fake, extractor))
    return FIDResult(frechet_distance(a, b), real.shape[0], fake.shape[0], a, b)


# --------------------------------------------------------------------------- multimodal outputs


@torch.no_grad()
def interpolate_latents(cond: torch.Tensor, z_first: torch.Tensor, z_last: torch.Tensor, steps: int,
                        generator: Generator) -> tuple[list[float], torch.Tensor]:
    """Images along ``(1 - t) z_first + t z_last`` for ``steps`` uniform ``t`` in [0, 1]."""
    if steps < 2:
        raise ValueError("interpolation needs at least two steps")
    z_first, z_last = z_first.reshape(1, -1), z_last.reshape(1, -1)
    ts = [k / (steps - 1) for k in range(steps)]
    step = z_last - z_first

    def code(t):
        # endpoints are the given codes themselves, and an all-zero step leaves z_first untouched
        return z_last if t == 1 else z_first + t * step

    # one forward per code so the endpoints match direct generation bit for bit
    images = [generator(cond, code(t)) for t in ts]
    return ts, torch.cat(images)


@torch.no_grad()
def sample_multimodal(cond: torch.Tensor, generator: Generator, n: int, rng=None, latent_dim: int = 16) -> torch.Tensor:
    if n < 1:
        raise ValueError("n must be >= 1")
    g = torch_rng(rng)
    return torch.cat([generator(cond, torch.randn(1, latent_dim, generator=g)) for _ in range(n)])


def pairwise_diversity(images: torch.Tensor, mask: torch.Tensor) -> dict[tuple[int, int], float]:
    """Mean absolute difference inside the mask for every pair of samples."""
    m = mask.reshape(1, *mask.shape[-2:]).bool().expand(images.shape[1], -1, -1)
    if not m.any():
        raise InsufficientData("mask is empty")
    out = {}
    for i in range(images.shape[0]):
        for j in range(i + 1, images.shape[0]):
            out[(i, j)] = float((images[i] - images[j]).abs()[m].mean())
    return out


def mask_of(cond: torch.Tensor) -> torch.Tensor:
    return cond[0, MASK_CHANNEL]


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """``3 x H x W`` in [-1, 1] -> ``H x W x 3`` uint8."""
    x = ((image.detach().float().clamp(-1, 1) + 1) * 127.5).round()
    return x.permute(1, 2, 0).to(torch.uint8).numpy()


def tile_grid(images: torch.Tensor | Sequence[torch.Tensor], ncols: int | None = None, pad: int = 2) -> np.ndarray:
    images = _as_batch(images)
    n, _, h, w = images.shape
    ncols = ncols or n
    nrows = -(-n // ncols)
    grid = np.full((nrows * (h + pad) + pad, ncols * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for k in range(n):
        r, c = divmod(k, ncols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y:y + h, x:x + w] = to_uint8(images[k])
    return grid


def save_png(array: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)
    return path
