"""Procedural Cityscapes-like scenes for offline tests and demos."""
from __future__ import annotations

import numpy as np

from .dataset import PEDESTRIAN_CLASS, SceneRecord

ROAD, SIDEWALK, BUILDING, SKY, CAR = 7, 8, 11, 23, 26


def pedestrian_silhouette(height: int, width: int | None = None) -> np.ndarray:
    """Boolean ``height x width`` stick-figure: head disc, torso ellipse, two legs."""
    width = width or max(3, int(round(height * 0.4)))
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cx = (width - 1) / 2.0
    r = max(height * 0.08, 1.0)
    head = (yy - r) ** 2 + (xx - cx) ** 2 <= r**2
    torso_cy, torso_ry, torso_rx = height * 0.38, height * 0.2, width * 0.45
    torso = ((yy - torso_cy) / torso_ry) ** 2 + ((xx - cx) / torso_rx) ** 2 <= 1.0
    leg_w = max(width * 0.15, 0.6)
    legs = (yy >= height * 0.55) & ((np.abs(xx - (cx - width * 0.18)) <= leg_w) | (np.abs(xx - (cx + width * 0.18)) <= leg_w))
    sil = head | torso | legs
    sil[0, int(round(cx))] = True
    sil[-1, int(round(cx - width * 0.18))] = True
    return sil


def make_scene(
    rng: np.random.Generator,
    height: int = 256,
    width: int = 512,
    pedestrians: list[tuple[int, int, int]] | None = None,
    cars: list[tuple[int, int, int, int]] | None = None,
    scene_id: str = "synthetic",
    horizon: float = 0.45,
) -> SceneRecord:
    """Build a scene with sky, buildings, sidewalk and road bands.

    ``pedestrians`` holds ``(x_center, y_top, H)`` triples and ``cars`` holds
    ``(x0, y0, w, h)`` boxes; later objects occlude earlier ones.
    """
    labels = np.full((height, width), ROAD, dtype=np.int64)
    h_sky, h_bld, h_walk = int(height * 0.2), int(height * horizon), int(height * 0.6)
    labels[:h_sky] = SKY
    labels[h_sky:h_bld] = BUILDING
    labels[h_bld:h_walk] = SIDEWALK
    palette = {
        SKY: (0.3, 0.5, 0.9),
        BUILDING: (-0.2, -0.25, -0.3),
        SIDEWALK: (0.4, 0.35, 0.3),
        ROAD: (-0.5, -0.5, -0.45),
    }
    image = np.zeros((height, width, 3), dtype=np.float32)
    for cls, color in palette.items():
        image[labels == cls] = color
    ramp = np.linspace(-0.1, 0.1, width, dtype=np.float32)[None, :, None]
    image += ramp + rng.normal(0.0, 0.03, image.shape).astype(np.float32)
    instance = labels.copy()

    for k, (x0, y0, w, h) in enumerate(cars or []):
        win = (slice(max(y0, 0), min(y0 + h, height)), slice(max(x0, 0), min(x0 + w, width)))
        labels[win] = CAR
        instance[win] = CAR * 1000 + k
        image[win] = np.asarray(rng.uniform(-0.8, 0.8, 3), dtype=np.float32)

    for k, (xc, y0, H) in enumerate(pedestrians or []):
        sil = pedestrian_silhouette(H)
        sh, sw = sil.shape
        x0 = xc - sw // 2
        ys, xs = np.nonzero(sil)
        ys, xs = ys + y0, xs + x0
        keep = (ys >= 0) & (ys < height) & (xs >= 0) & (xs < width)
        ys, xs = ys[keep], xs[keep]
        labels[ys, xs] = PEDESTRIAN_CLASS
        instance[ys, xs] = PEDESTRIAN_CLASS * 1000 + k
        top = np.asarray(rng.uniform(-1, 1, 3), dtype=np.float32)
        bottom = np.asarray(rng.uniform(-1, 1, 3), dtype=np.float32)
        frac = ((ys - y0) / max(H - 1, 1))[:, None].astype(np.float32)
        image[ys, xs] = np.where(frac < 0.55, top, bottom) + rng.normal(0, 0.05, (len(ys), 3)).astype(np.float32)

    return SceneRecord(np.clip(image, -1, 1).astype(np.float32), instance, labels, scene_id)


def random_scene(
    rng: np.random.Generator,
    height: int = 256,
    width: int = 512,
    n_pedestrians: int = 3,
    h_range: tuple[int, int] = (64, 160),
    n_cars: int = 1,
    scene_id: str = "synthetic",
) -> SceneRecord:
    """Scene with pedestrians standing on the sidewalk/road band, heights uniform in ``h_range``."""
    peds = []
    for _ in range(n_pedestrians):
        H = int(rng.integers(h_range[0], h_range[1] + 1))
        H = min(H, height - 2)
        foot = int(rng.integers(int(height * 0.55), height - 1))
        y0 = max(foot - H, 0)
        xc = int(rng.integers(H // 4 + 1, width - H // 4 - 1))
        peds.append((xc, y0, H))
    cars = []
    for _ in range(n_cars):
        ch = int(rng.integers(height // 10, height // 4))
        cw = 2 * ch
        cy = int(rng.integers(int(height * 0.5), height - ch))
        cx = int(rng.integers(0, max(width - cw, 1)))
        cars.append((cx, cy, cw, ch))
    return make_scene(rng, height, width, peds, cars, scene_id)
