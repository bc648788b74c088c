"""Synthesize pedestrians into full scenes and emit an augmented detection set.

A pedestrian of height ``P_s`` is generated inside a ``P_s x P_s`` window
whose centre sits on road or sidewalk, then pasted back by replacing only
the pixels covered by its mask.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from . import dataset as ds
from .errors import InsufficientData, NoValidPlacement, ShapeMismatch

ROAD, SIDEWALK, CAR = 7, 8, 26
GROUND_LABELS = (ROAD, SIDEWALK)
DEFAULT_BINS = 16
DEFAULT_N_IMAGES = 3000
MAX_PLACEMENT_TRIES = 1000
DEFAULT_THRESHOLDS = (96, 192)
MIN_SIDE = 8


@dataclass(frozen=True)
class PlacementSpec:
    x: int
    y: int
    side: int

    def window(self, shape: tuple[int, int]) -> tuple[int, int]:
        """``(top, left)`` of the clamped ``side x side`` window centred on the placement."""
        h, w = shape
        if self.side > min(h, w):
            raise ShapeMismatch(f"{self.side}px window does not fit a {h}x{w} scene")
        return ds.clamped_origin(self.y, self.side, h), ds.clamped_origin(self.x, self.side, w)


# --------------------------------------------------------------------------- size model


def _bin(y: float, height: int, n_bins: int) -> int:
    return min(int(n_bins * y / height), n_bins - 1)


def _objects(scene: ds.SceneRecord, cls: int) -> dict[int, ds.Box]:
    return ds.pedestrian_instances(scene.instance_map, cls)


@dataclass
class SizeModel:
    """Pedestrian heights binned by the vertical position of their centre, plus per-scene scale factors."""

    n_bins: int
    bins: list[list[int]]
    car_bins: list[list[int]]
    scene_factors: dict[str, float] = field(default_factory=dict)

    @property
    def global_heights(self) -> list[int]:
        return [h for b in self.bins for h in b]

    def heights(self, bin_index: int, fallback: bool = True) -> list[int]:
        heights = self.bins[bin_index]
        if heights:
            return heights
        if not fallback:
            raise InsufficientData(f"no pedestrians observed in vertical bin {bin_index}")
        return self.global_heights

    def reference_ratio(self, box: ds.Box, image_height: int, cars: bool = False) -> float | None:
        table = self.car_bins if cars else self.bins
        pool = table[_bin(box.center[0], image_height, self.n_bins)] or [h for b in table for h in b]
        return box.height / float(np.median(pool)) if pool else None

    def scale_factor(self, scene: ds.SceneRecord) -> float:
        """Median ratio of existing pedestrian/car heights to the dataset median at their rows; 1 if none."""
        if scene.scene_id in self.scene_factors:
            return self.scene_factors[scene.scene_id]
        ratios = []
        for cls, cars in ((ds.PEDESTRIAN_CLASS, False), (CAR, True)):
            for box in _objects(scene, cls).values():
                r = self.reference_ratio(box, scene.shape[0], cars)
                if r is not None:
                    ratios.append(r)
        return float(np.median(ratios)) if ratios else 1.0

    def sample_height(self, y: float, image_height: int, rng: np.random.Generator, fallback: bool = True) -> int:
        heights = self.heights(_bin(y, image_height, self.n_bins), fallback)
        return int(heights[rng.integers(len(heights))])

    def to_dict(self) -> dict:
        return asdict(self)


def fit_size_model(scenes: Iterable[ds.SceneRecord], n_bins: int = DEFAULT_BINS,
                   pedestrian_class: int = ds.PEDESTRIAN_CLASS) -> SizeModel:
    scenes = list(scenes)
    bins = [[] for _ in range(n_bins)]
    car_bins = [[] for _ in range(n_bins)]
    for scene in scenes:
        h = scene.shape[0]
        for table, cls in ((bins, pedestrian_class), (car_bins, CAR)):
            for box in _objects(scene, cls).values():
                table[_bin(box.center[0], h, n_bins)].append(box.height)
    if not any(bins):
        raise InsufficientData("no annotated pedestrians to fit a size model")
    model = SizeModel(n_bins, bins, car_bins)
    model.scene_factors = {s.scene_id: model.scale_factor(s) for s in scenes}
    return model


# --------------------------------------------------------------------------- placement


def propose_placement(scene: ds.SceneRecord, size_model: SizeModel, rng: np.random.Generator,
                      max_tries: int = MAX_PLACEMENT_TRIES) -> PlacementSpec:
    h, w = scene.shape
    ground = np.isin(scene.label_map, GROUND_LABELS)
    if ground.any():
        factor = size_model.scale_factor(scene)
        for _ in range(max_tries):
            y, x = int(rng.integers(h)), int(rng.integers(w))
            if not ground[y, x]:
                continue
            side = int(round(size_model.sample_height(y, h, rng) * factor))
            return PlacementSpec(x, y, int(np.clip(side, MIN_SIDE, min(h, w))))
    raise NoValidPlacement(f"no road/sidewalk position found in scene {scene.scene_id!r} after {max_tries} tries")


def crop_background(image: np.ndarray, spec: PlacementSpec) -> np.ndarray:
    top, left = spec.window(image.shape[:2])
    return image[top:top + spec.side, left:left + spec.side].copy()


# --------------------------------------------------------------------------- mask bank


@dataclass
class MaskBankEntry:
    mask: np.ndarray
    source_height: int
    aspect: float
    mask_id: str

    def __post_init__(self):
        if not self.mask.any():
            raise ShapeMismatch(f"mask {self.mask_id} is empty")

    def resized(self, side: int) -> np.ndarray:
        return ds.resize_nearest(self.mask.astype(np.uint8), side).astype(bool)


def square_mask(mask: np.ndarray) -> np.ndarray:
    """Pad a tight mask symmetrically to a square whose side is its longer edge."""
    h, w = mask.shape
    side = max(h, w)
    out = np.zeros((side, side), dtype=bool)
    top, left = (side - h) // 2, (side - w) // 2
    out[top:top + h, left:left + w] = mask
    return out


def build_mask_bank(scenes: Iterable[ds.SceneRecord], min_height: int = 1,
                    pedestrian_class: int = ds.PEDESTRIAN_CLASS) -> list[MaskBankEntry]:
    bank = []
    for scene in scenes:
        for inst, box in sorted(_objects(scene, pedestrian_class).items()):
            if box.height < min_height:
                continue
            tight = scene.instance_map[box.y0:box.y1, box.x0:box.x1] == inst
            bank.append(MaskBankEntry(square_mask(tight), box.height, box.width / box.height, f"{scene.scene_id}:{inst}"))
    return bank


# --------------------------------------------------------------------------- synthesis


def route_stage(side: int, thresholds: Sequence[int] = DEFAULT_THRESHOLDS) -> int:
    lo, hi = thresholds
    return 1 if side < lo else 2 if side < hi else 3


@dataclass
class Synthesis:
    image: np.ndarray
    mask: np.ndarray
    stage: int
    condition: np.ndarray


def _new_instance_id(instance_map: np.ndarray, pedestrian_class: int) -> int:
    ids = instance_map[instance_map // 1000 == pedestrian_class]
    return int(ids.max()) + 1 if ids.size else pedestrian_class * 1000


def augmentation_condition(scene: ds.SceneRecord, spec: PlacementSpec, mask: np.ndarray, resolution: int,
                           pedestrian_class: int = ds.PEDESTRIAN_CLASS, fill: float = ds.MASK_FILL) -> np.ndarray:
    """Condition stack at ``resolution`` for a ``spec.side`` window with ``mask`` stamped in as a new pedestrian."""
    top, left = spec.window(scene.shape)
    win = (slice(top, top + spec.side), slice(left, left + spec.side))
    labels = scene.label_map[win].copy()
    inst = scene.instance_map[win].copy()
    labels[mask] = pedestrian_class
    inst[mask] = _new_instance_id(scene.instance_map, pedestrian_class)
    bg = ds.resize_image(scene.image[win], resolution)
    labels = ds.resize_nearest(labels, resolution)
    inst = ds.resize_nearest(inst, resolution)
    M = ds.resize_nearest(mask.astype(np.uint8), resolution).astype(np.float32)[..., None]
    E = ds.compute_edge_map(inst)
    B_M = ds.mask_image(bg, M[..., 0], fill)
    return np.concatenate([B_M, ds.one_hot_labels(labels), M, E], axis=-1).astype(np.float32)


@torch.no_grad()
def synthesize_at(scene: ds.SceneRecord, spec: PlacementSpec, entry: MaskBankEntry, cascade, z: torch.Tensor,
                  thresholds: Sequence[int] = DEFAULT_THRESHOLDS) -> Synthesis:
    """Generate the ``P_s x P_s`` pedestrian crop for ``spec`` with the stage chosen by its size."""
    stage = route_stage(spec.side, thresholds)
    resolution = ds.get_stage(stage).resolution
    mask = entry.resized(spec.side)
    cond = augmentation_condition(scene, spec, mask, resolution)
    x = torch.from_numpy(cond).permute(2, 0, 1)[None].contiguous()
    out = cascade(x, z.reshape(1, -1), stage)
    out = out[0].permute(1, 2, 0).numpy()
    image = out if resolution == spec.side else ds.resize_image(out, spec.side)
    return Synthesis(np.ascontiguousarray(image, dtype=np.float32), mask, stage, cond)


def blend_replacement(scene_image: np.ndarray, crop: np.ndarray, mask: np.ndarray, spec: PlacementSpec) -> np.ndarray:
    """Copy ``crop`` pixels under ``mask`` into the placed window; every other pixel is left untouched."""
    if crop.shape[:2] != (spec.side, spec.side) or mask.shape != (spec.side, spec.side):
        raise ShapeMismatch(f"crop {crop.shape} / mask {mask.shape} do not match a {spec.side}px placement")
    top, left = spec.window(scene_image.shape[:2])
    out = scene_image.copy()
    window = out[top:top + spec.side, left:left + spec.side]
    window[mask] = crop[mask].astype(out.dtype)
    return out


def placed_mask(scene_shape: tuple[int, int], mask: np.ndarray, spec: PlacementSpec) -> np.ndarray:
    top, left = spec.window(scene_shape)
    full = np.zeros(scene_shape, dtype=bool)
    full[top:top + spec.side, left:left + spec.side] = mask
    return full


def tight_box(mask: np.ndarray) -> ds.Box:
    ys, xs = np.nonzero(mask)
    return ds.Box(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


# --------------------------------------------------------------------------- emission


def _annotations(scene: ds.SceneRecord, synthetic: np.ndarray, pedestrian_class: int) -> list[dict]:
    """CityPersons-style records: existing pedestrians (visibility after pasting) plus the synthetic one."""
    records = []
    for inst, box in sorted(ds.pedestrian_instances(scene.instance_map, pedestrian_class).items()):
        pixels = scene.instance_map == inst
        visible = pixels & ~synthetic
        vis = float(visible.sum()) / float(pixels.sum())
        vbox = tight_box(visible).as_xywh() if visible.any() else [0, 0, 0, 0]
        records.append({"label": "pedestrian", "instance_id": int(inst), "bbox": box.as_xywh(), "bboxVis": vbox,
                        "vis_ratio": vis, "synthetic": False})
    records.append({"label": "pedestrian", "instance_id": None, "bbox": tight_box(synthetic).as_xywh(),
                    "bboxVis": tight_box(synthetic).as_xywh(), "vis_ratio": 1.0, "synthetic": True})
    return records


def emit_augmented_set(
    scenes: Sequence[ds.SceneRecord],
    cascade,
    out_dir: str | Path,
    n_images: int = DEFAULT_N_IMAGES,
    seed: int = 0,
    size_model: SizeModel | None = None,
    mask_bank: Sequence[MaskBankEntry] | None = None,
    thresholds: Sequence[int] = DEFAULT_THRESHOLDS,
    latent_dim: int = 16,
    pedestrian_class: int = ds.PEDESTRIAN_CLASS,
) -> list[dict]:
    """Write ``n_images`` blended scenes as PNGs plus ``annotations.jsonl`` and ``manifest.jsonl``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    scenes = list(scenes)
    rng = np.random.default_rng(seed)
    manifest = []
    if n_images:
        usable = [s for s in scenes if np.isin(s.label_map, GROUND_LABELS).any()]
        if not usable:
            raise NoValidPlacement("no scene has road or sidewalk pixels")
        size_model = size_model or fit_size_model(scenes)
        mask_bank = list(mask_bank) if mask_bank is not None else build_mask_bank(scenes)
        if not mask_bank:
            raise InsufficientData("mask bank is empty")
    with open(out / "annotations.jsonl", "w") as ann, open(out / "manifest.jsonl", "w") as man:
        for k in range(n_images):
            scene = usable[int(rng.integers(len(usable)))]
            spec = propose_placement(scene, size_model, rng)
            entry = mask_bank[int(rng.integers(len(mask_bank)))]
            z_seed = int(rng.integers(2**31))
            z = torch.randn(1, latent_dim, generator=torch.Generator().manual_seed(z_seed))
            synth = synthesize_at(scene, spec, entry, cascade, z, thresholds)
            blended = blend_replacement(scene.image, synth.image, synth.mask, spec)
            full = placed_mask(scene.shape, synth.mask, spec)
            name = f"aug_{k:05d}.png"
            Image.fromarray(ds._to_uint8(blended)).save(out / "images" / name)
            ann.write(json.dumps({"image": name, "scene_id": scene.scene_id, "height": scene.shape[0],
                                  "width": scene.shape[1], "objects": _annotations(scene, full, pedestrian_class)}) + "\n")
            record = {"image": name, "scene_id": scene.scene_id, "placement": asdict(spec), "window": list(spec.window(scene.shape)),
                      "stage": synth.stage, "z_seed": z_seed, "mask_id": entry.mask_id, "seed": seed}
            man.write(json.dumps(record) + "\n")
            manifest.append(record)
    return manifest


def read_jsonl(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
