"""Pedestrian-centred training crops built from Cityscapes-style scenes.

Arrays in this module are channel-last numpy arrays. Images live in
``[-1, 1]``; masks and edge maps are ``float32`` arrays with values in
``{0, 1}`` and a trailing singleton channel.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import EmptyDataset, HeightOutOfRange, InvalidStage, MissingInstance, ShapeMismatch

NUM_CLASSES = 35
PEDESTRIAN_CLASS = 24
MASK_FILL = 0.0
EXPANSION_FACTOR = 1.22

# channel layout of the condition stack: (B_M, L_m, M, E_m)
IMAGE_CHANNELS = slice(0, 3)
LABEL_CHANNELS = slice(3, 3 + NUM_CLASSES)
MASK_CHANNEL = 3 + NUM_CLASSES
EDGE_CHANNEL = MASK_CHANNEL + 1
CONDITION_CHANNELS = EDGE_CHANNEL + 1


@dataclass(frozen=True)
class StageSpec:
    index: int
    resolution: int
    h_min: int
    h_max: int
    expansion_enabled: bool = False


STAGES = {
    1: StageSpec(1, 64, 64, 256),
    2: StageSpec(2, 128, 100, 1024),
    3: StageSpec(3, 256, 150, 1024, expansion_enabled=True),
}


def get_stage(index: int) -> StageSpec:
    try:
        return STAGES[index]
    except KeyError:
        raise InvalidStage(f"stage must be 1, 2 or 3, got {index!r}") from None


@dataclass(frozen=True)
class Box:
    """Pixel box with exclusive upper corner."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def center(self) -> tuple[float, float]:
        return (self.y0 + self.y1) / 2.0, (self.x0 + self.x1) / 2.0

    def as_xywh(self) -> list[int]:
        return [self.x0, self.y0, self.width, self.height]


@dataclass
class SceneRecord:
    image: np.ndarray
    instance_map: np.ndarray
    label_map: np.ndarray
    scene_id: str

    def __post_init__(self):
        h, w = self.instance_map.shape[:2]
        if self.image.shape[:2] != (h, w) or self.label_map.shape[:2] != (h, w):
            raise ShapeMismatch(
                f"scene {self.scene_id}: image {self.image.shape[:2]}, instance map "
                f"{self.instance_map.shape[:2]} and label map {self.label_map.shape[:2]} differ"
            )
        if self.label_map.size and (self.label_map.min() < 0 or self.label_map.max() >= NUM_CLASSES):
            raise ValueError(f"scene {self.scene_id}: class ids must lie in [0, {NUM_CLASSES - 1}]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.instance_map.shape[:2]


@dataclass
class PedestrianSample:
    B: np.ndarray
    B_M: np.ndarray
    M: np.ndarray
    L_m: np.ndarray
    E_m: np.ndarray
    H: int
    stage: int
    scene_id: str = ""
    instance_id: int = 0
    bbox: Box | None = None
    side: int = 0
    origin: tuple[int, int] = (0, 0)
    expanded: bool = False
    sample_id: str = field(default="")

    @property
    def resolution(self) -> int:
        return self.B.shape[0]

    def label_ids(self) -> np.ndarray:
        return self.L_m.argmax(axis=-1).astype(np.uint8)


# --------------------------------------------------------------------------- masks


def compute_mask(instance_map: np.ndarray, instance_id: int) -> np.ndarray:
    mask = instance_map == instance_id
    if not mask.any():
        raise MissingInstance(f"instance {instance_id} does not occur in the instance map")
    return mask[..., None].astype(np.float32)


def compute_edge_map(instance_map: np.ndarray) -> np.ndarray:
    """Instance boundaries from 4-neighbour id changes.

    At each change the pixel carrying the larger id is marked, so edges are one
    pixel thick and drawn on the object side (Cityscapes object ids are
    ``class * 1000 + k`` and dominate the stuff ids).
    """
    m = np.asarray(instance_map)
    edge = np.zeros(m.shape, dtype=bool)
    a, b = m[:, 1:], m[:, :-1]
    edge[:, 1:] |= a > b
    edge[:, :-1] |= b > a
    a, b = m[1:, :], m[:-1, :]
    edge[1:, :] |= a > b
    edge[:-1, :] |= b > a
    return edge[..., None].astype(np.float32)


def mask_image(B: np.ndarray, M: np.ndarray, fill: float = MASK_FILL) -> np.ndarray:
    if M.ndim == 2:
        M = M[..., None]
    if B.shape[:2] != M.shape[:2]:
        raise ShapeMismatch(f"image {B.shape[:2]} and mask {M.shape[:2]} differ")
    return np.where(M > 0, np.asarray(fill, dtype=B.dtype), B)


def one_hot_labels(label_map: np.ndarray) -> np.ndarray:
    return np.eye(NUM_CLASSES, dtype=np.float32)[label_map.astype(np.int64)]


def pedestrian_instances(instance_map: np.ndarray, pedestrian_class: int = PEDESTRIAN_CLASS) -> dict[int, Box]:
    """Map every pedestrian instance id to the tight box of its visible pixels."""
    ids = np.unique(instance_map)
    ids = ids[(ids >= 1000) & (ids // 1000 == pedestrian_class)]
    boxes = {}
    for inst in ids:
        ys, xs = np.nonzero(instance_map == inst)
        boxes[int(inst)] = Box(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
    return boxes


# --------------------------------------------------------------------------- resizing


def resize_nearest(arr: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize using the ``floor(dst * in / out)`` source index."""
    oh, ow = (size, size) if isinstance(size, int) else size
    ih, iw = arr.shape[:2]
    rows = np.minimum((np.arange(oh) * ih) // oh, ih - 1)
    cols = np.minimum((np.arange(ow) * iw) // ow, iw - 1)
    return arr[rows][:, cols]


def resize_image(img: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    oh, ow = (size, size) if isinstance(size, int) else size
    if img.shape[:2] == (oh, ow):
        return img.copy()
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    antialias = oh < img.shape[0] or ow < img.shape[1]
    out = F.interpolate(t, size=(oh, ow), mode="bilinear", align_corners=False, antialias=antialias)
    return out[0].permute(1, 2, 0).numpy().clip(-1.0, 1.0)


def clamped_origin(center: float, side: int, limit: int) -> int:
    """Start index of a ``side``-long window centred at ``center`` and shifted inside ``[0, limit)``."""
    start = math.floor(center - side / 2.0 + 0.5)
    return int(min(max(start, 0), max(limit - side, 0)))


# --------------------------------------------------------------------------- crops


def crop_for_stage(
    scene: SceneRecord,
    bbox: Box,
    stage: StageSpec,
    instance_id: int,
    *,
    side: int | None = None,
    fill: float = MASK_FILL,
) -> PedestrianSample:
    """Crop a square window centred on ``bbox`` and bring it to the stage resolution.

    The window is ``s x s`` when the box height fits, otherwise ``H x H``;
    ``side`` overrides the window size (third-stage expansion). Windows that
    would leave the scene are shifted inward; windows larger than the scene
    are capped at its shorter side.
    """
    H = bbox.height
    if not stage.h_min <= H <= stage.h_max:
        raise HeightOutOfRange(f"H={H} outside [{stage.h_min}, {stage.h_max}] for stage {stage.index}")
    s = stage.resolution
    if side is None:
        side = s if H <= s else H
    img_h, img_w = scene.shape
    side = min(side, img_h, img_w)
    cy, cx = bbox.center
    top = clamped_origin(cy, side, img_h)
    left = clamped_origin(cx, side, img_w)
    win = (slice(top, top + side), slice(left, left + side))

    inst = resize_nearest(scene.instance_map[win], s)
    labels = resize_nearest(scene.label_map[win], s)
    B = resize_image(scene.image[win], s).astype(np.float32)
    M = (inst == instance_id)[..., None].astype(np.float32)
    if not M.any():
        raise MissingInstance(f"instance {instance_id} vanished from its {side}px crop")
    return PedestrianSample(
        B=B,
        B_M=mask_image(B, M, fill),
        M=M,
        L_m=one_hot_labels(labels),
        E_m=compute_edge_map(inst),
        H=H,
        stage=stage.index,
        scene_id=scene.scene_id,
        instance_id=instance_id,
        bbox=bbox,
        side=side,
        origin=(top, left),
        expanded=side > max(H, s),
    )


def expand_third_stage(H: int, rng: np.random.Generator) -> int:
    """Draw an integer window side from ``(H, floor(1.22 H)]``."""
    high = max(math.floor(EXPANSION_FACTOR * H + 1e-9), H + 1)
    return int(rng.integers(H + 1, high + 1))


def build_condition_stack(sample: PedestrianSample) -> np.ndarray:
    s = sample.B_M.shape[0]
    planes = (sample.B_M, sample.L_m, sample.M, sample.E_m)
    for p, n in zip(planes, (3, NUM_CLASSES, 1, 1)):
        if p.shape != (s, s, n):
            raise ShapeMismatch(f"expected a {(s, s, n)} plane, got {p.shape}")
    return np.concatenate(planes, axis=-1).astype(np.float32)


def build_stage_dataset(
    scenes: Iterable[SceneRecord],
    stage: StageSpec,
    rng: np.random.Generator | None = None,
    *,
    pedestrian_class: int = PEDESTRIAN_CLASS,
    expansions: int = 1,
) -> list[PedestrianSample]:
    """One sample per in-range pedestrian, plus ``expansions`` enlarged crops each at stage 3."""
    rng = rng if rng is not None else np.random.default_rng(0)
    samples = []
    for scene in scenes:
        for inst, box in pedestrian_instances(scene.instance_map, pedestrian_class).items():
            if not stage.h_min <= box.height <= stage.h_max:
                continue
            base = crop_for_stage(scene, box, stage, inst)
            base.sample_id = f"{scene.scene_id}_{inst}_s{stage.index}"
            samples.append(base)
            if stage.expansion_enabled:
                for k in range(expansions):
                    side = expand_third_stage(box.height, rng)
                    extra = crop_for_stage(scene, box, stage, inst, side=side)
                    extra.sample_id = f"{base.sample_id}_x{k}"
                    extra.expanded = True
                    samples.append(extra)
    if not samples:
        raise EmptyDataset(f"no pedestrian qualifies for stage {stage.index} ({stage.h_min}<=H<={stage.h_max})")
    return samples


def manifest_record(sample: PedestrianSample) -> dict:
    return {
        "sample_id": sample.sample_id,
        "scene_id": sample.scene_id,
        "instance_id": sample.instance_id,
        "bbox": sample.bbox.as_xywh() if sample.bbox else None,
        "H": sample.H,
        "side": sample.side,
        "origin": list(sample.origin),
        "stage": sample.stage,
        "expanded": sample.expanded,
        "files": {k: f"{sample.sample_id}_{k}.png" for k in ("image", "label", "mask", "edge")},
    }


def shuffled(samples: Sequence, seed: int) -> Iterator:
    """Deterministic single-sequence iteration order."""
    order = np.random.default_rng(seed).permutation(len(samples))
    for i in order:
        yield samples[int(i)]


# --------------------------------------------------------------------------- disk IO


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def _from_uint8(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / 127.5 - 1.0


def load_scene(root: str | Path, split: str, name: str) -> SceneRecord:
    root = Path(root)
    paths = {k: root / k / split / f"{name}.png" for k in ("images", "instance", "labels")}
    for p in paths.values():
        if not p.exists():
            raise FileNotFoundError(f"missing scene file {p}")
    image = np.array(Image.open(paths["images"]).convert("RGB"))
    instance = np.array(Image.open(paths["instance"])).astype(np.int64)
    labels = np.array(Image.open(paths["labels"])).astype(np.int64)
    labels[labels >= NUM_CLASSES] = 0
    return SceneRecord(_from_uint8(image), instance, labels, name)


def list_scenes(root: str | Path, split: str) -> list[str]:
    root = Path(root)
    for sub in ("images", "instance", "labels"):
        d = root / sub / split
        if not d.is_dir():
            raise FileNotFoundError(f"missing input directory {d}")
    return sorted(p.stem for p in (root / "images" / split).glob("*.png"))


def iter_scenes(root: str | Path, split: str) -> Iterator[SceneRecord]:
    for name in list_scenes(root, split):
        yield load_scene(root, split, name)


def save_scene(scene: SceneRecord, root: str | Path, split: str) -> None:
    root = Path(root)
    for sub in ("images", "instance", "labels"):
        (root / sub / split).mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(scene.image)).save(root / "images" / split / f"{scene.scene_id}.png")
    Image.fromarray(scene.instance_map.astype(np.uint16)).save(root / "instance" / split / f"{scene.scene_id}.png")
    Image.fromarray(scene.label_map.astype(np.uint8)).save(root / "labels" / split / f"{scene.scene_id}.png")


def save_stage_dataset(samples: Sequence[PedestrianSample], out_dir: str | Path) -> Path:
    """Write PNG planes for every sample and a ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for sample in samples:
        rec = manifest_record(sample)
        files = rec["files"]
        Image.fromarray(_to_uint8(sample.B)).save(out / files["image"])
        Image.fromarray(sample.label_ids()).save(out / files["label"])
        Image.fromarray((sample.M[..., 0] * 255).astype(np.uint8)).save(out / files["mask"])
        Image.fromarray((sample.E_m[..., 0] * 255).astype(np.uint8)).save(out / files["edge"])
        lines.append(json.dumps(rec, sort_keys=True))
    path = out / "manifest.jsonl"
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def load_stage_dataset(out_dir: str | Path, fill: float = MASK_FILL) -> list[PedestrianSample]:
    out = Path(out_dir)
    manifest = out / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"missing dataset manifest {manifest}")
    samples = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        files = rec["files"]
        B = _from_uint8(np.array(Image.open(out / files["image"]).convert("RGB")))
        M = (np.array(Image.open(out / files["mask"])) > 127)[..., None].astype(np.float32)
        E = (np.array(Image.open(out / files["edge"])) > 127)[..., None].astype(np.float32)
        labels = np.array(Image.open(out / files["label"])).astype(np.int64)
        x, y, w, h = rec["bbox"] if rec["bbox"] else (0, 0, 0, rec["H"])
        samples.append(
            PedestrianSample(
                B=B,
                B_M=mask_image(B, M, fill),
                M=M,
                L_m=one_hot_labels(labels),
                E_m=E,
                H=rec["H"],
                stage=rec["stage"],
                scene_id=rec["scene_id"],
                instance_id=rec["instance_id"],
                bbox=Box(x, y, x + w, y + h),
                side=rec["side"],
                origin=tuple(rec["origin"]),
                expanded=rec["expanded"],
                sample_id=rec["sample_id"],
            )
        )
    return samples
