"""Synthetic tiny-object scenes, PGM images and annotation JSON."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .anchors import GtBox
from .errors import DataError
from .rng import Streams


@dataclass
class SynthConfig:
    image_size: int = 64
    n_images: int = 20
    min_objects: int = 3
    max_objects: int = 8
    min_scale: float = 2.0
    max_scale: float = 28.0
    occluded_fraction: float = 0.2
    distractors: int = 2
    noise: float = 0.04


@dataclass
class Dataset:
    images: list[np.ndarray]
    annotations: list[list[GtBox]]
    ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = list(range(len(self.images)))
        if len(self.images) != len(self.annotations) or len(self.ids) != len(self.images):
            raise DataError("images, annotations and ids must have equal length")

    def __len__(self) -> int:
        return len(self.images)

    def gts_by_id(self) -> dict[int, list[GtBox]]:
        return dict(zip(self.ids, self.annotations))


def _background(rng: np.random.Generator, size: int, noise: float) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, size=(size // 8 + 1, size // 8 + 1))
    up = np.kron(coarse, np.ones((8, 8)))[:size, :size]
    # cheap separable blur of the blocky texture
    k = np.array([1, 4, 6, 4, 1], dtype=np.float64)
    k /= k.sum()
    for axis in (0, 1):
        up = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), axis, up)
    return 0.3 + 0.04 * up + rng.normal(0.0, noise, size=(size, size))


def _blob(img: np.ndarray, cx: float, cy: float, w: float, h: float, amp: float) -> None:
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    sx, sy = max(w / 2.5, 0.5), max(h / 2.5, 0.5)
    img += amp * np.exp(-0.5 * (((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))


def render_scene(rng: np.random.Generator, cfg: SynthConfig) -> tuple[np.ndarray, list[GtBox]]:
    """One scene: upright bright figures, a few dim round distractors, noise.

    Scales are log-uniform so tiny objects dominate. Occluded figures are
    annotated by their visible (upper) part only.
    """
    size = cfg.image_size
    bg = _background(rng, size, cfg.noise)
    img = bg.copy()
    boxes: list[GtBox] = []
    placed: list[tuple[float, float, float, float]] = []
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    lo, hi = math.log(cfg.min_scale), math.log(cfg.max_scale)
    for _ in range(n):
        for _attempt in range(20):
            scale = math.exp(float(rng.uniform(lo, hi)))
            aspect = float(rng.uniform(1.3, 2.2))  # height / width
            w = min(scale / math.sqrt(aspect), size - 2.0)
            h = min(scale * math.sqrt(aspect), size - 2.0)
            x = float(rng.uniform(0.0, size - w))
            y = float(rng.uniform(0.0, size - h))
            if all(_overlap(x, y, w, h, p) < 0.1 for p in placed):
                break
        else:
            continue
        placed.append((x, y, w, h))
        _blob(img, x + w / 2, y + h / 2, w, h, 0.45)
        _blob(img, x + w / 2, y + h * 0.15, w * 0.6, h * 0.25, 0.1)  # head
        if rng.random() < cfg.occluded_fraction and h >= 4:
            # lower part hidden behind an occluder; annotate the visible part
            cut = float(rng.uniform(0.4, 0.7)) * h
            r0, r1 = int(math.floor(y + cut)), min(size, int(math.ceil(y + h)) + 2)
            c0, c1 = max(0, int(x) - 1), min(size, int(math.ceil(x + w)) + 1)
            img[r0:r1, c0:c1] = bg[r0:r1, c0:c1]
            h = float(r0) - y
        if h <= 0.5:
            continue
        boxes.append(GtBox(round(x, 3), round(y, 3), round(w, 3), round(h, 3)))
    for _ in range(cfg.distractors):
        d = float(rng.uniform(3.0, 8.0))
        _blob(img, float(rng.uniform(0, size)), float(rng.uniform(0, size)), d, d, 0.15)
    img = np.clip(img, 0.0, 1.0)
    img = np.round(img * 255.0) / 255.0  # exactly what a PGM round trip stores
    return img, boxes


def _overlap(x, y, w, h, other) -> float:
    ox, oy, ow, oh = other
    iw = max(0.0, min(x + w, ox + ow) - max(x, ox))
    ih = max(0.0, min(y + h, oy + oh) - max(y, oy))
    return iw * ih / min(w * h, ow * oh)


def gen_synthetic(cfg: SynthConfig, seed: int, stream: str = "dataset") -> Dataset:
    streams = Streams(seed)
    images, anns = [], []
    for i in range(cfg.n_images):
        img, boxes = render_scene(streams.generator(f"{stream}/{i}"), cfg)
        images.append(img)
        anns.append(boxes)
    return Dataset(images, anns)


# -- file formats ----------------------------------------------------------

def write_pgm(path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise DataError(f"{path}: only binary P5 PGM is supported")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise DataError(f"{path}: 16-bit PGM is not supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1)
    return data.reshape(h, w).astype(np.float64) / maxval


def save_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    images, anns = [], []
    for img_id, img, boxes in zip(ds.ids, ds.images, ds.annotations):
        name = f"images/{img_id:05d}.pgm"
        write_pgm(root / name, img)
        images.append({"id": img_id, "file": name, "width": img.shape[1], "height": img.shape[0]})
        for b in boxes:
            anns.append({"image_id": img_id, "bbox": [b.x, b.y, b.w, b.h], "ignore": bool(b.ignore)})
    path = root / "annotations.json"
    path.write_text(json.dumps({"images": images, "annotations": anns}, indent=1, sort_keys=True))
    return path


def load_annotations(path) -> tuple[list[dict], dict[int, list[GtBox]]]:
    obj = json.loads(Path(path).read_text())
    images = obj.get("images", [])
    by_id: dict[int, list[GtBox]] = {int(im["id"]): [] for im in images}
    for a in obj.get("annotations", []):
        img_id = int(a["image_id"])
        if img_id not in by_id:
            raise DataError(f"annotation refers to unknown image id {img_id}")
        x, y, w, h = (float(v) for v in a["bbox"])
        by_id[img_id].append(GtBox(x, y, w, h, bool(a.get("ignore", False))))
    return images, by_id


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / "annotations.json" if root.is_dir() else root
    images, by_id = load_annotations(path)
    base = path.parent
    imgs = [read_pgm(base / im["file"]) for im in images]
    ids = [int(im["id"]) for im in images]
    return Dataset(imgs, [by_id[i] for i in ids], ids)


def crop_patches(img: np.ndarray, boxes: Sequence[GtBox], size: tuple[int, int] = (640, 512),
                 overlap: int = 30, min_visible: float = 0.5):
    """Tile a large image into ``size`` (width, height) patches with ``overlap`` px.

    Boxes are clipped to each patch; a box keeps its place only if at least
    ``min_visible`` of it lies inside, otherwise it is dropped.
    """
    pw, ph = size
    h, w = img.shape[:2]

    def starts(total, patch):
        if total <= patch:
            return [0]
        step = patch - overlap
        out = list(range(0, total - patch, step))
        out.append(total - patch)
        return sorted(set(out))

    patches = []
    for y0 in starts(h, ph):
        for x0 in starts(w, pw):
            tile = img[y0:y0 + ph, x0:x0 + pw]
            kept = []
            for b in boxes:
                x1, y1 = max(b.x, x0), max(b.y, y0)
                x2, y2 = min(b.x + b.w, x0 + tile.shape[1]), min(b.y + b.h, y0 + tile.shape[0])
                if x2 <= x1 or y2 <= y1:
                    continue
                if (x2 - x1) * (y2 - y1) < min_visible * b.w * b.h:
                    continue
                kept.append(GtBox(x1 - x0, y1 - y0, x2 - x1, y2 - y1, b.ignore))
            patches.append(((x0, y0), tile, kept))
    return patches
