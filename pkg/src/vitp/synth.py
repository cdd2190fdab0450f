"""Synthetic shapes dataset with fine, coarse and box annotations.

Every image has a stuff background, optionally a horizontal stuff band, and a
few occluding thing shapes (disks, rectangles, triangles). Each image draws
from its own RNG stream derived from ``(seed, index)``, so output never
depends on generation order.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .pipeline import taxicab_distance
from .structures import (VOID_ID, VOID_LABEL, ClassSpec, GroundTruth, ProposalSet,
                         Taxonomy)

_CROSS = ndimage.generate_binary_structure(2, 1)

DEFAULT_CLASSES = (
    ClassSpec("field", False, "background", (96, 150, 96)),
    ClassSpec("river", False, "band", (70, 96, 170)),
    ClassSpec("red_disk", True, "disk", (210, 60, 50)),
    ClassSpec("yellow_rect", True, "rect", (225, 205, 60)),
    ClassSpec("cyan_triangle", True, "triangle", (60, 200, 210)),
    ClassSpec("violet_disk", True, "disk", (170, 70, 200)),
)


@dataclass(frozen=True)
class ProposalNoise:
    jitter_sigma: float = 1.0
    corruption_rate: float = 0.3
    temperature: float = 0.25
    null_score: float = 0.01
    mask_sharpness: float = 0.5
    distractors: int = 0

    def __post_init__(self):
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ValueError("corruption_rate must lie in [0, 1]")
        if self.jitter_sigma < 0 or self.temperature < 0 or self.mask_sharpness <= 0:
            raise ValueError("jitter_sigma/temperature must be >= 0 and mask_sharpness > 0")
        if not 0.0 <= self.null_score < 1.0:
            raise ValueError("null_score must lie in [0, 1)")


@dataclass(frozen=True)
class SynthConfig:
    num_images: int = 200
    image_size: tuple = (64, 64)
    classes: tuple = DEFAULT_CLASSES
    shapes_per_image: tuple = (2, 5)
    shape_size: tuple = (7, 14)
    band_probability: float = 0.5
    coarse_erosion: int = 2
    pixel_noise: float = 6.0
    min_visible: float = 0.6
    seed: int = 0
    proposal_noise: ProposalNoise = field(default_factory=ProposalNoise)

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "classes", tuple(self.classes))
        things = [c for c in self.classes if c.is_thing]
        stuff = [c for c in self.classes if not c.is_thing]
        if len(self.classes) < 2 or not things or not stuff:
            raise ValueError("taxonomy needs at least one thing and one stuff class")
        if self.coarse_erosion < 1:
            raise ValueError("coarse_erosion must be >= 1")
        lo, hi = self.shapes_per_image
        if not 0 <= lo <= hi:
            raise ValueError(f"bad shapes_per_image {self.shapes_per_image}")
        if 2 * self.shape_size[1] + 2 > min(self.image_size):
            raise ValueError(f"shapes of radius {self.shape_size[1]} do not fit a {self.image_size} image")
        if self.num_images < 1:
            raise ValueError("num_images must be >= 1")

    @property
    def taxonomy(self) -> Taxonomy:
        return Taxonomy(list(self.classes))


@dataclass(frozen=True)
class Box:
    segment_id: int
    class_id: int
    x: float
    y: float
    w: float
    h: float

    def pixel_bounds(self, height: int, width: int) -> tuple:
        """Inclusive ``(row0, col0, row1, col1)``."""
        c0 = round((self.x - self.w / 2) * width)
        c1 = round((self.x + self.w / 2) * width) - 1
        r0 = round((self.y - self.h / 2) * height)
        r1 = round((self.y + self.h / 2) * height) - 1
        return r0, c0, r1, c1


@dataclass
class AnnotatedImage:
    image: np.ndarray          # H×W×3 uint8
    fine: np.ndarray           # H×W uint16 segment ids
    segments: dict             # segment id -> class id
    coarse: np.ndarray         # H×W uint16, VOID_ID where unlabeled
    boxes: list
    image_id: str = ""
    split: str = "train"

    @property
    def hw(self) -> tuple:
        return self.fine.shape

    def semantic_map(self, source: str = "fine") -> np.ndarray:
        ids = self.fine if source == "fine" else self.coarse
        out = np.full(ids.shape, VOID_LABEL, dtype=np.int64)
        for sid, cls in self.segments.items():
            out[ids == sid] = cls
        return out

    def ground_truth(self, taxonomy: Taxonomy) -> GroundTruth:
        table = {int(sid): (int(c), taxonomy.is_thing(c)) for sid, c in self.segments.items()}
        instances = [(self.fine == sid, c) for sid, (c, thing) in sorted(table.items()) if thing]
        return GroundTruth(self.semantic_map(), (self.fine.astype(np.int64), table), instances)


@dataclass
class Dataset:
    taxonomy: Taxonomy
    images: list

    @property
    def train(self) -> list:
        return [a for a in self.images if a.split == "train"]

    @property
    def val(self) -> list:
        return [a for a in self.images if a.split == "val"]


# -- shapes ----------------------------------------------------------------------

def _shape_mask(kind: str, hw: tuple, rng, size: tuple) -> np.ndarray:
    h, w = hw
    rows, cols = np.mgrid[0:h, 0:w]
    r = rng.integers(size[0], size[1] + 1)
    cy = rng.integers(r + 1, h - r - 1)
    cx = rng.integers(r + 1, w - r - 1)
    if kind == "disk":
        return (rows - cy) ** 2 + (cols - cx) ** 2 <= r * r
    if kind == "rect":
        rh = rng.integers(max(3, r // 2), r + 1)
        return (np.abs(rows - cy) <= rh) & (np.abs(cols - cx) <= r)
    if kind == "triangle":
        # upright isosceles triangle inscribed in the r-box
        top = cy - r
        frac = (rows - top) / (2.0 * r)
        return (rows >= top) & (rows <= cy + r) & (np.abs(cols - cx) <= frac * r)
    raise ValueError(f"unknown shape family {kind!r}")


def _paint(image: np.ndarray, mask: np.ndarray, spec: ClassSpec, rng) -> None:
    jitter = rng.integers(-spec.color_jitter, spec.color_jitter + 1, size=3)
    image[mask] = np.clip(np.asarray(spec.color) + jitter, 0, 255)


def _image_rng(seed: int, index: int, stream: int = 0):
    return np.random.default_rng([seed, index, stream])


def generate_image(cfg: SynthConfig, index: int) -> AnnotatedImage:
    rng = _image_rng(cfg.seed, index)
    h, w = cfg.image_size
    tax = cfg.taxonomy
    canvas = np.zeros((h, w, 3), dtype=np.float64)
    fine = np.zeros((h, w), dtype=np.uint16)
    segments = {}

    background = [i for i in tax.stuff_ids if tax.classes[i].shape != "band"] or tax.stuff_ids[:1]
    bg_class = background[rng.integers(len(background))]
    fine[:] = 1
    segments[1] = bg_class
    _paint(canvas, fine == 1, tax.classes[bg_class], rng)

    bands = [i for i in tax.stuff_ids if tax.classes[i].shape == "band"]
    # the band counts as a shape: a shape-free config stays a single stuff segment
    if bands and cfg.shapes_per_image[1] > 0 and rng.random() < cfg.band_probability:
        cls = bands[rng.integers(len(bands))]
        top = rng.integers(0, h - h // 4)
        height = rng.integers(h // 8, h // 4 + 1)
        band = np.zeros((h, w), dtype=bool)
        band[top:top + height] = True
        sid = len(segments) + 1
        fine[band] = sid
        segments[sid] = cls
        _paint(canvas, band, tax.classes[cls], rng)

    things = tax.thing_ids
    count = rng.integers(cfg.shapes_per_image[0], cfg.shapes_per_image[1] + 1)
    areas = {}
    for _ in range(count):
        cls = things[rng.integers(len(things))]
        spec = tax.classes[cls]
        for _attempt in range(30):
            mask = _shape_mask(spec.shape, (h, w), rng, cfg.shape_size)
            ok = all(np.count_nonzero((fine == sid) & ~mask) >= cfg.min_visible * area
                     for sid, area in areas.items())
            if ok:
                break
        else:
            continue
        sid = len(segments) + 1
        fine[mask] = sid
        segments[sid] = cls
        areas[sid] = int(mask.sum())
        _paint(canvas, mask, spec, rng)

    # stuff regions that were fully covered disappear from the table
    present = set(np.unique(fine).tolist())
    segments = {sid: c for sid, c in segments.items() if sid in present}
    if cfg.pixel_noise > 0:
        canvas = canvas + rng.normal(0.0, cfg.pixel_noise, canvas.shape)
    image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    coarse = make_coarse(fine, cfg.coarse_erosion)
    boxes = boxes_from_fine(fine, segments)
    return AnnotatedImage(image, fine, segments, coarse, boxes, image_id=f"{index:06d}")


def split_of(index: int, num_images: int) -> str:
    n_train = max(1, int(num_images * 0.9)) if num_images > 1 else 1
    if num_images > 1:
        n_train = min(n_train, num_images - 1)
    return "train" if index < n_train else "val"


def generate(cfg: SynthConfig) -> Dataset:
    images = []
    for i in range(cfg.num_images):
        ann = generate_image(cfg, i)
        ann.split = split_of(i, cfg.num_images)
        images.append(ann)
    return Dataset(cfg.taxonomy, images)


# -- annotations -----------------------------------------------------------------

def central_pixel(mask: np.ndarray) -> tuple:
    dist = taxicab_distance(mask)
    flat = int(np.argmax(dist))
    return divmod(flat, mask.shape[1])


def make_coarse(fine: np.ndarray, erosion: int) -> np.ndarray:
    """Erode every segment by ``erosion`` pixels (4-connected)."""
    if erosion < 1:
        raise ValueError("erosion must be >= 1")
    coarse = np.full(fine.shape, VOID_ID, dtype=np.uint16)
    for sid in np.unique(fine):
        if sid == VOID_ID:
            continue
        region = fine == sid
        core = ndimage.binary_erosion(region, structure=_CROSS, iterations=erosion, border_value=0)
        if not core.any():
            core = np.zeros_like(region)
            core[central_pixel(region)] = True
        coarse[core] = sid
    return coarse


def boxes_from_fine(fine: np.ndarray, segments: dict) -> list:
    h, w = fine.shape
    boxes = []
    for sid in sorted(segments):
        rows, cols = np.nonzero(fine == sid)
        if rows.size == 0:
            continue
        r0, r1, c0, c1 = rows.min(), rows.max(), cols.min(), cols.max()
        boxes.append(Box(int(sid), int(segments[sid]),
                         (c0 + c1 + 1) / 2 / w, (r0 + r1 + 1) / 2 / h,
                         (c1 - c0 + 1) / w, (r1 - r0 + 1) / h))
    return boxes


# -- simulated mask generator ----------------------------------------------------

def _signed_distance(mask: np.ndarray) -> np.ndarray:
    if mask.all():
        return np.full(mask.shape, float(sum(mask.shape)))
    if not mask.any():
        return np.full(mask.shape, -float(sum(mask.shape)))
    return ndimage.distance_transform_edt(mask) - ndimage.distance_transform_edt(~mask)


def _smooth_field(shape: tuple, rng, correlation: float = 2.0) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.normal(size=shape), correlation, mode="wrap")
    std = field_.std()
    return field_ / std if std > 0 else field_


def soft_mask(mask: np.ndarray, sigma: float, sharpness: float, rng) -> np.ndarray:
    """Boundary-jittered soft version of a binary mask, values in [0, 1]."""
    sd = _signed_distance(mask)
    if sigma > 0:
        sd = sd + sigma * _smooth_field(mask.shape, rng)
    return 1.0 / (1.0 + np.exp(-np.clip(sd / sharpness, -60, 60)))


def class_scores(true_class: int, k: int, noise: ProposalNoise, rng) -> tuple:
    """Score row over K classes plus no-object; returns ``(row, reported_class)``."""
    cls = true_class
    if k > 1 and rng.random() < noise.corruption_rate:
        others = [c for c in range(k) if c != true_class]
        cls = others[rng.integers(len(others))]
    if noise.temperature == 0:
        probs = np.zeros(k)
        probs[cls] = 1.0
    else:
        logits = np.zeros(k)
        logits[cls] = 1.0 / noise.temperature
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
    row = np.append(probs * (1.0 - noise.null_score), noise.null_score)
    return row, cls


def synth_proposals(ann: AnnotatedImage, num_classes: int, noise: ProposalNoise,
                    seed: int = 0, index: int = 0) -> ProposalSet:
    """One proposal per ground-truth segment, plus optional distractors."""
    rng = _image_rng(seed, index, stream=1)
    masks, rows = [], []
    for sid in sorted(ann.segments):
        region = ann.fine == sid
        masks.append(soft_mask(region, noise.jitter_sigma, noise.mask_sharpness, rng))
        row, _ = class_scores(ann.segments[sid], num_classes, noise, rng)
        rows.append(row)
    h, w = ann.hw
    for _ in range(noise.distractors):
        rr, cc = np.mgrid[0:h, 0:w]
        cy, cx, r = rng.integers(0, h), rng.integers(0, w), rng.integers(3, max(4, min(h, w) // 4))
        blob = (rr - cy) ** 2 + (cc - cx) ** 2 <= r * r
        masks.append(soft_mask(blob, noise.jitter_sigma, noise.mask_sharpness, rng))
        probs = rng.dirichlet(np.ones(num_classes))
        rows.append(np.append(probs * 0.1, 0.9))
    masks_arr = np.asarray(masks, dtype=np.float32).reshape(-1, h, w)
    scores = np.asarray(rows, dtype=np.float64).reshape(-1, num_classes + 1)
    return ProposalSet(masks_arr, scores, ann.image_id)


def with_noise(cfg: SynthConfig, **changes) -> SynthConfig:
    return replace(cfg, proposal_noise=replace(cfg.proposal_noise, **changes))
