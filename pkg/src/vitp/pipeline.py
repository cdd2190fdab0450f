"""Inference glue: point selection, score fusion and segmentation assembly."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage

from .structures import VOID_LABEL, ProposalSet, SegResult, Taxonomy

POINT_RULES = ("highest", "central", "random")


class EmptyProposalError(ValueError):
    """A proposal mask has no usable pixel."""


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.4
    epsilon_floor: float = 1e-12

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.epsilon_floor <= 0:
            raise ValueError("epsilon_floor must be positive")


# -- point selection -------------------------------------------------------------

def highest_value_point(mask: np.ndarray) -> tuple:
    """Argmax pixel; ties go to the smallest row, then the smallest column."""
    mask = np.asarray(mask)
    if mask.size == 0 or mask.max() <= 0:
        raise EmptyProposalError("empty proposal")
    return divmod(int(np.argmax(mask)), mask.shape[1])


def taxicab_distance(mask: np.ndarray) -> np.ndarray:
    """4-connected distance to the nearest pixel outside ``mask``; the image border counts as outside."""
    padded = np.pad(np.asarray(mask, dtype=bool), 1, constant_values=False)
    return ndimage.distance_transform_cdt(padded, metric="taxicab")[1:-1, 1:-1]


def central_point(mask: np.ndarray, bin_threshold: float = 0.5) -> tuple:
    """Pixel farthest (4-connected) from the binarised mask's boundary or the image border."""
    binary = np.asarray(mask) >= bin_threshold
    if not binary.any():
        raise EmptyProposalError("empty proposal")
    dist = taxicab_distance(binary)
    return divmod(int(np.argmax(dist)), binary.shape[1])


def random_point(mask: np.ndarray, bin_threshold: float = 0.5, rng=None) -> tuple:
    binary = np.asarray(mask) >= bin_threshold
    support = np.flatnonzero(binary)
    if support.size == 0:
        raise EmptyProposalError("empty proposal")
    rng = np.random.default_rng(0) if rng is None else rng
    return divmod(int(support[rng.integers(support.size)]), binary.shape[1])


def select_point(mask: np.ndarray, rule: str, rng=None, bin_threshold: float = 0.5) -> tuple:
    if rule == "highest":
        return highest_value_point(mask)
    if rule == "central":
        return central_point(mask, bin_threshold)
    if rule == "random":
        return random_point(mask, bin_threshold, rng)
    raise ValueError(f"unknown point rule {rule!r}")


# -- score fusion ------------------------------------------------------------------

def split_no_object(y: np.ndarray) -> tuple:
    """Drop the trailing no-object column; returns ``(C_m, null_scores)``."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] < 2:
        raise ValueError(f"expected N×(K+1) scores with K >= 1, got {y.shape}")
    classes, null = y[:, :-1], y[:, -1].copy()
    mass = classes.sum(axis=1)
    if np.any(np.all(classes <= 0, axis=1)):
        raise ValueError("degenerate proposal row")
    return classes / mass[:, None], null


def fuse(c_m: np.ndarray, c_p: np.ndarray, cfg: FusionConfig = FusionConfig()) -> np.ndarray:
    """Geometric ensemble ``C_m^(1-alpha) * C_p^alpha``, rows renormalised."""
    c_m = np.asarray(c_m, dtype=np.float64)
    c_p = np.asarray(c_p, dtype=np.float64)
    if c_m.shape != c_p.shape:
        raise ValueError(f"shape mismatch: {c_m.shape} vs {c_p.shape}")
    fused = (np.power(np.maximum(c_m, cfg.epsilon_floor), 1.0 - cfg.alpha)
             * np.power(np.maximum(c_p, cfg.epsilon_floor), cfg.alpha))
    return fused / fused.sum(axis=1, keepdims=True)


def reattach_no_object(c_fuse: np.ndarray, null_scores: np.ndarray) -> np.ndarray:
    """Append the no-object column, keeping its share of each row."""
    c_fuse = np.asarray(c_fuse, dtype=np.float64)
    null = np.asarray(null_scores, dtype=np.float64).reshape(-1)
    if c_fuse.shape[0] != null.shape[0]:
        raise ValueError(f"{c_fuse.shape[0]} rows vs {null.shape[0]} no-object scores")
    rows = c_fuse / c_fuse.sum(axis=1, keepdims=True)
    return np.concatenate([rows * (1.0 - null[:, None]), null[:, None]], axis=1)


def classify_proposals(image, proposals: ProposalSet, predict: Callable, point_rule: str = "highest",
                       cfg: FusionConfig = FusionConfig(), rng=None) -> tuple:
    """Re-score every proposal with the point classifier.

    ``predict(image, PointBatch) -> N×K`` class probabilities. Returns the fused
    :class:`ProposalSet` and the number of proposals dropped as empty.
    """
    from .model import PointBatch, PointPrompt

    h, w = proposals.hw
    keep, prompts = [], []
    for i, mask in enumerate(proposals.masks):
        try:
            r, c = select_point(mask, point_rule, rng=rng)
        except EmptyProposalError:
            continue
        keep.append(i)
        prompts.append(PointPrompt.from_pixel(r, c, h, w))
    dropped = proposals.num_proposals - len(keep)
    k = proposals.num_classes
    if not keep:
        return ProposalSet(np.zeros((0, h, w), proposals.masks.dtype), np.zeros((0, k + 1)),
                           proposals.image_id), dropped
    y = proposals.class_scores[keep]
    c_m, null = split_no_object(y)
    c_p = np.asarray(predict(image, PointBatch(prompts)), dtype=np.float64)
    fused = reattach_no_object(fuse(c_m, c_p, cfg), null)
    return ProposalSet(proposals.masks[keep], fused, proposals.image_id), dropped


# -- segmentation assembly ---------------------------------------------------------

def semantic_inference(proposals: ProposalSet) -> SegResult:
    """Per pixel, argmax over classes of ``sum_i score[i, k] * mask_i``."""
    h, w = proposals.hw
    if proposals.num_proposals == 0:
        return SegResult("semantic", semantic_map=np.full((h, w), VOID_LABEL, dtype=np.int64))
    scores = proposals.class_scores[:, :-1]
    masks = proposals.masks.astype(np.float64)
    mass = np.einsum("nk,nhw->khw", scores, masks)
    labels = mass.argmax(axis=0).astype(np.int64)
    labels[mass.sum(axis=0) <= 0] = VOID_LABEL
    return SegResult("semantic", semantic_map=labels)


def panoptic_inference(proposals: ProposalSet, taxonomy: Taxonomy, object_thresh: float = 0.8,
                       overlap_thresh: float = 0.8) -> SegResult:
    h, w = proposals.hw
    ids = np.zeros((h, w), dtype=np.int64)
    table = {}
    scores = proposals.class_scores[:, :-1]
    prob, labels = scores.max(axis=1), scores.argmax(axis=1)
    keep = np.flatnonzero(prob >= object_thresh)
    if keep.size == 0:
        return SegResult("panoptic", panoptic=(ids, table))
    masks = proposals.masks[keep].astype(np.float64)
    owner = (prob[keep][:, None, None] * masks).argmax(axis=0)
    stuff_ids = {}
    for j, i in enumerate(keep):
        binary = masks[j] >= 0.5
        original = int(binary.sum())
        region = (owner == j) & binary
        area = int(region.sum())
        if original == 0 or area == 0 or area / original < overlap_thresh:
            continue
        cls = int(labels[i])
        thing = taxonomy.is_thing(cls)
        if not thing and cls in stuff_ids:
            ids[region] = stuff_ids[cls]
            continue
        sid = len(table) + 1
        table[sid] = (cls, thing)
        ids[region] = sid
        if not thing:
            stuff_ids[cls] = sid
    return SegResult("panoptic", panoptic=(ids, table))


def instance_inference(proposals: ProposalSet, taxonomy: Taxonomy, score_thresh: float = 0.05) -> SegResult:
    """Scored thing instances, highest score first."""
    found = []
    for i, mask in enumerate(proposals.masks):
        binary = mask >= 0.5
        if not binary.any():
            continue
        quality = float(mask[binary].astype(np.float64).mean())
        for cls in taxonomy.thing_ids:
            score = float(proposals.class_scores[i, cls]) * quality
            if score >= score_thresh:
                found.append((binary, cls, score))
    found.sort(key=lambda item: -item[2])
    return SegResult("instance", instances=found)


def assemble(proposals: ProposalSet, taxonomy: Taxonomy, task: str, **kwargs) -> SegResult:
    if task == "semantic":
        return semantic_inference(proposals)
    if task == "panoptic":
        return panoptic_inference(proposals, taxonomy, **kwargs)
    if task == "instance":
        return instance_inference(proposals, taxonomy, **kwargs)
    raise ValueError(f"unknown task {task!r}")
