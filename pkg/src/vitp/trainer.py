"""Box pre-training, point fine-tuning and classifier evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .model import ModelConfig, PointBatch, PointPrompt, forward, predict_proba
from .optim import ParamStore, ScheduleConfig, SGD, clip_global_norm, global_grad_norm, lr_at
from .pipeline import POINT_RULES, select_point
from .structures import VOID_ID
from .synth import AnnotatedImage, soft_mask
from .tensor import NonFiniteError

log = logging.getLogger(__name__)

SOURCES = ("fine", "coarse", "box")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "point"
    annotation_sources: tuple = ("fine",)
    points_per_image: int = 64
    epochs: int = 10
    batch_size: int = 1
    base_lr: float = 1e-2
    warmup_steps: int = 1000
    clip_norm: float = 1.0
    momentum: float = 0.0
    resample_points: bool = True   # False keeps each image's points fixed across epochs
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "annotation_sources", tuple(sorted(set(self.annotation_sources))))
        src = set(self.annotation_sources)
        if self.stage == "box":
            if src != {"box"}:
                raise ValueError("box stage trains on box annotations only")
        elif self.stage == "point":
            if not src or not src <= {"fine", "coarse"}:
                raise ValueError("point stage needs a non-empty subset of {fine, coarse}")
        else:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.points_per_image < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("points_per_image and batch_size must be >= 1, epochs >= 0")

    def schedule(self, total_steps: int) -> ScheduleConfig:
        return ScheduleConfig(total_steps=total_steps, base_lr=self.base_lr,
                              warmup_steps=self.warmup_steps, clip_norm=self.clip_norm,
                              momentum=self.momentum)


# -- targets -----------------------------------------------------------------------

def sample_point_targets(ann: AnnotatedImage, source: str, n: int, rng) -> PointBatch:
    """``n`` labelled points drawn uniformly from the labelled pixels of one map."""
    if source not in ("fine", "coarse"):
        raise ValueError(f"point targets come from fine or coarse maps, not {source!r}")
    ids = ann.fine if source == "fine" else ann.coarse
    flat = ids.reshape(-1)
    labelled = np.flatnonzero(flat != VOID_ID)
    if labelled.size == 0:
        raise ValueError(f"image {ann.image_id} has no labelled {source} pixels")
    picks = labelled[rng.integers(0, labelled.size, size=n)]
    h, w = ids.shape
    rows, cols = np.divmod(picks, w)
    return PointBatch([PointPrompt.from_pixel(int(r), int(c), h, w, ann.segments[int(flat[p])])
                       for r, c, p in zip(rows, cols, picks)])


def box_targets(ann: AnnotatedImage, n: int, rng) -> PointBatch:
    """Every box once (in random order) while ``n`` allows, then uniform top-up."""
    boxes = ann.boxes
    if not boxes:
        raise ValueError(f"image {ann.image_id} has no boxes")
    order = list(rng.permutation(len(boxes)))
    picks = order[:n] + list(rng.integers(0, len(boxes), size=max(0, n - len(boxes))))
    return PointBatch([PointPrompt(boxes[i].x, boxes[i].y, boxes[i].w, boxes[i].h, boxes[i].class_id)
                       for i in picks])


def point_quota(n: int, sources: tuple, position: int) -> dict:
    """Split ``n`` points across sources; the odd point alternates per image."""
    if len(sources) == 1:
        return {sources[0]: n}
    first, second = sources
    big, small = (n + 1) // 2, n // 2
    return {first: big, second: small} if position % 2 == 0 else {first: small, second: big}


def targets_for(ann: AnnotatedImage, cfg: TrainConfig, position: int, rng) -> PointBatch:
    if cfg.stage == "box":
        return box_targets(ann, cfg.points_per_image, rng)
    prompts = []
    for source, count in point_quota(cfg.points_per_image, cfg.annotation_sources, position).items():
        if count:
            prompts.extend(sample_point_targets(ann, source, count, rng).prompts)
    return PointBatch(prompts)


# -- training loop -----------------------------------------------------------------

@dataclass
class TrainResult:
    params: ParamStore
    steps: list = field(default_factory=list)    # per-step records
    epochs: list = field(default_factory=list)   # per-epoch summaries


def steps_per_epoch(num_images: int, batch_size: int) -> int:
    return math.ceil(num_images / batch_size)


def train(params: ParamStore, images: list, model_cfg: ModelConfig, cfg: TrainConfig,
          eval_images: list | None = None, on_epoch: Callable | None = None) -> TrainResult:
    """Train ``params`` in place.

    ``on_epoch(epoch, summary)`` may return True to stop early.
    """
    result = TrainResult(params)
    if cfg.epochs == 0 or not images:
        return result
    per_epoch = steps_per_epoch(len(images), cfg.batch_size)
    schedule = cfg.schedule(per_epoch * cfg.epochs)
    opt = SGD(params, cfg.momentum)
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch, 7919]).permutation(len(images))
        losses, correct, seen = [], 0, 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            params.zero_grad()
            step_loss = 0.0
            for pos, idx in zip(range(start, start + len(chunk)), chunk):
                ann = images[idx]
                rng = np.random.default_rng([cfg.seed, epoch if cfg.resample_points else 0, int(idx)])
                batch = targets_for(ann, cfg, pos, rng)
                try:
                    logits = forward(ann.image, batch, params, model_cfg)
                    loss = T.cross_entropy(logits, batch.labels()) * (1.0 / len(chunk))
                    loss.backward()
                except NonFiniteError as exc:
                    raise TrainingError(f"non-finite value at step {step}: {exc}") from exc
                step_loss += loss.item()
                correct += int(np.sum(logits.data.argmax(axis=1) == np.asarray(batch.labels())))
                seen += len(batch)
            grad_norm = global_grad_norm(params)
            if not math.isfinite(grad_norm):
                raise TrainingError(f"non-finite gradient at step {step}")
            scale = clip_global_norm(params, schedule.clip_norm)
            lr = lr_at(step + 1, schedule)
            opt.step(lr)
            step += 1
            losses.append(step_loss)
            result.steps.append({"step": step, "lr": lr, "loss": step_loss,
                                 "grad_norm": grad_norm, "clip_scale": scale})
        summary = {"epoch": epoch + 1, "loss": float(np.mean(losses)),
                   "accuracy": correct / max(seen, 1), "lr": lr}
        if eval_images:
            summary["val_accuracy"] = eval_classifier(params, eval_images, model_cfg, "highest",
                                                    pad_to=cfg.points_per_image).overall
        result.epochs.append(summary)
        log.info("epoch %d loss %.4f acc %.3f", epoch + 1, summary["loss"], summary["accuracy"])
        if on_epoch is not None and on_epoch(epoch + 1, summary):
            break
    return result


# -- evaluation ----------------------------------------------------------------------

@dataclass
class AccuracyReport:
    overall: float
    per_class: dict
    counts: dict
    total: int

    def to_dict(self) -> dict:
        return asdict(self)


def segment_point(region: np.ndarray, rule: str, rng=None) -> tuple:
    """Pick a pixel inside a ground-truth segment.

    The highest-value rule needs a soft map, so the segment is first smoothed
    the same way simulated proposals are (without jitter).
    """
    if rule == "highest":
        return select_point(soft_mask(region, 0.0, 0.5, None).astype(np.float32), rule)
    return select_point(region.astype(np.float32), rule, rng=rng)


def eval_classifier(params: ParamStore, images: list, model_cfg: ModelConfig, point_rule: str = "highest",
                    seed: int = 0, predict: Callable | None = None, pad_to: int = 0) -> AccuracyReport:
    """Top-1 accuracy of classifying every ground-truth segment from one point.

    All segment points of an image go through the model together, padded with
    filler points to ``pad_to`` (see :func:`predict_proba`).
    ``predict(ann, batch) -> N×K scores`` replaces the model when given.
    """
    if point_rule not in POINT_RULES:
        raise ValueError(f"unknown point rule {point_rule!r}")
    hits, totals = {}, {}
    for ann in images:
        rng = np.random.default_rng([seed, int(ann.image_id or 0)])
        h, w = ann.hw
        sids = sorted(ann.segments)
        prompts = []
        for sid in sids:
            r, c = segment_point(ann.fine == sid, point_rule, rng)
            prompts.append(PointPrompt.from_pixel(r, c, h, w, ann.segments[sid]))
        if not prompts:
            continue
        batch = PointBatch(prompts)
        if predict is None:
            scores = predict_proba(ann.image, batch, params, model_cfg, pad_to, seed)
        else:
            scores = np.asarray(predict(ann, batch))
        for label, guess in zip(batch.labels(), scores.argmax(axis=1)):
            totals[label] = totals.get(label, 0) + 1
            hits[label] = hits.get(label, 0) + int(guess == label)
    total = sum(totals.values())
    overall = sum(hits.values()) / total if total else 0.0
    per_class = {c: hits[c] / totals[c] for c in sorted(totals)}
    return AccuracyReport(overall, per_class, {c: totals[c] for c in sorted(totals)}, total)
