"""Data records shared across the pipeline, metrics, synthesis and file formats."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VOID_ID = 65535  # unlabeled pixel in 16-bit instance maps
VOID_LABEL = -1  # unlabeled pixel in semantic label maps
TASKS = ("semantic", "instance", "panoptic")


@dataclass(frozen=True)
class ClassSpec:
    name: str
    is_thing: bool
    shape: str = "disk"
    color: tuple = (128, 128, 128)
    color_jitter: int = 20


@dataclass
class Taxonomy:
    classes: list

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def is_thing(self, class_id: int) -> bool:
        return bool(self.classes[class_id].is_thing)

    @property
    def thing_ids(self) -> list:
        return [i for i, c in enumerate(self.classes) if c.is_thing]

    @property
    def stuff_ids(self) -> list:
        return [i for i, c in enumerate(self.classes) if not c.is_thing]

    def to_dict(self) -> dict:
        return {"classes": [
            {"name": c.name, "is_thing": c.is_thing, "shape": c.shape,
             "color": list(c.color), "color_jitter": c.color_jitter}
            for c in self.classes]}

    @classmethod
    def from_dict(cls, d: dict) -> "Taxonomy":
        return cls([ClassSpec(c["name"], bool(c["is_thing"]), c.get("shape", "disk"),
                              tuple(c.get("color", (128, 128, 128))), int(c.get("color_jitter", 20)))
                    for c in d["classes"]])


@dataclass
class ProposalSet:
    """``N`` soft masks plus ``N×(K+1)`` class scores; the last column is "no object"."""

    masks: np.ndarray
    class_scores: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        self.masks = np.asarray(self.masks)
        self.class_scores = np.asarray(self.class_scores, dtype=np.float64)
        if self.masks.ndim != 3:
            raise ValueError(f"masks must be N×H×W, got {self.masks.shape}")
        n = self.masks.shape[0]
        if self.class_scores.ndim != 2 or self.class_scores.shape[0] != n or self.class_scores.shape[1] < 2:
            raise ValueError(f"class_scores must be {n}×(K+1) with K >= 1, got {self.class_scores.shape}")
        if n and (self.masks.min() < 0 or self.masks.max() > 1):
            raise ValueError("mask values must lie in [0, 1]")
        if n:
            sums = self.class_scores.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-4) or np.any(self.class_scores < 0):
                raise ValueError("class score rows must be non-negative and sum to 1 (+-1e-4)")

    @property
    def num_proposals(self) -> int:
        return self.masks.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_scores.shape[1] - 1

    @property
    def hw(self) -> tuple:
        return self.masks.shape[1:]


@dataclass
class SegResult:
    """Task-specific prediction.

    semantic: ``semantic_map`` H×W class ids (``VOID_LABEL`` for unlabeled).
    instance: ``instances`` list of ``(binary mask, class id, score)``.
    panoptic: ``panoptic`` pair ``(segment id map, {id: (class id, is_thing)})``,
    segment id 0 meaning unlabeled.
    """

    task: str
    semantic_map: np.ndarray | None = None
    instances: list | None = None
    panoptic: tuple | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        populated = {"semantic": self.semantic_map is not None,
                     "instance": self.instances is not None,
                     "panoptic": self.panoptic is not None}
        if not populated[self.task] or sum(populated.values()) != 1:
            raise ValueError(f"SegResult({self.task}) must populate exactly its own field")


@dataclass
class GroundTruth:
    """Reference annotation for one image.

    ``panoptic`` uses 0 for void; ``semantic_map`` uses ``VOID_LABEL``.
    """

    semantic_map: np.ndarray
    panoptic: tuple
    instances: list = field(default_factory=list)

    @property
    def segment_masks(self) -> dict:
        ids, table = self.panoptic
        return {sid: ids == sid for sid in sorted(table)}
