"""mIoU, PQ and mask AP, plus ground-truth relabelling for upper-bound runs.

Dataset-level numbers accumulate integer counts (confusion, matches, ranked
detections) across images and divide once at the end. When nothing can be
scored (no labelled gt pixel, no segment, no gt instance) the value is 1.0 for
an empty prediction and 0.0 otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pipeline import EmptyProposalError, assemble, highest_value_point
from .structures import VOID_LABEL, GroundTruth, ProposalSet, SegResult, Taxonomy

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class MetricReport:
    task: str
    value: float
    per_class: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"task": self.task, "value": self.value,
                "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
                "counts": dict(self.counts), "extra": dict(self.extra)}


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


# -- mIoU ----------------------------------------------------------------------------

class SemanticAccumulator:
    def __init__(self, num_classes: int):
        self.k = num_classes
        self.inter = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)
        self.present = np.zeros(num_classes, dtype=bool)
        self.predicted_any = False

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
        valid = gt != VOID_LABEL
        if np.any((gt[valid] < 0) | (gt[valid] >= self.k)):
            raise ValueError("gt class id out of range")
        p, g = pred[valid], gt[valid]
        self.predicted_any |= bool(p.size)
        for c in range(self.k):
            pc, gc = p == c, g == c
            self.inter[c] += np.count_nonzero(pc & gc)
            self.union[c] += np.count_nonzero(pc | gc)
            self.present[c] |= bool(gc.any())

    def report(self) -> MetricReport:
        per_class = {c: float(self.inter[c] / self.union[c]) for c in range(self.k) if self.present[c]}
        value = float(np.mean(list(per_class.values()))) if per_class else 1.0
        return MetricReport("semantic", value, per_class,
                            {"intersection": self.inter.tolist(), "union": self.union.tolist()})


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> MetricReport:
    acc = SemanticAccumulator(num_classes)
    acc.add(pred, gt)
    return acc.report()


# -- PQ ------------------------------------------------------------------------------

class PanopticAccumulator:
    """Match statistics per class; segment id 0 is void on both sides."""

    def __init__(self):
        self.tp, self.fp, self.fn = {}, {}, {}
        self.iou_sum = {}

    def _bump(self, table: dict, cls: int, amount=1) -> None:
        table[cls] = table.get(cls, 0) + amount

    def add(self, pred: tuple, gt: tuple) -> None:
        p_ids, p_table = pred
        g_ids, g_table = gt
        p_ids, g_ids = np.asarray(p_ids), np.asarray(g_ids)
        if p_ids.shape != g_ids.shape:
            raise ValueError(f"shape mismatch: {p_ids.shape} vs {g_ids.shape}")
        for ids, table, side in ((p_ids, p_table, "pred"), (g_ids, g_table, "gt")):
            unknown = set(np.unique(ids).tolist()) - set(table) - {0}
            if unknown:
                raise ValueError(f"malformed panoptic {side} map: ids {sorted(unknown)} missing from table")
        # joint histogram of (gt id, pred id)
        g_flat, p_flat = g_ids.ravel().astype(np.int64), p_ids.ravel().astype(np.int64)
        stride = int(p_flat.max()) + 1
        keys, counts = np.unique(g_flat * stride + p_flat, return_counts=True)
        inter = {(int(key // stride), int(key % stride)): int(n) for key, n in zip(keys, counts)}
        g_area, p_area = {s: 0 for s in g_table}, {s: 0 for s in p_table}
        for (g, p), n in inter.items():
            if g in g_area:
                g_area[g] += n
            if p in p_area:
                p_area[p] += n
        matched_g, matched_p = set(), set()
        for (g, p), n in sorted(inter.items()):
            if g == 0 or p == 0 or g_table[g][0] != p_table[p][0]:
                continue
            union = p_area[p] + g_area[g] - n - inter.get((0, p), 0)
            value = n / union
            if value > 0.5:
                assert g not in matched_g and p not in matched_p, "IoU > 0.5 matching must be unique"
                matched_g.add(g)
                matched_p.add(p)
                cls = g_table[g][0]
                self._bump(self.tp, cls)
                self._bump(self.iou_sum, cls, value)
        for g, (cls, _) in g_table.items():
            if g not in matched_g and g_area[g] > 0:
                self._bump(self.fn, cls)
        for p, (cls, _) in p_table.items():
            if p in matched_p or p_area[p] == 0:
                continue
            if inter.get((0, p), 0) / p_area[p] > 0.5:
                continue  # mostly on void: ignored
            self._bump(self.fp, cls)

    def report(self) -> MetricReport:
        classes = sorted(set(self.tp) | set(self.fp) | set(self.fn))
        per_class, sq, rq = {}, {}, {}
        for c in classes:
            tp, fp, fn = self.tp.get(c, 0), self.fp.get(c, 0), self.fn.get(c, 0)
            denom = tp + 0.5 * fp + 0.5 * fn
            per_class[c] = self.iou_sum.get(c, 0.0) / denom
            sq[c] = self.iou_sum.get(c, 0.0) / tp if tp else 0.0
            rq[c] = tp / denom
        value = float(np.mean(list(per_class.values()))) if classes else 1.0
        counts = {"tp": sum(self.tp.values()), "fp": sum(self.fp.values()), "fn": sum(self.fn.values())}
        extra = {"sq": float(np.mean(list(sq.values()))) if classes else 1.0,
                 "rq": float(np.mean(list(rq.values()))) if classes else 1.0}
        return MetricReport("panoptic", value, per_class, counts, extra)


def pq(pred: SegResult, gt: GroundTruth) -> MetricReport:
    acc = PanopticAccumulator()
    acc.add(pred.panoptic, gt.panoptic)
    return acc.report()


# -- AP ------------------------------------------------------------------------------

class InstanceAccumulator:
    """Score-ranked detections per class with per-threshold match flags."""

    def __init__(self, thresholds=IOU_THRESHOLDS):
        self.thresholds = tuple(thresholds)
        self.detections = {}   # class -> list of (score, flags)
        self.num_gt = {}

    def add(self, predictions: list, gt_instances: list) -> None:
        by_class = {}
        for mask, cls in gt_instances:
            by_class.setdefault(int(cls), []).append(np.asarray(mask, dtype=bool))
            self.num_gt[int(cls)] = self.num_gt.get(int(cls), 0) + 1
        preds = {}
        for mask, cls, score in predictions:
            preds.setdefault(int(cls), []).append((float(score), np.asarray(mask, dtype=bool)))
        for cls, dets in preds.items():
            gts = by_class.get(cls, [])
            order = sorted(range(len(dets)), key=lambda i: -dets[i][0])
            ious = np.array([[iou(dets[i][1], g) for g in gts] for i in order]).reshape(len(order), len(gts))
            flags = np.zeros((len(order), len(self.thresholds)), dtype=bool)
            for t, thr in enumerate(self.thresholds):
                taken = np.zeros(len(gts), dtype=bool)
                for row in range(len(order)):
                    best, best_iou = -1, thr
                    for j in range(len(gts)):
                        if not taken[j] and ious[row, j] >= best_iou:
                            best, best_iou = j, ious[row, j]
                    if best >= 0:
                        taken[best] = True
                        flags[row, t] = True
            store = self.detections.setdefault(cls, [])
            store.extend((dets[i][0], flags[row]) for row, i in enumerate(order))

    @staticmethod
    def interpolated_ap(scores: np.ndarray, tp: np.ndarray, num_gt: int) -> np.ndarray:
        """101-point interpolated AP; ``tp`` is detections × thresholds (or a vector)."""
        tp = np.asarray(tp, dtype=np.float64)
        squeeze = tp.ndim == 1
        tp = tp.reshape(len(tp), -1)[np.argsort(-np.asarray(scores), kind="mergesort")]
        ctp = np.cumsum(tp, axis=0)
        rank = np.arange(1, len(tp) + 1, dtype=np.float64)[:, None]
        recall, precision = ctp / num_gt, ctp / rank
        envelope = np.maximum.accumulate(precision[::-1], axis=0)[::-1]
        out = np.empty(tp.shape[1])
        for t in range(tp.shape[1]):
            idx = np.searchsorted(recall[:, t], RECALL_POINTS, side="left")
            hit = idx < len(tp)
            out[t] = np.where(hit, envelope[np.minimum(idx, len(tp) - 1), t], 0.0).sum() / len(RECALL_POINTS)
        return float(out[0]) if squeeze else out

    def report(self) -> MetricReport:
        per_class, per_threshold = {}, np.zeros(len(self.thresholds))
        classes = sorted(c for c, n in self.num_gt.items() if n > 0)
        for c in classes:
            dets = self.detections.get(c, [])
            if not dets:
                per_class[c] = 0.0
                continue
            scores = np.array([d[0] for d in dets])
            flags = np.array([d[1] for d in dets])
            aps = self.interpolated_ap(scores, flags, self.num_gt[c])
            per_threshold += aps
            per_class[c] = float(np.mean(aps))
        if classes:
            value = float(np.mean(list(per_class.values())))
            per_threshold = per_threshold / len(classes)
        else:
            value = 1.0 if not any(self.detections.values()) else 0.0
        extra = {f"ap{int(round(t * 100))}": float(v) for t, v in zip(self.thresholds, per_threshold)}
        counts = {"gt": sum(self.num_gt.values()), "detections": sum(len(v) for v in self.detections.values())}
        return MetricReport("instance", value, per_class, counts, extra)


def ap(pred: SegResult, gt: GroundTruth, iou_thresholds=IOU_THRESHOLDS) -> MetricReport:
    acc = InstanceAccumulator(iou_thresholds)
    acc.add(pred.instances, gt.instances)
    return acc.report()


# -- dispatch ------------------------------------------------------------------------

class Evaluator:
    """Accumulates one task over many images."""

    def __init__(self, task: str, num_classes: int):
        self.task = task
        if task == "semantic":
            self.acc = SemanticAccumulator(num_classes)
        elif task == "panoptic":
            self.acc = PanopticAccumulator()
        elif task == "instance":
            self.acc = InstanceAccumulator()
        else:
            raise ValueError(f"unknown task {task!r}")

    def add(self, pred: SegResult, gt: GroundTruth) -> None:
        if pred.task != self.task:
            raise ValueError(f"task mismatch: {pred.task} result for a {self.task} evaluator")
        if self.task == "semantic":
            self.acc.add(pred.semantic_map, gt.semantic_map)
        elif self.task == "panoptic":
            self.acc.add(pred.panoptic, gt.panoptic)
        else:
            self.acc.add(pred.instances, gt.instances)

    def report(self) -> MetricReport:
        return self.acc.report()


def evaluate(pred: SegResult, gt: GroundTruth, num_classes: int) -> MetricReport:
    ev = Evaluator(pred.task, num_classes)
    ev.add(pred, gt)
    return ev.report()


def evaluate_dataset(pairs, taxonomy: Taxonomy, tasks=("semantic", "panoptic", "instance"),
                     **assemble_kwargs) -> dict:
    """``pairs`` yields ``(ProposalSet, GroundTruth)``; returns ``{task: MetricReport}``."""
    evaluators = {t: Evaluator(t, len(taxonomy)) for t in tasks}
    for proposals, gt in pairs:
        for task, ev in evaluators.items():
            ev.add(assemble(proposals, taxonomy, task, **assemble_kwargs.get(task, {})), gt)
    return {t: ev.report() for t, ev in evaluators.items()}


# -- upper bound ---------------------------------------------------------------------

UPPER_BOUND_MODES = ("point", "mask")


def upper_bound_relabel(proposals: ProposalSet, gt: GroundTruth, mode: str) -> tuple:
    """Replace every proposal's scores by a one-hot gt label.

    Returns ``(relabelled ProposalSet, dropped count)``. ∅-labelled proposals
    are kept with all their mass on the no-object column.
    """
    if mode not in UPPER_BOUND_MODES:
        raise ValueError(f"unknown upper-bound mode {mode!r}")
    k = proposals.num_classes
    segments = gt.segment_masks
    ids, table = gt.panoptic
    keep, rows = [], []
    for i, mask in enumerate(proposals.masks):
        try:
            r, c = highest_value_point(mask)
        except EmptyProposalError:
            continue
        label = -1
        if mode == "point":
            label = int(gt.semantic_map[r, c])
        else:
            binary = mask >= 0.5
            best = 0.0
            for sid in sorted(segments):
                value = iou(binary, segments[sid])
                if value > best:
                    best, label = value, int(table[sid][0])
        row = np.zeros(k + 1)
        row[k if label == VOID_LABEL else label] = 1.0
        keep.append(i)
        rows.append(row)
    h, w = proposals.hw
    masks = proposals.masks[keep] if keep else np.zeros((0, h, w), proposals.masks.dtype)
    scores = np.asarray(rows).reshape(-1, k + 1)
    return ProposalSet(masks, scores, proposals.image_id), proposals.num_proposals - len(keep)
