"""Grid target assignment, the composite detection loss, decoding and NMS.

Prediction layout per cell is ``B`` slots of ``5 + K`` raw channels:
``tx, ty, tw, th, objectness, class_0 .. class_{K-1}``. Every channel is
passed through a sigmoid. Centres are cell-relative, sizes are relative to
the whole image::

    cx = (col + sigmoid(tx)) / S      w = sigmoid(tw)
    cy = (row + sigmoid(ty)) / S      h = sigmoid(th)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from simdet.diffcore.tensor import Tensor, graph_node, sigmoid_array
from simdet.errors import ConfigurationError
from simdet.geometry import BBox, ciou_arrays, ciou_grad_arrays, pairwise_iou

log = logging.getLogger(__name__)

BCE_EPS = 1e-7
DEFAULT_LAMBDA_NOOBJ = 0.5
NMS_IOU = 0.45


@dataclass
class TargetGrid:
    S: int
    B: int
    obj_mask: np.ndarray  # (S, S, B) bool
    gt_boxes: np.ndarray  # (S, S, B, 4), zeros where unassigned
    gt_class: np.ndarray  # (S, S, B) int, -1 where unassigned
    dropped: int = 0
    skipped: int = 0

    @property
    def noobj_mask(self) -> np.ndarray:
        return ~self.obj_mask

    def assigned(self) -> list[tuple[int, int, int, int, BBox]]:
        """``(row, col, slot, class, box)`` for every occupied slot."""
        out = []
        for r, c, s in zip(*np.nonzero(self.obj_mask)):
            out.append((int(r), int(c), int(s), int(self.gt_class[r, c, s]), BBox(*self.gt_boxes[r, c, s])))
        return out


@dataclass
class LossReport:
    ciou: float
    obj: float
    noobj: float
    cls: float
    total: float
    lambda_noobj: float
    tensor: Tensor | None = field(default=None, repr=False)
    alpha: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True)
class Detection:
    cls: int
    box: BBox
    confidence: float


def assign_targets(gt: Sequence[tuple[int, BBox]], S: int, B: int) -> TargetGrid:
    """Place each ground-truth box in the cell holding its centre, first free slot."""
    obj = np.zeros((S, S, B), dtype=bool)
    boxes = np.zeros((S, S, B, 4), dtype=np.float64)
    classes = np.full((S, S, B), -1, dtype=np.int64)
    dropped = skipped = 0
    for cls, box in gt:
        if not (0 <= box.cx < 1 and 0 <= box.cy < 1) or box.area <= 0:
            skipped += 1
            continue
        row, col = int(box.cy * S), int(box.cx * S)
        free = np.flatnonzero(~obj[row, col])
        if free.size == 0:
            dropped += 1
            continue
        slot = int(free[0])
        obj[row, col, slot] = True
        boxes[row, col, slot] = box.as_array()
        classes[row, col, slot] = cls
    if dropped or skipped:
        log.warning("assign_targets: %d box(es) dropped (cell full), %d skipped (invalid centre/area)", dropped, skipped)
    return TargetGrid(S, B, obj, boxes, classes, dropped, skipped)


def _cell_offsets(S: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.meshgrid(np.arange(S, dtype=np.float64), np.arange(S, dtype=np.float64), indexing="ij")
    return rows[..., None], cols[..., None]


def decode_boxes(act: np.ndarray) -> np.ndarray:
    """Activated slots ``(..., S, S, B, 5+K)`` to normalized boxes ``(..., S, S, B, 4)``."""
    S = act.shape[-3]
    rows, cols = _cell_offsets(S)
    cx = (cols + act[..., 0]) / S
    cy = (rows + act[..., 1]) / S
    return np.stack([cx, cy, act[..., 2], act[..., 3]], axis=-1)


def _bce(p: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamped binary cross-entropy and its derivative with respect to ``p``."""
    pc = np.clip(p, BCE_EPS, 1 - BCE_EPS)
    loss = -(t * np.log(pc) + (1 - t) * np.log(1 - pc))
    inside = (p > BCE_EPS) & (p < 1 - BCE_EPS)
    dp = np.where(inside, -t / pc + (1 - t) / (1 - pc), 0.0)
    return loss, dp


def _stack_targets(targets: Sequence[TargetGrid]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        np.stack([t.obj_mask for t in targets]),
        np.stack([t.gt_boxes for t in targets]),
        np.stack([t.gt_class for t in targets]),
    )


def total_loss(
    pred: Tensor,
    target: TargetGrid | Sequence[TargetGrid],
    lambda_noobj: float = DEFAULT_LAMBDA_NOOBJ,
    alpha: np.ndarray | None = None,
) -> LossReport:
    """Composite loss: CIoU + objectness BCE + weighted no-object BCE + class BCE.

    Components are summed over slots of an image. For a batch (``pred`` of
    rank 4 and a list of targets) every field is the batch mean. The scalar
    ``report.tensor`` is attached to ``pred``'s graph.

    ``alpha`` pins the CIoU trade-off weights (one per occupied slot, in
    ``np.nonzero`` order); the report carries the values actually used.
    """
    batched = pred.data.ndim == 4
    targets = list(target) if batched else [target]
    raw = pred.data if batched else pred.data[None]
    N, S = raw.shape[0], raw.shape[1]
    if len(targets) != N:
        raise ConfigurationError(f"{N} predictions but {len(targets)} targets")
    t0 = targets[0]
    if raw.shape[1:3] != (t0.S, t0.S) or raw.shape[3] % t0.B:
        raise ConfigurationError(f"prediction shape {pred.shape} inconsistent with S={t0.S}, B={t0.B}")
    B = t0.B
    C = raw.shape[3] // B
    K = C - 5
    if K < 1:
        raise ConfigurationError(f"prediction has {C} channels per slot; need at least 6")
    z = raw.astype(np.float64).reshape(N, S, S, B, C)
    p = sigmoid_array(z)
    obj, gt_boxes, gt_cls = _stack_targets(targets)
    if obj.shape != (N, S, S, B):
        raise ConfigurationError("targets disagree on grid size or slots per cell")
    noobj = ~obj
    dp = np.zeros_like(p)

    # box regression on occupied slots
    boxes = decode_boxes(p)
    pb = boxes[obj]
    gb = gt_boxes[obj]
    terms = ciou_arrays(pb, gb, alpha)
    ciou_sum = float(terms.loss.sum())
    g_box = ciou_grad_arrays(pb, gb, terms.alpha)
    g_box[:, :2] /= S  # d centre / d offset
    dp_obj = dp[obj]
    dp_obj[:, :4] = g_box
    dp[obj] = dp_obj

    # objectness
    bce_obj, d_obj = _bce(p[..., 4], np.ones_like(p[..., 4]))
    bce_noobj, d_noobj = _bce(p[..., 4], np.zeros_like(p[..., 4]))
    obj_sum = float(bce_obj[obj].sum())
    noobj_sum = float(bce_noobj[noobj].sum())
    dp[..., 4] = np.where(obj, d_obj, lambda_noobj * d_noobj)

    # per-class binary cross-entropy on occupied slots
    onehot = np.zeros((N, S, S, B, K))
    idx = np.nonzero(obj)
    onehot[idx + (gt_cls[obj],)] = 1.0
    bce_cls, d_cls = _bce(p[..., 5:], onehot)
    cls_sum = float(bce_cls[obj].sum())
    dp[..., 5:] = np.where(obj[..., None], d_cls, 0.0)

    total = ciou_sum + obj_sum + lambda_noobj * noobj_sum + cls_sum
    dz = (dp * p * (1 - p) / N).reshape(raw.shape)
    if not batched:
        dz = dz[0]
    dtype = pred.data.dtype
    scalar = graph_node(np.asarray(total / N, dtype=dtype), (pred,), lambda g: ((g * dz).astype(dtype),))
    return LossReport(
        ciou=ciou_sum / N,
        obj=obj_sum / N,
        noobj=noobj_sum / N,
        cls=cls_sum / N,
        total=total / N,
        lambda_noobj=lambda_noobj,
        tensor=scalar,
        alpha=np.asarray(terms.alpha, dtype=np.float64).copy(),
    )


def activate(pred) -> np.ndarray:
    data = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    return sigmoid_array(data.astype(np.float64))


def decode_arrays(
    pred, num_boxes: int, conf_thresh: float, raw: bool = True
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized decode of one image: ``(classes, confidences, boxes)``."""
    data = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    S = data.shape[0]
    act = activate(data) if raw else data.astype(np.float64)
    act = act.reshape(S, S, num_boxes, -1)
    cls_scores = act[..., 5:]
    cls = np.argmax(cls_scores, axis=-1)  # first maximum on ties
    conf = act[..., 4] * np.max(cls_scores, axis=-1)
    keep = conf > conf_thresh
    boxes = decode_boxes(act)
    # row-major over (row, col, slot)
    return cls[keep].astype(np.int64), conf[keep], boxes[keep]


def decode_predictions(pred, conf_thresh: float, num_boxes: int = 2, raw: bool = True) -> list[Detection]:
    """Detections whose ``objectness * best class score`` exceeds ``conf_thresh``."""
    if not 0 <= conf_thresh <= 1:
        raise ConfigurationError(f"conf_thresh must lie in [0, 1], got {conf_thresh}")
    cls, conf, boxes = decode_arrays(pred, num_boxes, conf_thresh, raw)
    return [Detection(int(c), BBox(*b), float(s)) for c, s, b in zip(cls, conf, boxes)]


def encode_box(box: BBox, S: int) -> tuple[int, int, np.ndarray]:
    """Ideal raw logits ``(tx, ty, tw, th)`` for ``box`` in its centre cell."""
    row, col = int(box.cy * S), int(box.cx * S)
    eps = 1e-12
    vals = np.clip([box.cx * S - col, box.cy * S - row, box.w, box.h], eps, 1 - eps)
    return row, col, np.log(vals) - np.log1p(-vals)


def nms(dets: Sequence[Detection], iou_thresh: float = NMS_IOU) -> list[Detection]:
    """Greedy per-class non-maximum suppression, highest confidence first."""
    if not dets:
        return []
    cls = np.array([d.cls for d in dets])
    conf = np.array([d.confidence for d in dets])
    boxes = np.array([d.box.as_array() for d in dets])
    keep = nms_arrays(cls, conf, boxes, iou_thresh)
    return [dets[i] for i in keep]


def nms_arrays(cls: np.ndarray, conf: np.ndarray, boxes: np.ndarray, iou_thresh: float = NMS_IOU) -> np.ndarray:
    """Indices kept by greedy per-class NMS, in descending confidence order."""
    order = np.argsort(-conf, kind="stable")
    keep: list[int] = []
    if order.size == 0:
        return np.array(keep, dtype=np.int64)
    ious = pairwise_iou(boxes, boxes)
    suppressed = np.zeros(len(conf), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= (cls == cls[i]) & (ious[i] > iou_thresh)
    return np.array(keep, dtype=np.int64)

