"""Box arithmetic: IoU and the Complete-IoU regression loss with its gradient.

Boxes are normalized ``(cx, cy, w, h)``. The scalar API works on :class:`BBox`;
the ``*_arrays`` functions are the vectorized kernels used by the detection
loss and operate on ``(..., 4)`` float64 arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from simdet.errors import InvalidInputError

ASPECT_SCALE = 4.0 / math.pi**2


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in normalized center format."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InvalidInputError(f"BBox.{name} is not finite: {v!r}")
        if self.w < 0 or self.h < 0:
            raise InvalidInputError(f"BBox has negative size: w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        """Return ``(x1, y1, x2, y2)``."""
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def translated(self, dx: float, dy: float) -> "BBox":
        return BBox(self.cx + dx, self.cy + dy, self.w, self.h)


class CIoUBreakdown(NamedTuple):
    iou: float
    center_dist_sq: float
    enclosing_diag_sq: float
    upsilon: float
    alpha: float
    loss: float


# ---------------------------------------------------------------------------
# vectorized kernels


def _split(boxes: np.ndarray) -> tuple[np.ndarray, ...]:
    return boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]


def iou_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Element-wise IoU of two broadcastable ``(..., 4)`` arrays."""
    ax, ay, aw, ah = _split(np.asarray(a, dtype=np.float64))
    bx, by, bw, bh = _split(np.asarray(b, dtype=np.float64))
    ax1, ax2, ay1, ay2 = ax - aw / 2, ax + aw / 2, ay - ah / 2, ay + ah / 2
    bx1, bx2, by1, by2 = bx - bw / 2, bx + bw / 2, by - bh / 2, by + bh / 2
    iw = np.minimum(ax2, bx2) - np.maximum(ax1, bx1)
    ih = np.minimum(ay2, by2) - np.maximum(ay1, by1)
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    # areas from the same rounded corners keep iou(a, a) == 1 exactly
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.clip(out, 0.0, 1.0)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix of shape ``(len(a), len(b))``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return iou_arrays(a[:, None, :], b[None, :, :])


def _atan_ratio(w: np.ndarray, h: np.ndarray) -> np.ndarray:
    # arctan2 sends h == 0 (w > 0) to pi/2, the w/h -> inf limit
    return np.arctan2(w, h)


def upsilon_arrays(gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    _, _, gw, gh = _split(np.asarray(gt, dtype=np.float64))
    _, _, pw, ph = _split(np.asarray(pred, dtype=np.float64))
    return ASPECT_SCALE * (_atan_ratio(gw, gh) - _atan_ratio(pw, ph)) ** 2


def alpha_arrays(iou: np.ndarray, upsilon: np.ndarray) -> np.ndarray:
    iou = np.asarray(iou, dtype=np.float64)
    upsilon = np.asarray(upsilon, dtype=np.float64)
    denom = (1.0 - iou) + upsilon
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, upsilon / np.where(denom > 0, denom, 1.0), 0.0)


class CIoUArrays(NamedTuple):
    iou: np.ndarray
    center_dist_sq: np.ndarray
    enclosing_diag_sq: np.ndarray
    upsilon: np.ndarray
    alpha: np.ndarray
    loss: np.ndarray


def ciou_arrays(pred: np.ndarray, gt: np.ndarray, alpha: np.ndarray | None = None) -> CIoUArrays:
    """Vectorized CIoU terms.

    ``alpha`` pins the trade-off weight instead of deriving it from the
    current IoU and aspect term; gradient checks use this to evaluate the
    loss surface the analytic gradient actually describes.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    px, py, pw, ph = _split(pred)
    gx, gy, gw, gh = _split(gt)
    iou = iou_arrays(pred, gt)
    rho2 = (px - gx) ** 2 + (py - gy) ** 2
    cw = np.maximum(px + pw / 2, gx + gw / 2) - np.minimum(px - pw / 2, gx - gw / 2)
    ch = np.maximum(py + ph / 2, gy + gh / 2) - np.minimum(py - ph / 2, gy - gh / 2)
    c2 = cw**2 + ch**2
    ups = upsilon_arrays(gt, pred)
    a = alpha_arrays(iou, ups) if alpha is None else np.broadcast_to(np.asarray(alpha, dtype=np.float64), iou.shape)
    with np.errstate(invalid="ignore", divide="ignore"):
        dist_term = np.where(c2 > 0, rho2 / np.where(c2 > 0, c2, 1.0), 0.0)
    loss = 1.0 - iou + dist_term + a * ups
    return CIoUArrays(iou, rho2, c2, ups, np.asarray(a), loss)


def ciou_grad_arrays(pred: np.ndarray, gt: np.ndarray, alpha: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the CIoU loss with respect to ``pred`` (shape ``(..., 4)``).

    The trade-off weight alpha is held constant. At coordinate ties
    (coincident edges) the one-sided derivative with strict comparisons is
    used, which makes ``pred == gt`` a stationary point in position.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    px, py, pw, ph = _split(pred)
    gx, gy, gw, gh = _split(gt)

    px1, px2 = px - pw / 2, px + pw / 2
    py1, py2 = py - ph / 2, py + ph / 2
    gx1, gx2 = gx - gw / 2, gx + gw / 2
    gy1, gy2 = gy - gh / 2, gy + gh / 2

    # intersection extents and their partials wrt (centre, size)
    iw_raw = np.minimum(px2, gx2) - np.maximum(px1, gx1)
    ih_raw = np.minimum(py2, gy2) - np.maximum(py1, gy1)
    iw = np.maximum(iw_raw, 0.0)
    ih = np.maximum(ih_raw, 0.0)
    x_in_r = (px2 < gx2).astype(np.float64)  # right edge is the pred's
    x_in_l = (px1 > gx1).astype(np.float64)  # left edge is the pred's
    y_in_b = (py2 < gy2).astype(np.float64)
    y_in_t = (py1 > gy1).astype(np.float64)
    ox = (iw_raw > 0).astype(np.float64)
    oy = (ih_raw > 0).astype(np.float64)
    diw_dx = ox * (x_in_r - x_in_l)
    diw_dw = ox * 0.5 * (x_in_r + x_in_l)
    dih_dy = oy * (y_in_b - y_in_t)
    dih_dh = oy * 0.5 * (y_in_b + y_in_t)

    inter = iw * ih
    union = pw * ph + gw * gh - inter
    safe_union = np.where(union > 0, union, 1.0)
    dI = np.stack([diw_dx * ih, dih_dy * iw, diw_dw * ih, dih_dh * iw], axis=-1)
    dArea = np.stack([np.zeros_like(pw), np.zeros_like(pw), ph, pw], axis=-1)
    dU = dArea - dI
    dIoU = (dI * union[..., None] - inter[..., None] * dU) / (safe_union**2)[..., None]

    # centre distance over enclosing diagonal
    rho2 = (px - gx) ** 2 + (py - gy) ** 2
    cw = np.maximum(px2, gx2) - np.minimum(px1, gx1)
    ch = np.maximum(py2, gy2) - np.minimum(py1, gy1)
    x_out_r = (px2 > gx2).astype(np.float64)
    x_out_l = (px1 < gx1).astype(np.float64)
    y_out_b = (py2 > gy2).astype(np.float64)
    y_out_t = (py1 < gy1).astype(np.float64)
    dcw = np.stack([x_out_r - x_out_l, np.zeros_like(cw), 0.5 * (x_out_r + x_out_l), np.zeros_like(cw)], axis=-1)
    dch = np.stack([np.zeros_like(ch), y_out_b - y_out_t, np.zeros_like(ch), 0.5 * (y_out_b + y_out_t)], axis=-1)
    c2 = cw**2 + ch**2
    safe_c2 = np.where(c2 > 0, c2, 1.0)
    dc2 = 2 * cw[..., None] * dcw + 2 * ch[..., None] * dch
    drho2 = np.stack([2 * (px - gx), 2 * (py - gy), np.zeros_like(px), np.zeros_like(px)], axis=-1)
    dDist = (drho2 * c2[..., None] - rho2[..., None] * dc2) / (safe_c2**2)[..., None]

    # aspect-ratio consistency
    diff = _atan_ratio(gw, gh) - _atan_ratio(pw, ph)
    norm2 = pw**2 + ph**2
    safe_norm2 = np.where(norm2 > 0, norm2, 1.0)
    dups_dw = -2 * ASPECT_SCALE * diff * ph / safe_norm2
    dups_dh = 2 * ASPECT_SCALE * diff * pw / safe_norm2
    dUps = np.stack([np.zeros_like(pw), np.zeros_like(pw), dups_dw, dups_dh], axis=-1)

    if alpha is None:
        terms = ciou_arrays(pred, gt)
        alpha = terms.alpha
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), pw.shape)
    return -dIoU + dDist + alpha[..., None] * dUps


# ---------------------------------------------------------------------------
# scalar API


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the union is empty."""
    return float(iou_arrays(a.as_array(), b.as_array()))


def aspect_consistency(gt: BBox, pred: BBox) -> float:
    """Aspect-ratio consistency term upsilon, bounded to [0, 1]."""
    return float(upsilon_arrays(gt.as_array(), pred.as_array()))


def ciou_alpha(iou: float, upsilon: float) -> float:
    """Positive trade-off weight ``upsilon / ((1 - iou) + upsilon)``; 0 if undefined."""
    if not (math.isfinite(iou) and math.isfinite(upsilon)):
        raise InvalidInputError(f"non-finite alpha inputs: iou={iou}, upsilon={upsilon}")
    return float(alpha_arrays(iou, upsilon))


def ciou_loss(pred: BBox, gt: BBox, alpha: float | None = None) -> CIoUBreakdown:
    if gt.area <= 0:
        raise InvalidInputError(f"ground-truth box has zero area: {gt}")
    t = ciou_arrays(pred.as_array(), gt.as_array(), alpha)
    return CIoUBreakdown(*(float(v) for v in t))


def ciou_grad(pred: BBox, gt: BBox) -> np.ndarray:
    """Gradient ``(dL/dcx, dL/dcy, dL/dw, dL/dh)`` of :func:`ciou_loss`."""
    if gt.area <= 0:
        raise InvalidInputError(f"ground-truth box has zero area: {gt}")
    if pred.w <= 0 or pred.h <= 0:
        raise InvalidInputError(f"degenerate predicted box: {pred}")
    return ciou_grad_arrays(pred.as_array(), gt.as_array())
