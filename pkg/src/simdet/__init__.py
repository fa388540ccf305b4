"""Desk-scale virtual-to-real object detection laboratory."""

from simdet.geometry import BBox, CIoUBreakdown, aspect_consistency, ciou_alpha, ciou_grad, ciou_loss, iou

__all__ = [
    "BBox",
    "CIoUBreakdown",
    "aspect_consistency",
    "ciou_alpha",
    "ciou_grad",
    "ciou_loss",
    "iou",
]

__version__ = "0.1.0"
