"""Box types and plain-float geometry shared by the detector, inference,
and evaluation code. All boxes are center-format (cx, cy, w, h) pixels."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError

# Every mitosis annotation is a fixed-size box centered on the marked point.
ANNOTATION_BOX_PX = 50.0


@dataclass(frozen=True)
class Annotation:
    """Ground-truth point; its box is derived, never stored."""
    x: float
    y: float

    def as_box(self):
        return (self.x, self.y, ANNOTATION_BOX_PX, ANNOTATION_BOX_PX)


@dataclass(frozen=True)
class Detection:
    """Scored predicted box in whatever frame the producer used."""
    cx: float
    cy: float
    w: float
    h: float
    score: float

    def as_box(self):
        return (self.cx, self.cy, self.w, self.h)


def _corners(box):
    cx, cy, w, h = box
    return cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0


def iou(a, b):
    """Intersection over union of two center-format boxes."""
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ConfigError("iou requires positive box sizes")
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union


def ciou(a, b, eps=1e-7):
    """Complete-IoU in (-1, 1]: IoU minus a normalized center-distance
    penalty and an aspect-ratio consistency term,

        CIoU = IoU - rho^2 / c^2 - alpha * v,
        v = (4 / pi^2) * (atan(wb/hb) - atan(wa/ha))^2,
        alpha = v / (1 - IoU + v + eps),

    where rho is the distance between centers and c the diagonal of the
    smallest enclosing box.
    """
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ConfigError("ciou requires positive box sizes")
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    iou_val = inter / union
    rho2 = (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    c2 = cw * cw + ch * ch
    v = (4.0 / math.pi**2) * (math.atan(b[2] / b[3]) - math.atan(a[2] / a[3])) ** 2
    alpha = v / (1.0 - iou_val + v + eps)
    return iou_val - rho2 / c2 - alpha * v


def center_distance(a, b):
    return math.hypot(a[0] - b[0], a[1] - b[1])
