"""Full detector: backbone/neck assembly, target assignment, loss, and the
single-scale grid decode.

The head predicts one 5-channel map (tx, ty, tw, th, objectness) on the
stride-16 grid. Center offsets use a widened sigmoid, 3*sigmoid(t) - 1 in
(-1, 2) cell units, so every cell of the 3x3 assignment neighborhood can
represent its target exactly; sizes use exp(t)*stride. At t=0 this decodes
to the cell midpoint and to stride pixels, respectively.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import C2PSA, C3k2, SPPF, ConvBlock, CoordAtt, DetectHead, Module
from .boxes import ANNOTATION_BOX_PX, Detection
from .errors import ConfigError, NumericError
from .tensor import Tensor

# Base channel widths for (stem, P2, P3, P4, P5), scaled by width_multiple.
BASE_WIDTHS = (64, 128, 256, 512, 1024)
BASE_REPEAT = 2
OFFSET_SPAN = 3.0  # decoded center offset = OFFSET_SPAN * sigmoid(t) - 1


@dataclass
class ModelConfig:
    input_size: int = 640
    stride: int = 16
    width_multiple: float = 0.25
    depth_multiple: float = 0.5
    head_channels: int | None = None
    ca_reduction: int = 16
    attn_heads: int = 4

    def __post_init__(self):
        if self.input_size % 32:
            raise ConfigError("input_size must be divisible by 32 (backbone reaches stride 32)")
        if self.input_size % self.stride:
            raise ConfigError("input_size must be an exact multiple of the stride")

    @property
    def grid(self):
        return self.input_size // self.stride

    def width(self, base):
        return max(4, int(round(base * self.width_multiple / 4)) * 4)

    def repeat(self):
        return max(1, round(BASE_REPEAT * self.depth_multiple))


@dataclass
class TargetMap:
    """Per-cell objectness labels and owning ground-truth boxes."""
    obj: np.ndarray   # (B, G, G) float32 in {0, 1}
    box: np.ndarray   # (B, 4, G, G) float32 (cx, cy, w, h); valid where obj == 1


class SDFYolo(Module):
    """Backbone -> (SPPF, attention, coordinate attention) -> single P4 head."""

    def __init__(self, config: ModelConfig, seed=0, aux_heads=False):
        rng = np.random.default_rng(seed)
        w0, w1, w2, w3, w4 = (config.width(b) for b in BASE_WIDTHS)
        r = config.repeat()
        head_c = config.head_channels or w3
        self.config = config
        self.head_channels = head_c

        self.stem = ConvBlock(3, w0, 3, stride=2, rng=rng)
        self.p2_down = ConvBlock(w0, w1, 3, stride=2, rng=rng)
        self.p2 = C3k2(w1, w1, r, rng=rng)
        self.p3_down = ConvBlock(w1, w2, 3, stride=2, rng=rng)
        self.p3 = C3k2(w2, w2, r, rng=rng)
        self.p4_down = ConvBlock(w2, w3, 3, stride=2, rng=rng)
        self.p4 = C3k2(w3, w3, r, rng=rng)
        self.p5_down = ConvBlock(w3, w4, 3, stride=2, rng=rng)
        self.p5 = C3k2(w4, w4, r, rng=rng)
        self.sppf = SPPF(w4, w4, rng=rng)
        self.psa = C2PSA(w4, heads=config.attn_heads, rng=rng)
        self.ca = CoordAtt(w4, reduction=config.ca_reduction, rng=rng)
        self.fuse = C3k2(w4 + w3, head_c, r, rng=rng)
        self.head = DetectHead(head_c, rng=rng, stride=config.stride,
                               prior_size_px=ANNOTATION_BOX_PX)
        if aux_heads:
            # Only used to quantify the parameter cost of multi-scale heads.
            self.head_p3 = DetectHead(w2, rng=rng, stride=config.stride // 2,
                                      prior_size_px=ANNOTATION_BOX_PX)
            self.head_p5 = DetectHead(w4, rng=rng, stride=config.stride * 2,
                                      prior_size_px=ANNOTATION_BOX_PX)

    def forward(self, x: Tensor) -> Tensor:
        t = self.p2(self.p2_down(self.stem(x)))
        p3 = self.p3(self.p3_down(t))
        p4 = self.p4(self.p4_down(p3))
        p5 = self.p5(self.p5_down(p4))
        p5 = self.ca(self.psa(self.sppf(p5)))
        fused = self.fuse(T.concat_channels([T.upsample_nearest_2x(p5), p4]))
        return self.head(fused)

    def summary(self, input_size=None):
        """Per-stage text summary: name, output shape, parameter count."""
        size = input_size or self.config.input_size
        stages = [
            ("stem", self.stem, size // 2, None),
            ("p2_down", self.p2_down, size // 4, None),
            ("p2", self.p2, size // 4, None),
            ("p3_down", self.p3_down, size // 8, None),
            ("p3", self.p3, size // 8, None),
            ("p4_down", self.p4_down, size // 16, None),
            ("p4", self.p4, size // 16, None),
            ("p5_down", self.p5_down, size // 32, None),
            ("p5", self.p5, size // 32, None),
            ("sppf", self.sppf, size // 32, None),
            ("psa", self.psa, size // 32, None),
            ("ca", self.ca, size // 32, None),
            ("fuse", self.fuse, size // 16, self.head_channels),
            ("head", self.head, size // 16, 5),
        ]
        chans = {"stem": self.config.width(BASE_WIDTHS[0]),
                 "p2_down": self.config.width(BASE_WIDTHS[1]),
                 "p2": self.config.width(BASE_WIDTHS[1]),
                 "p3_down": self.config.width(BASE_WIDTHS[2]),
                 "p3": self.config.width(BASE_WIDTHS[2]),
                 "p4_down": self.config.width(BASE_WIDTHS[3]),
                 "p4": self.config.width(BASE_WIDTHS[3]),
                 "p5_down": self.config.width(BASE_WIDTHS[4]),
                 "p5": self.config.width(BASE_WIDTHS[4]),
                 "sppf": self.config.width(BASE_WIDTHS[4]),
                 "psa": self.config.width(BASE_WIDTHS[4]),
                 "ca": self.config.width(BASE_WIDTHS[4])}
        lines = [f"{'layer':<10} {'output':<16} {'params':>10}"]
        for name, mod, hw, cout in stages:
            c = cout if cout is not None else chans[name]
            lines.append(f"{name:<10} {f'{c}x{hw}x{hw}':<16} {mod.param_count():>10d}")
        lines.append(f"{'total':<10} {'':<16} {self.param_count():>10d}")
        return "\n".join(lines)


def build_model(config: ModelConfig, seed=0, aux_heads=False) -> SDFYolo:
    model = SDFYolo(config, seed=seed, aux_heads=aux_heads)
    model.assign_names()
    return model


# ---------------------------------------------------------------------------
# box <-> grid transforms
# ---------------------------------------------------------------------------

def encode_box(box, cell_i, cell_j, stride):
    """Raw (tx, ty, tw, th) that decodes to `box` from cell (i, j).

    Valid when the center offset from the cell origin lies strictly inside
    (-1, 2) cell units, which holds for any cell of the 3x3 assignment
    neighborhood as long as the center is interior to its owning cell.
    """
    cx, cy, w, h = box
    ox = cx / stride - cell_j
    oy = cy / stride - cell_i
    if not (-1.0 < ox < OFFSET_SPAN - 1.0 and -1.0 < oy < OFFSET_SPAN - 1.0):
        raise ConfigError(f"center offset ({ox:.3f}, {oy:.3f}) not representable from cell "
                          f"({cell_i}, {cell_j})")
    tx = _logit((ox + 1.0) / OFFSET_SPAN)
    ty = _logit((oy + 1.0) / OFFSET_SPAN)
    return tx, ty, math.log(w / stride), math.log(h / stride)


def _logit(p):
    return math.log(p / (1.0 - p))


def decode(raw, stride, conf_threshold, input_size=640):
    """Grid map -> per-image Detection lists in patch pixel coordinates.

    raw: (B, 5, G, G) array or Tensor with channels (tx, ty, tw, th, obj
    logit). Emits one detection per cell whose objectness score reaches the
    threshold; sizes are clamped to [1, input_size].
    """
    data = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
    B, C, G, _ = data.shape
    if C != 5:
        raise ConfigError(f"expected 5 prediction channels, got {C}")
    scores = _sigmoid64(data[:, 4].astype(np.float64))
    off_x = OFFSET_SPAN * _sigmoid64(data[:, 0].astype(np.float64)) - 1.0
    off_y = OFFSET_SPAN * _sigmoid64(data[:, 1].astype(np.float64)) - 1.0
    ww = np.clip(np.exp(data[:, 2].astype(np.float64)) * stride, 1.0, input_size)
    hh = np.clip(np.exp(data[:, 3].astype(np.float64)) * stride, 1.0, input_size)
    jj = np.arange(G, dtype=np.float64)[None, :]
    ii = np.arange(G, dtype=np.float64)[:, None]
    cx = (jj + off_x) * stride
    cy = (ii + off_y) * stride

    out = []
    for b in range(B):
        keep = scores[b] >= conf_threshold
        ridx, cidx = np.nonzero(keep)  # row-major: deterministic emit order
        out.append([
            Detection(float(cx[b, i, j]), float(cy[b, i, j]),
                      float(ww[b, i, j]), float(hh[b, i, j]), float(scores[b, i, j]))
            for i, j in zip(ridx, cidx)
        ])
    return out


def _sigmoid64(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[pos == False])  # noqa: E712 - bool array index
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# target assignment
# ---------------------------------------------------------------------------

def assign_targets(boxes_per_image, config: ModelConfig, grid=None):
    """Mark the 3x3 cell neighborhood around each box's owning cell.

    Each positive cell stores its ground-truth box; when two boxes claim a
    cell, the one whose center is nearer to the cell center wins. Boxes
    fully outside the patch are rejected.
    """
    G = grid or config.grid
    s = config.stride
    size = G * s
    B = len(boxes_per_image)
    obj = np.zeros((B, G, G), dtype=np.float32)
    box = np.zeros((B, 4, G, G), dtype=np.float32)
    best = np.full((B, G, G), np.inf, dtype=np.float64)

    for b, img_boxes in enumerate(boxes_per_image):
        for (cx, cy, w, h) in img_boxes:
            if cx + w / 2 <= 0 or cx - w / 2 >= size or cy + h / 2 <= 0 or cy - h / 2 >= size:
                continue
            oi = int(math.floor(cy / s))
            oj = int(math.floor(cx / s))
            for i in range(max(0, oi - 1), min(G, oi + 2)):
                for j in range(max(0, oj - 1), min(G, oj + 2)):
                    d = (cx - (j + 0.5) * s) ** 2 + (cy - (i + 0.5) * s) ** 2
                    if d < best[b, i, j]:
                        best[b, i, j] = d
                        obj[b, i, j] = 1.0
                        box[b, :, i, j] = (cx, cy, w, h)
    return TargetMap(obj=obj, box=box)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

@dataclass
class LossTerms:
    box: Tensor
    obj: Tensor
    total: Tensor

    def values(self):
        return {"box_loss": self.box.item(), "obj_loss": self.obj.item(),
                "total": self.total.item()}


def compute_loss(raw: Tensor, target: TargetMap, stride,
                 box_weight=5.0, obj_weight=1.0) -> LossTerms:
    """Objectness BCE over all cells plus mean (1 - CIoU) over positive cells.

    The box term decodes the positive cells' raw predictions differentiably
    (without the inference-time size clamp, which would zero gradients at
    the bounds) and compares against the stored ground-truth boxes.
    """
    if raw.data.shape[1] != 5:
        raise ConfigError("prediction map must have 5 channels")
    if raw.data.shape[0] != target.obj.shape[0] or raw.data.shape[2:] != target.obj.shape[1:]:
        raise ConfigError("prediction and target shapes disagree")

    obj_logit = T.select_channel(raw, 4)
    obj_loss = T.tmean(T.bce_with_logits(obj_logit, target.obj))

    mask = target.obj > 0.5
    if mask.any():
        _, ii, jj = np.nonzero(mask)
        dt = raw.dtype
        tx = T.gather_mask(T.select_channel(raw, 0), mask)
        ty = T.gather_mask(T.select_channel(raw, 1), mask)
        tw = T.gather_mask(T.select_channel(raw, 2), mask)
        th = T.gather_mask(T.select_channel(raw, 3), mask)
        px = T.mul(T.add(T.sub(T.mul(T.sigmoid(tx), OFFSET_SPAN), 1.0), jj.astype(dt)), stride)
        py = T.mul(T.add(T.sub(T.mul(T.sigmoid(ty), OFFSET_SPAN), 1.0), ii.astype(dt)), stride)
        pw = T.mul(T.exp(tw), stride)
        ph = T.mul(T.exp(th), stride)
        gt = np.stack([target.box[:, k][mask] for k in range(4)]).astype(dt)
        box_loss = T.tmean(T.sub(1.0, ciou_graph(px, py, pw, ph, gt)))
    else:
        box_loss = Tensor(np.zeros((), dtype=raw.dtype))

    total = T.add(T.mul(box_loss, box_weight), T.mul(obj_loss, obj_weight))
    for label, t in (("box", box_loss), ("obj", obj_loss), ("total", total)):
        if not np.isfinite(t.data):
            raise NumericError(f"non-finite {label} loss")
    return LossTerms(box=box_loss, obj=obj_loss, total=total)


def ciou_graph(px, py, pw, ph, gt, eps=1e-7):
    """Differentiable CIoU between predicted box tensors and constant
    ground-truth boxes gt = (4, N) array; returns a (N,) tensor."""
    gx, gy, gw, gh = gt[0], gt[1], gt[2], gt[3]
    ax1, ax2 = T.sub(px, T.mul(pw, 0.5)), T.add(px, T.mul(pw, 0.5))
    ay1, ay2 = T.sub(py, T.mul(ph, 0.5)), T.add(py, T.mul(ph, 0.5))
    bx1, bx2 = gx - gw / 2.0, gx + gw / 2.0
    by1, by2 = gy - gh / 2.0, gy + gh / 2.0

    iw = T.clamp(T.sub(T.minimum(ax2, bx2), T.maximum(ax1, bx1)), 0.0, np.inf)
    ih = T.clamp(T.sub(T.minimum(ay2, by2), T.maximum(ay1, by1)), 0.0, np.inf)
    inter = T.mul(iw, ih)
    union = T.sub(T.add(T.mul(pw, ph), gw * gh), inter)
    iou = T.div(inter, union)

    dx = T.sub(px, gx)
    dy = T.sub(py, gy)
    rho2 = T.add(T.mul(dx, dx), T.mul(dy, dy))
    cw = T.sub(T.maximum(ax2, bx2), T.minimum(ax1, bx1))
    chh = T.sub(T.maximum(ay2, by2), T.minimum(ay1, by1))
    c2 = T.add(T.mul(cw, cw), T.mul(chh, chh))

    datan = T.sub(np.arctan(gw / gh), T.atan(T.div(pw, ph)))
    v = T.mul(T.mul(datan, datan), 4.0 / math.pi**2)
    # alpha stays in the graph (no detach): finite-difference checks then
    # see exactly the function the backward pass differentiates.
    alpha = T.div(v, T.add(T.sub(1.0, iou), T.add(v, eps)))
    return T.sub(T.sub(iou, T.div(rho2, c2)), T.mul(alpha, v))
