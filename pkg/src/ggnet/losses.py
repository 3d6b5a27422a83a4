"""Supervision construction and loss terms.

The interaction heatmaps train against signed Gaussian masks: +1 Gaussians at
annotated interaction points, -1 Gaussians at inferred hard negatives (other
meaningful verbs sharing the positive's object class, unless themselves
positive at that point). ``hna_loss`` consumes the signed mask; with a
nonnegative mask it reduces to the standard penalty-reduced focal loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ops import combine_scalars, slice_channels
from .tensor import ShapeError, Tensor, active_tape


class DataError(ValueError):
    """Annotation inconsistent with the category table."""


Box = tuple[float, float, float, float]


def box_center(box: Box) -> tuple[float, float]:
    return (box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0


@dataclass(frozen=True)
class HoiCategoryTable:
    """Verb/object vocabulary: which pairs occur at all, and which are rare."""

    num_verbs: int
    num_objects: int
    meaningful: frozenset
    rare: frozenset

    def __post_init__(self):
        if not self.rare <= self.meaningful:
            raise DataError("rare categories must be a subset of meaningful ones")
        for v, o in self.meaningful:
            if not (0 <= v < self.num_verbs and 0 <= o < self.num_objects):
                raise DataError(f"pair ({v},{o}) outside {self.num_verbs}x{self.num_objects}")


def save_table(path, table: HoiCategoryTable) -> None:
    lines = [f"verbs {table.num_verbs}", f"objects {table.num_objects}"]
    for v, o in sorted(table.meaningful):
        flag = "rare" if (v, o) in table.rare else "common"
        lines.append(f"pair {v} {o} {flag}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_table(path) -> HoiCategoryTable:
    num_verbs = num_objects = None
    meaningful = set()
    rare = set()
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "verbs":
                num_verbs = int(parts[1])
            elif parts[0] == "objects":
                num_objects = int(parts[1])
            elif parts[0] == "pair":
                v, o, flag = int(parts[1]), int(parts[2]), parts[3]
                meaningful.add((v, o))
                if flag == "rare":
                    rare.add((v, o))
            else:
                raise DataError(f"unknown table line: {line.strip()!r}")
    if num_verbs is None or num_objects is None:
        raise DataError("table file missing verbs/objects header")
    return HoiCategoryTable(num_verbs, num_objects, frozenset(meaningful), frozenset(rare))


@dataclass(frozen=True)
class HoiAnnotation:
    """One <human, verb, object> instance; boxes in input-image pixels."""

    human_box: Box
    object_box: Box
    verb: int
    object_class: int

    def __post_init__(self):
        for box in (self.human_box, self.object_box):
            if box[2] <= box[0] or box[3] <= box[1]:
                raise DataError(f"box {box} must have positive width/height")

    def interaction_point(self, stride: int) -> tuple[float, float]:
        """Midpoint of the two box centers, on the stride-d feature map."""
        hx, hy = box_center(self.human_box)
        ox, oy = box_center(self.object_box)
        return (hx + ox) / 2.0 / stride, (hy + oy) / 2.0 / stride


def format_annotation(image_id: str, a: HoiAnnotation) -> str:
    nums = [*a.human_box, *a.object_box]
    return " ".join([image_id, str(a.verb), str(a.object_class)] + [str(float(v)) for v in nums])


def parse_annotation_line(line: str) -> tuple[str, HoiAnnotation]:
    parts = line.split()
    if len(parts) != 11:
        raise DataError(f"annotation line needs 11 fields, got {len(parts)}: {line!r}")
    image_id = parts[0]
    verb, cls = int(parts[1]), int(parts[2])
    vals = [float(v) for v in parts[3:]]
    return image_id, HoiAnnotation(tuple(vals[0:4]), tuple(vals[4:8]), verb, cls)


def parse_annotations(lines) -> dict:
    """Group annotation lines by image id, preserving order."""
    out: dict[str, list[HoiAnnotation]] = {}
    for line in lines:
        line = line.strip()
        if not line:
            continue
        image_id, a = parse_annotation_line(line)
        out.setdefault(image_id, []).append(a)
    return out


# ===== Gaussian mask construction =====

def gaussian_radius(box_w: float, box_h: float, min_overlap: float = 0.7) -> float:
    """Largest center shift keeping IoU >= min_overlap, three-case quadratic."""
    w, h = float(box_w), float(box_h)
    o = float(min_overlap)

    b1 = h + w
    c1 = w * h * (1 - o) / (1 + o)
    r1 = (b1 - math.sqrt(b1 * b1 - 4 * c1)) / 2

    a2 = 4.0
    b2 = 2 * (h + w)
    c2 = (1 - o) * w * h
    r2 = (b2 - math.sqrt(b2 * b2 - 4 * a2 * c2)) / (2 * a2)

    a3 = 4.0 * o
    b3 = -2 * o * (h + w)
    c3 = (o - 1) * w * h
    r3 = (-b3 + math.sqrt(b3 * b3 - 4 * a3 * c3)) / (2 * a3)

    return max(0.0, min(r1, r2, r3))


def splat_gaussian(mask: np.ndarray, center, radius: float, sign: int, channel: int) -> None:
    """Stamp sign * exp(-(dx^2+dy^2) / (2 sigma^2)) onto mask[channel] in place.

    Positives max-combine with what is there; negatives min-combine but never
    touch a pixel whose current value is > 0 (positive precedence).
    """
    _, h, w = mask.shape
    cx, cy = int(center[0]), int(center[1])
    if not (0 <= cx < w and 0 <= cy < h):
        raise ValueError(f"splat center ({cx},{cy}) outside {w}x{h} map")
    r = int(radius)
    sigma = (2.0 * radius + 1.0) / 6.0
    x0, x1 = max(0, cx - r), min(w, cx + r + 1)
    y0, y1 = max(0, cy - r), min(h, cy + r + 1)
    ys, xs = np.ogrid[y0 - cy:y1 - cy, x0 - cx:x1 - cx]
    g = np.exp(-(xs * xs + ys * ys) / (2.0 * sigma * sigma)).astype(np.float32)
    region = mask[channel, y0:y1, x0:x1]
    if sign > 0:
        np.maximum(region, g, out=region)
    else:
        mask[channel, y0:y1, x0:x1] = np.where(region > 0, region, np.minimum(region, -g))


def _union_radius(a: HoiAnnotation, stride: int, min_overlap: float) -> float:
    # Radius from the union extent of the pair's two boxes, on the feature map.
    x1 = min(a.human_box[0], a.object_box[0])
    y1 = min(a.human_box[1], a.object_box[1])
    x2 = max(a.human_box[2], a.object_box[2])
    y2 = max(a.human_box[3], a.object_box[3])
    return gaussian_radius((x2 - x1) / stride, (y2 - y1) / stride, min_overlap)


def _splat_pixel(point, h, w) -> tuple[int, int]:
    px = min(max(int(point[0]), 0), w - 1)
    py = min(max(int(point[1]), 0), h - 1)
    return px, py


def build_mask(annotations, table: HoiCategoryTable, shape, stride: int,
               min_overlap: float = 0.7, hard_negatives: bool = True) -> np.ndarray:
    """Signed supervision mask (V, H, W) for one image's interaction heatmap.

    With hard_negatives=False only the +1 Gaussians are stamped (plain focal
    training target).
    """
    v_count, h, w = shape
    if v_count != table.num_verbs:
        raise ShapeError(f"mask wants {v_count} verb channels, table has {table.num_verbs}")
    mask = np.zeros(shape, np.float32)
    placed = []
    positives = set()
    for a in annotations:
        if (a.verb, a.object_class) not in table.meaningful:
            raise DataError(f"annotation pair ({a.verb},{a.object_class}) not meaningful")
        px, py = _splat_pixel(a.interaction_point(stride), h, w)
        radius = _union_radius(a, stride, min_overlap)
        placed.append((a, px, py, radius))
        positives.add((a.verb, px, py))
    for a, px, py, radius in placed:
        splat_gaussian(mask, (px, py), radius, +1, a.verb)
    if hard_negatives:
        for a, px, py, radius in placed:
            for vj in range(table.num_verbs):
                if vj == a.verb or (vj, a.object_class) not in table.meaningful:
                    continue
                if (vj, px, py) in positives:
                    continue
                splat_gaussian(mask, (px, py), radius, -1, vj)
    return mask


# ===== Loss terms =====

def hna_loss(pred: Tensor, mask: np.ndarray, num_points: int, alpha: float = 2.0,
             beta: float = 7.0, gamma: float = 4.0) -> Tensor:
    """Focal loss over a signed mask; hard negatives (M < 0) weighted (1-M)^beta.

    Per pixel: M = 1 -> (1-P)^alpha log P; M < 0 -> (1-M)^beta P^alpha log(1-P);
    otherwise (1-M)^gamma P^alpha log(1-P). Negated sum / max(num_points, 1).
    """
    mask = np.asarray(mask, np.float64).reshape(pred.shape)
    p_raw = pred.data.astype(np.float64)
    if p_raw.min() < 0.0 or p_raw.max() > 1.0:
        raise ValueError("predictions must be probabilities in [0, 1]")
    if mask.min() < -1.0 or mask.max() > 1.0:
        raise ValueError("mask values must lie in [-1, 1]")
    p = np.clip(p_raw, 1e-6, 1.0 - 1e-6)
    pos = mask == 1.0
    neg = mask < 0.0
    log_p = np.log(p)
    log_np = np.log1p(-p)
    w_other = np.where(neg, (1.0 - mask) ** beta, (1.0 - mask) ** gamma)
    terms = np.where(pos, (1.0 - p) ** alpha * log_p, w_other * p ** alpha * log_np)
    denom = float(max(num_points, 1))
    out = Tensor((1, 1, 1, 1), [-terms.sum() / denom])
    out.exact = float(-terms.sum() / denom)

    t = active_tape()
    if t is not None:
        def backward():
            if out.grad is None or not pred.requires_grad:
                return
            g = float(out.grad.reshape(-1)[0])
            d_pos = -alpha * (1.0 - p) ** (alpha - 1) * log_p + (1.0 - p) ** alpha / p
            d_other = w_other * (alpha * p ** (alpha - 1) * log_np - p ** alpha / (1.0 - p))
            d = np.where(pos, d_pos, d_other)
            pred.add_grad((-g / denom) * d)
        t.record(backward)
    return out


def centernet_focal(pred: Tensor, target: np.ndarray, num_points: int,
                    alpha: float = 2.0, gamma: float = 4.0) -> Tensor:
    """Penalty-reduced focal loss; same code path as hna_loss on a sign-free mask."""
    target = np.asarray(target, np.float64)
    if target.min() < 0.0:
        raise ValueError("focal target must be nonnegative")
    return hna_loss(pred, target, num_points, alpha=alpha, beta=0.0, gamma=gamma)


def matching_loss(offset_map: Tensor, annos_per_image, stride: int,
                  groups: int | None = None) -> Tensor:
    """L1 between predicted and true point->center offsets at interaction points.

    offset_map is (B, 4*groups, H, W); each annotation is scored on its verb's
    4-channel group (group 0 when the map is shared across verbs). Targets are
    (pixel - human center, pixel - object center) in feature-map units,
    measured from the integer pixel the point splats to. Sum of human and object
    parts, normalized by annotation count.
    """
    b, c, h, w = offset_map.shape
    if groups is None:
        groups = c // 4
    if c != 4 * groups:
        raise ShapeError(f"offset map has {c} channels, expected 4*{groups}")
    rows = []
    targets = []
    for bi, annos in enumerate(annos_per_image):
        for a in annos:
            if groups > 1 and a.verb >= groups:
                raise DataError(f"verb {a.verb} outside {groups} offset groups")
            grp = a.verb if groups > 1 else 0
            px, py = _splat_pixel(a.interaction_point(stride), h, w)
            hx, hy = box_center(a.human_box)
            ox, oy = box_center(a.object_box)
            rows.append((bi, grp, py, px))
            targets.append((px - hx / stride, py - hy / stride,
                            px - ox / stride, py - oy / stride))
    count = len(rows)
    if count == 0:
        return Tensor((1, 1, 1, 1), [0.0])
    tgt = np.asarray(targets, np.float64)
    preds = np.stack([offset_map.data[bi, 4 * g:4 * g + 4, py, px]
                      for bi, g, py, px in rows]).astype(np.float64)
    diff = preds - tgt
    out = Tensor((1, 1, 1, 1), [np.abs(diff).sum() / count])
    out.exact = float(np.abs(diff).sum() / count)

    t = active_tape()
    if t is not None:
        def backward():
            if out.grad is None or not offset_map.requires_grad:
                return
            g = float(out.grad.reshape(-1)[0])
            s = np.sign(diff) * (g / count)
            offset_map.ensure_grad()
            for (bi, grp, py, px), row in zip(rows, s):
                offset_map.grad[bi, 4 * grp:4 * grp + 4, py, px] += row.astype(np.float32)
        t.record(backward)
    return out


def _masked_l1(pred: Tensor, rows, targets) -> Tensor:
    """L1 at sparse pixels: rows are (batch, y, x), targets (K, C) per row."""
    count = len(rows)
    if count == 0:
        return Tensor((1, 1, 1, 1), [0.0])
    tgt = np.asarray(targets, np.float64)
    sel = np.stack([pred.data[bi, :, y, x] for bi, y, x in rows]).astype(np.float64)
    diff = sel - tgt
    out = Tensor((1, 1, 1, 1), [np.abs(diff).sum() / count])
    out.exact = float(np.abs(diff).sum() / count)

    t = active_tape()
    if t is not None:
        def backward():
            if out.grad is None or not pred.requires_grad:
                return
            g = float(out.grad.reshape(-1)[0])
            s = np.sign(diff) * (g / count)
            pred.ensure_grad()
            for (bi, y, x), row in zip(rows, s):
                pred.grad[bi, :, y, x] += row.astype(np.float32)
        t.record(backward)
    return out


def detection_losses(det_center: Tensor, det_wh: Tensor, det_reg: Tensor,
                     annos_per_image, table: HoiCategoryTable, stride: int,
                     lambda_wh: float = 0.1, min_overlap: float = 0.7):
    """Center focal + size/sub-pixel L1 losses against box ground truth.

    Returns (scalar loss, {"det_center_h", "det_center_o", "det_wh", "det_reg"}).
    """
    b, ch, h, w = det_center.shape
    if ch != 1 + table.num_objects:
        raise ShapeError(f"center map has {ch} channels, expected {1 + table.num_objects}")
    heat = np.zeros((b, ch, h, w), np.float32)
    rows = []
    wh_targets = []
    reg_targets = []
    n_human = 0
    n_object = 0
    for bi, annos in enumerate(annos_per_image):
        seen = set()
        boxes = []
        for a in annos:
            if (a.human_box, 0) not in seen:
                seen.add((a.human_box, 0))
                boxes.append((a.human_box, 0))
            key = (a.object_box, 1 + a.object_class)
            if key not in seen:
                seen.add(key)
                boxes.append(key)
        for box, channel in boxes:
            if channel == 0:
                n_human += 1
            else:
                n_object += 1
            cx, cy = box_center(box)
            cx, cy = cx / stride, cy / stride
            px, py = _splat_pixel((cx, cy), h, w)
            bw = (box[2] - box[0]) / stride
            bh = (box[3] - box[1]) / stride
            radius = gaussian_radius(bw, bh, min_overlap)
            splat_gaussian(heat[bi], (px, py), radius, +1, channel)
            rows.append((bi, py, px))
            wh_targets.append((bw, bh))
            reg_targets.append((cx - px, cy - py))
    loss_h = centernet_focal(slice_channels(det_center, 0, 1), heat[:, 0:1], n_human)
    loss_o = centernet_focal(slice_channels(det_center, 1, ch), heat[:, 1:], n_object)
    loss_wh = _masked_l1(det_wh, rows, wh_targets)
    loss_reg = _masked_l1(det_reg, rows, reg_targets)
    total = combine_scalars([(1.0, loss_h), (1.0, loss_o),
                             (lambda_wh, loss_wh), (1.0, loss_reg)])
    parts = {"det_center_h": loss_h.item(), "det_center_o": loss_o.item(),
             "det_wh": loss_wh.item(), "det_reg": loss_reg.item()}
    return total, parts


def total_loss(interaction: Tensor, aux_interactions=(), matching: Tensor | None = None,
               detection: Tensor | None = None, lambda_aux: float = 0.1) -> Tensor:
    """Full objective: deepest interaction head at weight 1, shallower heads and
    the matching term at lambda_aux, detection at weight 1."""
    terms = [(1.0, interaction)]
    for aux in aux_interactions:
        if aux is not None:
            terms.append((lambda_aux, aux))
    if matching is not None:
        terms.append((lambda_aux, matching))
    if detection is not None:
        terms.append((1.0, detection))
    return combine_scalars(terms)
