"""Post-processing: peak candidates, point matching, box decoding, triplets.

Decoding walks the deepest interaction heatmap's peaks, pulls the verb's
matching offsets at each peak, snaps human/object center candidates to the
offset targets (cost = L1 distance / candidate score), decodes boxes from the
size/sub-pixel maps, and multiplies the three scores.
"""

from __future__ import annotations

from dataclasses import dataclass

from .losses import HoiCategoryTable
from .model import ForwardOutputs
from .ops import maxpool_nms, slice_channels, topk
from .tensor import Tensor


class NoCandidateError(ValueError):
    """Matching pool was empty; the triplet is dropped."""


Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class PointCandidate:
    """One surviving heatmap peak."""

    score: float
    channel: int
    x: int
    y: int


@dataclass(frozen=True)
class HoiTriplet:
    human_box: Box
    object_box: Box
    verb: int
    object_class: int
    score: float


def select_candidates(heatmap: Tensor, k: int = 100, batch: int = 0) -> list[PointCandidate]:
    """Peak-isolate with a 3x3 max filter, then take the k best pixels across
    all channels. Suppressed (zeroed) pixels never become candidates."""
    peaks = maxpool_nms(heatmap)
    return [PointCandidate(score, channel, x, y)
            for score, channel, y, x in topk(peaks, k, batch=batch)
            if score > 0.0]


def _match_cost(target_x: float, target_y: float, cand: PointCandidate, norm: str) -> float:
    if norm == "l1":
        dist = abs(target_x - cand.x) + abs(target_y - cand.y)
    elif norm == "l2":
        dist = ((target_x - cand.x) ** 2 + (target_y - cand.y) ** 2) ** 0.5
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return dist / cand.score


def match_point(ip: PointCandidate, apm_offset: tuple[float, float],
                candidates: list[PointCandidate], norm: str = "l1") -> PointCandidate:
    """Candidate minimizing distance-to-target over its own score, where the
    target is the interaction point minus the predicted offset. Ties go to the
    higher-scoring candidate, then to the earlier one in selection order
    (selection order is descending score, then ascending linear index)."""
    if not candidates:
        raise NoCandidateError("no candidates to match against")
    tx = ip.x - apm_offset[0]
    ty = ip.y - apm_offset[1]
    best = None
    best_key = None
    for cand in candidates:
        key = (_match_cost(tx, ty, cand, norm), -cand.score)
        if best_key is None or key < best_key:
            best, best_key = cand, key
    return best


def decode_box(center: PointCandidate, det_wh: Tensor, det_reg: Tensor,
               stride: int, batch: int = 0) -> Box | None:
    """Center candidate -> input-image-pixel box, clamped to image bounds.
    Returns None for degenerate (nonpositive-size) boxes."""
    _, _, fh, fw = det_wh.shape
    bw = float(det_wh.data[batch, 0, center.y, center.x])
    bh = float(det_wh.data[batch, 1, center.y, center.x])
    if bw <= 0.0 or bh <= 0.0:
        return None
    cx = center.x + float(det_reg.data[batch, 0, center.y, center.x])
    cy = center.y + float(det_reg.data[batch, 1, center.y, center.x])
    img_w, img_h = fw * stride, fh * stride
    x1 = min(max((cx - bw / 2.0) * stride, 0.0), img_w)
    x2 = min(max((cx + bw / 2.0) * stride, 0.0), img_w)
    y1 = min(max((cy - bh / 2.0) * stride, 0.0), img_h)
    y2 = min(max((cy + bh / 2.0) * stride, 0.0), img_h)
    if x2 <= x1 or y2 <= y1:
        return None
    return (x1, y1, x2, y2)


def assemble_triplets(outputs: ForwardOutputs, stride: int, k: int = 100,
                      table: HoiCategoryTable | None = None, norm: str = "l1",
                      batch: int = 0) -> list[HoiTriplet]:
    """Full decode for one image of a forward_infer pass; at most k triplets,
    sorted by descending combined score (stable). Passing a category table
    drops pairs outside its meaningful set."""
    interactions = select_candidates(outputs.interaction_map, k, batch=batch)
    num_center_ch = outputs.det_center.shape[1]
    human_cands = select_candidates(slice_channels(outputs.det_center, 0, 1), k, batch=batch)
    object_cands = select_candidates(
        slice_channels(outputs.det_center, 1, num_center_ch), k, batch=batch)
    offsets = outputs.match_offsets.data
    triplets = []
    for ip in interactions:
        grp = ip.channel if outputs.match_groups > 1 else 0
        off = offsets[batch, 4 * grp:4 * grp + 4, ip.y, ip.x]
        try:
            human = match_point(ip, (float(off[0]), float(off[1])), human_cands, norm)
            obj = match_point(ip, (float(off[2]), float(off[3])), object_cands, norm)
        except NoCandidateError:
            continue
        human_box = decode_box(human, outputs.det_wh, outputs.det_reg, stride, batch)
        object_box = decode_box(obj, outputs.det_wh, outputs.det_reg, stride, batch)
        if human_box is None or object_box is None:
            continue
        if table is not None and (ip.channel, obj.channel) not in table.meaningful:
            continue
        triplets.append(HoiTriplet(human_box, object_box, ip.channel, obj.channel,
                                   ip.score * human.score * obj.score))
    triplets.sort(key=lambda t: -t.score)
    return triplets[:k]


# ===== Text interchange =====

def format_triplet(image_id: str, t: HoiTriplet) -> str:
    nums = [t.score, *t.human_box, *t.object_box]
    return " ".join([image_id, str(t.verb), str(t.object_class)] + [str(float(v)) for v in nums])


def parse_triplet_line(line: str) -> tuple[str, HoiTriplet]:
    parts = line.split()
    if len(parts) != 12:
        raise ValueError(f"triplet line needs 12 fields, got {len(parts)}: {line!r}")
    image_id = parts[0]
    verb, cls = int(parts[1]), int(parts[2])
    vals = [float(v) for v in parts[3:]]
    return image_id, HoiTriplet(tuple(vals[1:5]), tuple(vals[5:9]), verb, cls, vals[0])


def save_triplets(path, per_image: dict) -> None:
    with open(path, "w") as f:
        for image_id in sorted(per_image):
            for t in per_image[image_id]:
                f.write(format_triplet(image_id, t) + "\n")


def load_triplets(path) -> dict:
    out: dict[str, list[HoiTriplet]] = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            image_id, t = parse_triplet_line(line)
            out.setdefault(image_id, []).append(t)
    return out
