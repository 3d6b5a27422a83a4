"""Peak selection, point matching, box decoding, triplet assembly."""

import numpy as np
import pytest

from ggnet.decoder import (
    HoiTriplet,
    NoCandidateError,
    PointCandidate,
    assemble_triplets,
    decode_box,
    format_triplet,
    load_triplets,
    match_point,
    parse_triplet_line,
    save_triplets,
    select_candidates,
)
from ggnet.losses import HoiCategoryTable
from ggnet.model import ForwardOutputs
from ggnet.tensor import Tensor

from oracles import match_point_ref


def _t(arr):
    return Tensor.from_array(np.asarray(arr, np.float32))


# ===== candidate selection =====

def test_select_candidates_keeps_isolated_peaks_sorted():
    heat = np.zeros((1, 2, 4, 4), np.float32)
    heat[0, 0, 1, 1] = 0.9
    heat[0, 0, 3, 3] = 0.5
    heat[0, 1, 0, 2] = 0.7
    cands = select_candidates(_t(heat), k=10)
    assert cands == [
        PointCandidate(pytest.approx(0.9), 0, 1, 1),
        PointCandidate(pytest.approx(0.7), 1, 2, 0),
        PointCandidate(pytest.approx(0.5), 0, 3, 3),
    ]


def test_select_candidates_filters_suppressed_pixels():
    heat = np.full((1, 1, 4, 4), 0.2, np.float32)
    heat[0, 0, 2, 2] = 0.8
    cands = select_candidates(_t(heat), k=16)
    # every non-max pixel is zeroed by the 3x3 filter and then dropped;
    # the constant corner pixels far from the peak survive as plateau maxima
    assert PointCandidate(pytest.approx(0.8), 0, 2, 2) == cands[0]
    assert all(c.score > 0 for c in cands)
    assert len(cands) < 16


def test_select_candidates_keeps_plateau_ties_in_index_order():
    heat = np.zeros((1, 1, 4, 4), np.float32)
    heat[0, 0, 1, 1] = 0.9
    heat[0, 0, 1, 2] = 0.9
    cands = select_candidates(_t(heat), k=4)
    assert [(c.x, c.y) for c in cands] == [(1, 1), (2, 1)]


def test_select_candidates_respects_k():
    heat = np.zeros((1, 1, 8, 8), np.float32)
    for i, (y, x) in enumerate([(0, 0), (0, 4), (4, 0), (4, 4)]):
        heat[0, 0, y, x] = 0.9 - 0.1 * i
    cands = select_candidates(_t(heat), k=2)
    assert [(c.y, c.x) for c in cands] == [(0, 0), (0, 4)]


# ===== point matching =====

def test_match_point_frozen_case_distance_over_score():
    ip = PointCandidate(1.0, 0, 10, 10)
    a = PointCandidate(1.0, 0, 6, 10)    # cost |8-6|/1.0  = 2
    b = PointCandidate(0.25, 0, 7, 10)   # cost |8-7|/0.25 = 4
    got = match_point(ip, (2.0, 0.0), [a, b])
    assert got == a
    assert match_point(ip, (2.0, 0.0), [b, a]) == a  # order-independent


def test_match_point_empty_pool_raises():
    ip = PointCandidate(1.0, 0, 1, 1)
    with pytest.raises(NoCandidateError):
        match_point(ip, (0.0, 0.0), [])


def test_match_point_tie_prefers_higher_score():
    ip = PointCandidate(1.0, 0, 4, 4)
    a = PointCandidate(0.5, 0, 4, 6)  # cost 2/0.5 = 4
    b = PointCandidate(1.0, 0, 4, 8)  # cost 4/1.0 = 4
    assert match_point(ip, (0.0, 0.0), [a, b]) == b
    assert match_point(ip, (0.0, 0.0), [b, a]) == b


def test_match_point_norm_selects_different_winner():
    ip = PointCandidate(1.0, 0, 10, 10)
    a = PointCandidate(1.0, 0, 10, 5)  # dist l1=5, l2=5
    b = PointCandidate(1.0, 0, 7, 7)   # dist l1=6, l2=4.24
    assert match_point(ip, (0.0, 0.0), [a, b], norm="l1") == a
    assert match_point(ip, (0.0, 0.0), [a, b], norm="l2") == b
    with pytest.raises(ValueError):
        match_point(ip, (0.0, 0.0), [a, b], norm="linf")


@pytest.mark.parametrize("norm", ["l1", "l2"])
def test_match_point_matches_exhaustive_oracle(norm):
    rng = np.random.default_rng(hash(norm) % 2**32)
    for _ in range(250):
        n = int(rng.integers(1, 12))
        cands = [PointCandidate(float(rng.uniform(0.05, 1.0)), 0,
                                int(rng.integers(0, 16)), int(rng.integers(0, 16)))
                 for _ in range(n)]
        ip = PointCandidate(1.0, 0, int(rng.integers(0, 16)), int(rng.integers(0, 16)))
        off = (float(rng.uniform(-4, 4)), float(rng.uniform(-4, 4)))
        assert match_point(ip, off, cands, norm) == match_point_ref((ip.x, ip.y), off, cands, norm)


# ===== box decoding =====

def test_decode_box_frozen_case():
    wh = np.zeros((1, 2, 12, 12), np.float32)
    reg = np.zeros((1, 2, 12, 12), np.float32)
    wh[0, :, 8, 8] = [4.0, 6.0]
    box = decode_box(PointCandidate(1.0, 0, 8, 8), _t(wh), _t(reg), stride=4)
    assert box == (24.0, 20.0, 40.0, 44.0)


def test_decode_box_applies_subpixel_offset():
    wh = np.zeros((1, 2, 8, 8), np.float32)
    reg = np.zeros((1, 2, 8, 8), np.float32)
    wh[0, :, 3, 4] = [2.0, 2.0]
    reg[0, :, 3, 4] = [0.5, -0.25]
    box = decode_box(PointCandidate(1.0, 0, 4, 3), _t(wh), _t(reg), stride=4)
    assert box == pytest.approx((14.0, 7.0, 22.0, 15.0))


def test_decode_box_degenerate_and_clamped():
    wh = np.zeros((1, 2, 8, 8), np.float32)
    reg = np.zeros((1, 2, 8, 8), np.float32)
    assert decode_box(PointCandidate(1.0, 0, 2, 2), _t(wh), _t(reg), 4) is None
    wh[0, :, 0, 0] = [50.0, 50.0]
    box = decode_box(PointCandidate(1.0, 0, 0, 0), _t(wh), _t(reg), 4)
    assert box == (0.0, 0.0, 32.0, 32.0)  # clamped to the 8*4 image
    wh[0, :, 0, 7] = [2.0, 2.0]
    reg[0, 0, 0, 7] = 10.0  # pushes the whole box past the right edge
    assert decode_box(PointCandidate(1.0, 0, 7, 0), _t(wh), _t(reg), 4) is None


# ===== full assembly =====

def _outputs(interaction, offsets, det_center, det_wh, det_reg, groups):
    dummy = Tensor((1, 1, 1, 1), [0.0])
    return ForwardOutputs(
        backbone_feat=dummy, glance_feat=dummy, glance_heatmap=None,
        points_coarse=None, gaze1_feat=None, gaze1_heatmap=None,
        gaze2_context=None, points_final=None, gaze2_feat=None,
        gaze2_heatmap=_t(interaction), match_offsets=_t(offsets),
        match_groups=groups, det_center=_t(det_center), det_wh=_t(det_wh),
        det_reg=_t(det_reg))


def _scene():
    """Two interactions on an 8x8 grid: verb 1 with a class-1 object, verb 0
    with a class-0 object, sharing one human."""
    inter = np.zeros((1, 2, 8, 8), np.float32)
    inter[0, 1, 3, 4] = 0.9
    inter[0, 0, 6, 1] = 0.5
    det = np.zeros((1, 3, 8, 8), np.float32)
    det[0, 0, 3, 2] = 0.8   # human
    det[0, 1, 3, 6] = 0.7   # object class 0
    det[0, 2, 6, 6] = 0.6   # object class 1
    off = np.zeros((1, 8, 8, 8), np.float32)
    off[0, 4:8, 3, 4] = [2.0, 0.0, -2.0, -3.0]   # verb-1 group: human (2,3), object (6,6)
    off[0, 0:4, 3, 4] = [99.0, 99.0, 99.0, 99.0]  # wrong group -> garbage targets
    off[0, 0:4, 6, 1] = [-1.0, 3.0, -5.0, 3.0]   # verb-0 group: human (2,3), object (6,3)
    wh = np.zeros((1, 2, 8, 8), np.float32)
    wh[0, :, 3, 2] = [4.0, 6.0]
    wh[0, :, 3, 6] = [2.0, 2.0]
    wh[0, :, 6, 6] = [4.0, 4.0]
    reg = np.zeros((1, 2, 8, 8), np.float32)
    reg[0, :, 6, 6] = [0.5, 0.5]
    return inter, off, det, wh, reg


def test_assemble_triplets_end_to_end():
    outs = _outputs(*_scene(), groups=2)
    trips = assemble_triplets(outs, stride=4)
    assert len(trips) == 2
    first, second = trips
    assert (first.verb, first.object_class) == (1, 1)
    assert first.score == pytest.approx(0.9 * 0.8 * 0.6)
    assert first.human_box == (0.0, 0.0, 16.0, 24.0)
    assert first.object_box == (18.0, 18.0, 32.0, 32.0)
    assert (second.verb, second.object_class) == (0, 0)
    assert second.score == pytest.approx(0.5 * 0.8 * 0.7)
    assert second.object_box == (20.0, 8.0, 28.0, 16.0)
    assert first.score > second.score  # descending order


def test_assemble_triplets_table_filter_and_k():
    outs = _outputs(*_scene(), groups=2)
    only_v1 = HoiCategoryTable(2, 2, frozenset({(1, 1)}), frozenset())
    trips = assemble_triplets(outs, stride=4, table=only_v1)
    assert [(t.verb, t.object_class) for t in trips] == [(1, 1)]
    assert len(assemble_triplets(outs, stride=4, k=1)) == 1


def test_assemble_triplets_without_humans_yields_nothing():
    inter, off, det, wh, reg = _scene()
    det[0, 0] = 0.0
    outs = _outputs(inter, off, det, wh, reg, groups=2)
    assert assemble_triplets(outs, stride=4) == []


def test_assemble_triplets_single_group_offsets():
    inter, off, det, wh, reg = _scene()
    inter[0, 0, 6, 1] = 0.0  # keep only the verb-1 interaction
    off = off[:, 4:8] * 0 + off[:, 4:8]  # single group uses channels 0:4
    outs = _outputs(inter, off, det, wh, reg, groups=1)
    trips = assemble_triplets(outs, stride=4)
    assert [(t.verb, t.object_class) for t in trips] == [(1, 1)]


# ===== text interchange =====

def test_triplet_text_roundtrip(tmp_path):
    t1 = HoiTriplet((0.0, 0.0, 16.0, 24.0), (18.0, 18.0, 32.0, 32.0), 1, 1, 0.432)
    t2 = HoiTriplet((1.0, 2.0, 3.0, 4.0), (5.0, 6.0, 7.0, 8.0), 0, 0, 0.28)
    line = format_triplet("im9", t1)
    assert len(line.split()) == 12
    assert parse_triplet_line(line) == ("im9", t1)
    path = tmp_path / "trips.txt"
    save_triplets(path, {"b": [t1], "a": [t2]})
    text = path.read_text().splitlines()
    assert text[0].startswith("a ") and text[1].startswith("b ")
    assert load_triplets(path) == {"a": [t2], "b": [t1]}


def test_triplet_line_field_count():
    with pytest.raises(ValueError):
        parse_triplet_line("img 1 1 0.5 0 0 1 1 2 2 3")
