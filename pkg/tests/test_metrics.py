import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from directmot.metrics.boxes import Box2D, Box3D, giou_3d, iou_2d, iou_3d
from directmot.metrics.hota import ALPHAS, TrackedObject, TrackingData, clearmot, hota
from directmot.metrics.kitti import parse_line, read_kitti_tracking

from oracles import monte_carlo_iou, random_box_pair

UNIT = (1.0, 1.0, 1.0)


def cube(x, yaw=0.0):
    return Box3D((x, 0.0, 0.0), yaw, UNIT)


# -- similarity kernels -------------------------------------------------------------

def test_iou_2d_examples():
    a = Box2D(0, 0, 1, 1)
    assert iou_2d(a, a) == 1.0
    assert iou_2d(a, Box2D(2, 0, 1, 1)) == 0.0
    assert iou_2d(a, Box2D(0.5, 0, 1, 1)) == pytest.approx(1 / 3, abs=1e-12)
    assert iou_2d(Box2D(0, 0, 0, 0), Box2D(0, 0, 0, 0)) == 0.0


def test_iou_3d_examples():
    assert iou_3d(cube(0), cube(0)) == pytest.approx(1.0, abs=1e-12)
    assert iou_3d(cube(0), cube(0.5)) == pytest.approx(1 / 3, abs=1e-9)
    sq = Box3D((1.0, 0.5, 8.0), 0.0, (2.0, 1.5, 2.0))
    assert iou_3d(sq, Box3D(sq.center, np.pi / 2, sq.dims)) == pytest.approx(1.0, abs=1e-9)


def test_giou_3d_examples():
    assert giou_3d(cube(0), cube(0)) == pytest.approx((1.0, 1.0), abs=1e-12)
    g, n = giou_3d(cube(0), cube(2.0))
    assert g == pytest.approx(-1 / 3, abs=1e-9) and n == pytest.approx(1 / 3, abs=1e-9)


def test_giou_equals_iou_for_nested_boxes():
    outer = Box3D((0.0, 0.0, 10.0), 0.4, (2.0, 2.0, 4.0))
    inner = Box3D((0.2, 0.1, 10.1), 0.4, (1.0, 1.0, 2.0))
    assert giou_3d(outer, inner)[0] == pytest.approx(iou_3d(outer, inner), abs=1e-12)
    assert iou_3d(outer, inner) == pytest.approx(inner.volume / outer.volume, abs=1e-12)


def _ground_motion(box, theta, t):
    c, s = np.cos(theta), np.sin(theta)
    x, y, z = box.center
    # yaw rotation about the camera y axis maps (x, z) -> (c x + s z, -s x + c z)
    return Box3D((c * x + s * z + t[0], y, -s * x + c * z + t[1]), box.yaw + theta, box.dims)


@settings(max_examples=100)
@given(st.integers(0, 2 ** 32 - 1))
def test_kernels_symmetric_and_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = random_box_pair(rng)
    theta, t = rng.uniform(-np.pi, np.pi), rng.uniform(-5, 5, 2)
    a2, b2 = _ground_motion(a, theta, t), _ground_motion(b, theta, t)
    i, g = iou_3d(a, b), giou_3d(a, b)[0]
    assert i == pytest.approx(iou_3d(b, a), abs=1e-12) and g == pytest.approx(giou_3d(b, a)[0], abs=1e-12)
    assert iou_3d(a2, b2) == pytest.approx(i, abs=1e-9) and giou_3d(a2, b2)[0] == pytest.approx(g, abs=1e-9)
    assert -1.0 <= g <= i + 1e-12 <= 1.0 + 1e-12
    ra = Box2D(*rng.uniform(0, 10, 2), *rng.uniform(0.1, 5, 2))
    rb = Box2D(*rng.uniform(0, 10, 2), *rng.uniform(0.1, 5, 2))
    assert iou_2d(ra, rb) == iou_2d(rb, ra)
    s = rng.uniform(-20, 20, 2)
    shifted = iou_2d(Box2D(ra.left + s[0], ra.top + s[1], ra.width, ra.height),
                     Box2D(rb.left + s[0], rb.top + s[1], rb.width, rb.height))
    assert shifted == pytest.approx(iou_2d(ra, rb), abs=1e-9)


def test_monte_carlo_agreement_small_sample():
    rng = np.random.default_rng(7)
    for _ in range(5):
        a, b = random_box_pair(rng)
        mc, se, mg, sg = monte_carlo_iou(a, b, rng, 200_000)
        assert abs(iou_3d(a, b) - mc) <= 3 * se + 1e-12
        assert abs(giou_3d(a, b)[0] - mg) <= 3 * sg + 1e-12


# -- HOTA / CLEARMOT ----------------------------------------------------------------

def track_data(ids_per_frame, boxes=None):
    frames = []
    for f, ids in enumerate(ids_per_frame):
        frames.append([TrackedObject(i, Box2D(10 * k, 0, 8, 8), (boxes or {}).get((f, i), cube(3.0 * k)))
                       for k, i in enumerate(ids)])
    return TrackingData(frames)


def test_perfect_tracking():
    gt = track_data([[1]] * 10)
    r = hota(gt, gt)
    assert (r.HOTA, r.DetA, r.AssA, r.LocA) == (1.0, 1.0, 1.0, 1.0)
    c = clearmot(gt, gt)
    assert (c.MOTA, c.IDSW, c.FP, c.FN) == (1.0, 0, 0, 0)


def test_single_id_switch():
    gt = track_data([[1]] * 10)
    pred = track_data([[1]] * 5 + [[2]] * 5)
    r = hota(gt, pred)
    assert r.DetA == 1.0 and r.AssA == pytest.approx(0.5, abs=1e-12)
    assert np.allclose(r.per_alpha["HOTA"], np.sqrt(0.5), atol=1e-12)
    assert r.HOTA == pytest.approx(np.sqrt(0.5), abs=1e-9)
    c = clearmot(gt, pred)
    assert c.IDSW == 1 and c.MOTA == pytest.approx(0.9, abs=1e-9)


def test_empty_predictions():
    gt = track_data([[1]] * 10)
    empty = TrackingData([[] for _ in range(10)])
    assert hota(gt, empty).HOTA == 0.0
    c = clearmot(gt, empty)
    assert c.FN == 10 and c.MOTA == 0.0


def test_sequence_mismatch_raises():
    with pytest.raises(ValueError):
        hota(TrackingData([[]], "0001"), TrackingData([[]], "0002"))


def test_report_shapes_and_alpha_grid():
    assert len(ALPHAS) == 19 and ALPHAS[0] == pytest.approx(0.05) and ALPHAS[-1] == pytest.approx(0.95)
    gt = track_data([[1, 2]] * 4)
    r = hota(gt, track_data([[1]] * 4))
    assert set(r.as_dict()) == {"HOTA", "DetA", "AssA", "DetRe", "DetPr", "AssRe", "AssPr", "LocA"}
    assert np.allclose(r.per_alpha["HOTA"], np.sqrt(r.per_alpha["DetA"] * r.per_alpha["AssA"]))
    assert r.DetRe == pytest.approx(0.5) and r.DetPr == pytest.approx(1.0)


def test_clearmot_fragmented_predictions():
    gt = track_data([[1]] * 4)
    pred = track_data([[1], [], [1], [1]])
    c = clearmot(gt, pred)
    assert (c.TP, c.FN, c.FP, c.IDSW) == (3, 1, 0, 0)
    assert c.MOTA == pytest.approx(0.75)
    with pytest.raises(ValueError):
        clearmot(gt, pred, threshold=1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 3.0), st.floats(0.0, 3.0))
def test_loca_never_improves_with_worse_localization(d1, d2):
    """Per alpha, LocA cannot rise when a box is moved further off while the matches stay the same.

    The alpha-averaged LocA can: a degraded pair that falls below an alpha
    threshold leaves that level's mean, which then rises.
    """
    small, large = sorted((d1, d2))
    gt = track_data([[1]] * 6)

    def run(off):
        pred = track_data([[1]] * 6, {(3, 1): Box3D((off, 0.0, 0.0), 0.0, UNIT)})
        return hota(gt, pred)

    a, b = run(small), run(large)
    same = a.per_alpha["DetA"] == b.per_alpha["DetA"]
    assert np.all(b.per_alpha["LocA"][same] <= a.per_alpha["LocA"][same] + 1e-12)


# -- KITTI files ---------------------------------------------------------------------

KITTI_ROWS = """0 1 Car 0 0 -1.57 100.0 150.0 200.0 230.0 1.50 1.80 4.20 2.00 1.60 15.00 0.30
0 -1 DontCare -1 -1 -10 0 0 50 50 -1 -1 -1 -1000 -1000 -1000 -10
1 1 Car 0 0 -1.57 101.0 150.0 201.0 230.0 1.50 1.80 4.20 2.10 1.60 15.00 0.30 0.9
1 2 Pedestrian 0 0 0.1 300.0 150.0 320.0 200.0 1.70 0.60 0.80 5.00 1.60 20.00 0.00
"""


def test_kitti_reader(tmp_path):
    p = tmp_path / "0007.txt"
    p.write_text(KITTI_ROWS)
    data = read_kitti_tracking(p, n_frames=3)
    assert data.sequence_id == "0007" and len(data.frames) == 3
    o = data.frames[0][0]
    assert o.box3d.center == pytest.approx((2.0, 1.6 - 0.75, 15.0))  # bottom center -> geometric center
    assert o.box3d.dims == (1.8, 1.5, 4.2) and o.box2d.ltrb() == (100.0, 150.0, 200.0, 230.0)
    assert data.frames[1][0].score == 0.9 and len(data.frames[1]) == 1
    everything = read_kitti_tracking(p, classes=None)
    assert len(everything.frames[0]) == 1 and len(everything.frames[1]) == 2
    assert parse_line("   ") is None
    with pytest.raises(ValueError):
        parse_line("0 1 Car 0 0")
