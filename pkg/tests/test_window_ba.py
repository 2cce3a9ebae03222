import numpy as np
import pytest
from scipy import ndimage

from directmot.errors import NotEnoughData
from directmot.geometry import CameraIntrinsics, RigidTransform, se3_exp
from directmot.imaging import InstanceMask
from directmot.pipeline.synth import Scenario, SynthObject, synth_generate
from directmot.window_ba import (
    BAConfig,
    HostPoint,
    Keyframe,
    SlidingWindow,
    optimize_window,
    photometric_energy,
    select_points,
    should_create_keyframe,
    slide_window,
)

from oracles import ba_gradient_errors

K = CameraIntrinsics(300.0, 300.0, 79.5, 59.5, 160, 120)


def texture(shape=(120, 160), seed=0):
    rng = np.random.default_rng(seed)
    return np.clip(ndimage.gaussian_filter(rng.uniform(0, 255, shape), 1.5) * 3 - 256, 0, 255)


def rect(shape=(120, 160), box=(30, 20, 130, 100)):
    m = np.zeros(shape, bool)
    u0, v0, u1, v1 = box
    m[v0:v1, u0:u1] = True
    return InstanceMask(m)


def flat_window(images, poses, cfg=None):
    depth = np.full(images[0].shape, 10.0)
    mask = rect()
    win = SlidingWindow(K, cfg or BAConfig())
    for f, (img, pose) in enumerate(zip(images, poses)):
        kf = Keyframe(f, img, mask, pose)
        kf.set_points(select_points(img, depth, mask, K, 100, frame_id=f), depth)
        win.add(kf)
    return win


@pytest.fixture(scope="module")
def synthetic_window():
    """Four keyframes of a laterally moving cuboid at ground-truth poses."""
    obj = SynthObject(center=(-1.5, 0.9, 10.0), velocity=(0.1, 0.0, 0.0), yaw=0.5)
    frames = [0, 3, 6, 9]
    bundle, gt = synth_generate(Scenario(n_frames=10, objects=[obj]))
    P = [obj.pose(t).to_transform() for t in range(10)]

    def make():
        win = SlidingWindow(bundle.intrinsics, BAConfig())
        for f in frames:
            fr = bundle.frames[f].load()
            pose = P[0] @ P[f].inverse()  # frame-f camera coordinates -> reference frame
            kf = Keyframe(f, fr.gray, fr.masks[0], pose)
            kf.set_points(select_points(fr.gray, fr.depth, fr.masks[0], bundle.intrinsics, frame_id=f), fr.depth)
            win.add(kf)
        return win

    centers = {f: np.asarray(obj.pose(f).translation) for f in frames}
    return make, centers


def center_error(win, centers):
    c0 = centers[win.keyframes[0].frame_id]
    return float(np.mean([np.linalg.norm(kf.pose.apply(centers[kf.frame_id]) - c0) for kf in win.keyframes[1:]]))


# -- keyframe policy -------------------------------------------------------------

def test_keyframe_policy():
    assert should_create_keyframe(0, 0.0)
    assert should_create_keyframe(3, 0.6, 0.5)
    assert not should_create_keyframe(3, 0.4, 0.5)


# -- point selection ------------------------------------------------------------

def test_uniform_texture_selects_nothing():
    assert select_points(np.full((120, 160), 90.0), np.full((120, 160), 10.0), rect(), K) == []


def test_rich_texture_fills_budget_inside_mask():
    mask = rect()
    pts = select_points(texture(), np.full((120, 160), 10.0), mask, K, budget=300)
    assert 150 <= len(pts) <= 300
    assert all(mask.pixels[v, u] for u, v in (p.uv for p in pts))
    assert all(p.sigma == pytest.approx(0.01 * 100.0) and p.inv_depth == pytest.approx(0.1) for p in pts)


def test_checkerboard_points_on_edges():
    v, u = np.mgrid[0:120, 0:160]
    board = np.where(((u // 8) + (v // 8)) % 2 == 0, 40.0, 200.0)
    pts = select_points(board, np.full((120, 160), 10.0), rect(), K, budget=100)
    assert pts
    for p in pts:
        pu, pv = p.uv
        assert pu % 8 in (7, 0) or pv % 8 in (7, 0)


def test_depth_discontinuity_patches_rejected():
    depth = np.full((120, 160), 10.0)
    depth[:, 80:] = 20.0
    pts = select_points(texture(), depth, rect(), K, budget=300)
    # no pattern pixel may straddle the step between columns 79 and 80
    assert pts and all(p.uv[0] + 2 <= 79 or p.uv[0] - 2 >= 80 for p in pts)


# -- energy -----------------------------------------------------------------------

def test_identical_keyframes_zero_energy():
    img = texture()
    win = flat_window([img, img], [RigidTransform.identity()] * 2)
    assert photometric_energy(win) == pytest.approx(0.0, abs=1e-12)


def test_global_gain_cancels():
    img = texture()
    win = flat_window([img, 1.3 * img], [RigidTransform.identity()] * 2)
    assert photometric_energy(win) == pytest.approx(0.0, abs=1e-9)


def test_host_gain_invariance_at_any_geometry():
    # scaling an image only in its host role leaves every residual unchanged
    img = texture()
    T = se3_exp([0.05, 0.0, 0.0, 0.0, 0.01, 0.0])
    win = flat_window([img, np.roll(img, 1, axis=1)], [RigidTransform.identity(), T])
    E = photometric_energy(win)
    for k in (0.5, 2.0):
        kf = win.keyframes[0]
        patch = kf.patch.copy()
        kf.patch = patch * k
        assert abs(photometric_energy(win) - E) < 1e-9
        kf.patch = patch


def test_pose_perturbation_increases_energy(synthetic_window):
    make, _ = synthetic_window
    win = make()
    E = photometric_energy(win)
    for axis in range(6):
        for sign in (-1, 1):
            w2 = make()
            d = np.zeros(6)
            d[axis] = sign * (0.02 if axis < 3 else 0.005)
            w2.keyframes[2].pose = se3_exp(d) @ w2.keyframes[2].pose
            assert photometric_energy(w2) > E


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    errs = np.array([ba_gradient_errors(rng) for _ in range(20)])
    assert errs.max() < 1e-3


# -- optimization ----------------------------------------------------------------

def test_fixed_point_at_zero_energy():
    img = texture()
    win = flat_window([img, img, img], [RigidTransform.identity()] * 3)
    before = [kf.pose.matrix() for kf in win.keyframes]
    rho = [kf.inv_depth.copy() for kf in win.keyframes]
    optimize_window(win)
    for kf, M, r in zip(win.keyframes, before, rho):
        assert np.abs(kf.pose.matrix() - M).max() < 1e-8
        assert np.abs(kf.inv_depth - r).max() < 1e-8


def test_perturbed_window_improves(synthetic_window):
    make, centers = synthetic_window
    win = make()
    rng = np.random.default_rng(0)
    for kf in win.keyframes[1:]:
        kf.pose = RigidTransform.from_translation(rng.normal(0, 0.05, 3)) @ kf.pose
    first = win.keyframes[0].pose.matrix()
    err_before = center_error(win, centers)
    rep = optimize_window(win)
    assert rep.energy_after < rep.energy_before
    assert all(b <= a for a, b in zip(rep.history, rep.history[1:]))
    assert center_error(win, centers) < err_before
    assert np.array_equal(win.keyframes[0].pose.matrix(), first)  # gauge


def test_too_few_points_raise():
    img = texture()
    win = flat_window([img, img], [RigidTransform.identity()] * 2)
    for kf in win.keyframes:
        kf.active[5:] = False
    win.keyframes[1].active[:] = False
    with pytest.raises(NotEnoughData):
        optimize_window(win)


# -- sliding ------------------------------------------------------------------------

def _dummy_keyframe(f):
    kf = Keyframe(f, np.zeros((10, 10)), rect((10, 10), (0, 0, 10, 10)), RigidTransform.from_translation([f, 0, 0]))
    kf.set_points([HostPoint(f, (5, 5), 0.1, 1.0)])
    return kf


def test_slide_drops_oldest():
    win = SlidingWindow(K, BAConfig(capacity=6), [_dummy_keyframe(f) for f in range(7)])
    slide_window(win)
    assert [kf.frame_id for kf in win.keyframes] == [1, 2, 3, 4, 5, 6]
    # poses stay expressed in the trajectory's reference frame
    assert np.allclose(win.keyframes[0].pose.translation, [1, 0, 0])
    slide_window(win)
    assert len(win) == 6
