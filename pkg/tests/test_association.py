import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from directmot.association import (
    AssociationConfig,
    AssociationResult,
    Track,
    TrackerState,
    TrackStatus,
    assign,
    associate,
    update_tracks,
)
from directmot.errors import ConsistencyError
from directmot.geometry import RigidTransform
from directmot.imaging import InstanceMask


def box_mask(u0, w, shape=(40, 120)):
    m = np.zeros(shape, bool)
    m[10:30, u0:u0 + w] = True
    return InstanceMask(m)


# -- assignment ----------------------------------------------------------------

def test_assignment_examples():
    assert assign(np.array([[0.9, 0.1], [0.2, 0.8]])) == [(0, 0), (1, 1)]
    assert assign(np.zeros((3, 2))) == []
    assert assign(np.array([[0.04]])) == []
    assert assign(np.zeros((0, 4))) == []


def brute_force_best(M):
    n, m = M.shape
    best = 0.0
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            best = max(best, sum(M[r, c] for r, c in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(n), m):
            best = max(best, sum(M[r, c] for c, r in enumerate(rows)))
    return best


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_hungarian_matches_brute_force(n, m, seed):
    M = np.random.default_rng(seed).random((n, m))
    pairs = assign(M, min_iou=1e-12)
    assert len({r for r, _ in pairs}) == len(pairs) == len({c for _, c in pairs})
    assert sum(M[r, c] for r, c in pairs) == pytest.approx(brute_force_best(M), abs=1e-12)


def test_associate_masks_and_determinism():
    a, b = box_mask(10, 20), box_mask(60, 20)
    objects = [(0, box_mask(12, 20)), (1, box_mask(58, 20)), (2, box_mask(95, 10))]
    tracks = [(5, a), (7, b)]
    res = associate(objects, tracks)
    assert res.matches == [(0, 5), (1, 7)]
    assert res.unmatched_objects == [2] and res.unmatched_tracks == []
    again = associate(objects[::-1], tracks[::-1])
    assert again == res


def test_associate_empty_sides():
    assert associate([], [(1, box_mask(0, 5))]) == AssociationResult([], [], [1])
    assert associate([(0, box_mask(0, 5))], []) == AssociationResult([], [0], [])


def test_threshold_rejects_weak_overlap():
    # 1 px overlap between 20 px wide boxes: IoU = 1/39 < 0.05
    res = associate([(0, box_mask(29, 20))], [(1, box_mask(10, 20))])
    assert res.matches == [] and res.unmatched_objects == [0]
    with pytest.raises(ValueError):
        AssociationConfig(min_iou=1.0)


# -- lifecycle ---------------------------------------------------------------------

def _state_with_track(tracked_3d=True):
    state = TrackerState()
    update_tracks(AssociationResult([], [0], []), state, 0, {0: box_mask(10, 20)}, {}, {})
    state.tracks[1].tracked_3d = tracked_3d
    return state


def test_unmatched_track_terminates_after_age_max():
    state = _state_with_track()
    tr = state.tracks[1]
    for f in (1, 2):
        update_tracks(AssociationResult([], [], [1]), state, f, {}, {}, {1: box_mask(10 + f, 20)})
        assert tr.status is TrackStatus.PENDING and tr.age == f
        assert tr.mask_frame == f
    update_tracks(AssociationResult([], [], [1]), state, 3, {}, {}, {1: box_mask(13, 20)})
    assert tr.status is TrackStatus.TERMINATED
    assert state.live() == []


def test_new_object_gets_next_id_and_match_resets_age():
    state = _state_with_track()
    update_tracks(AssociationResult([], [], [1]), state, 1, {}, {}, {1: box_mask(11, 20)})
    assert state.tracks[1].age == 1
    M = RigidTransform.from_translation([0.1, 0, 0])
    owner = update_tracks(AssociationResult([(0, 1)], [1], []), state, 2,
                          {0: box_mask(12, 20), 1: box_mask(80, 20)}, {0: M}, {})
    assert owner == {0: 1, 1: 2}
    tr = state.tracks[1]
    assert tr.age == 0 and tr.status is TrackStatus.ACTIVE and 2 in tr.masks and tr.motions[2] is M
    assert state.tracks[2].first_frame == 2


def test_terminated_ids_never_reused():
    state = _state_with_track()
    for f in (1, 2, 3):
        update_tracks(AssociationResult([], [], [1]), state, f, {}, {}, {})
    owner = update_tracks(AssociationResult([], [0], []), state, 4, {0: box_mask(10, 20)}, {}, {})
    assert owner == {0: 2}


def test_untracked_track_without_warp_is_kept_until_age_max():
    state = _state_with_track(tracked_3d=False)
    update_tracks(AssociationResult([], [], [1]), state, 1, {}, {}, {})
    assert state.tracks[1].alive


def test_duplicate_match_is_inconsistent():
    state = _state_with_track()
    with pytest.raises(ConsistencyError):
        update_tracks(AssociationResult([(0, 1), (1, 1)], [], []), state, 1,
                      {0: box_mask(10, 20), 1: box_mask(11, 20)}, {}, {})
    state.tracks[1].status = TrackStatus.TERMINATED
    with pytest.raises(ConsistencyError):
        update_tracks(AssociationResult([(0, 1)], [], []), state, 1, {0: box_mask(10, 20)}, {}, {})


def test_track_last_motion():
    tr = Track(1, 0)
    assert tr.last_motion() is None
    M = RigidTransform.from_translation([1, 0, 0])
    tr.motions = {1: RigidTransform.identity(), 2: M}
    assert tr.last_motion() is M
