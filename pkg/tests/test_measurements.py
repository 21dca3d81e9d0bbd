import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from esfm.errors import (DuplicateObservation, EmptyCamera, IndexOutOfRange, NonUpperTriangular,
                         SingularIntrinsics, TrackTooShort)
from esfm.measurements import Observation, build_measurements, hartley_normalize, intrinsics_normalize


def test_minimal_tensor():
    t = build_measurements([Observation(0, 0, 10, 20), Observation(1, 0, 30, 40)], 2, 1)
    assert t.p == 2
    assert t.track_counts[0] == 2


def test_short_track_rejected():
    with pytest.raises(TrackTooShort) as exc:
        build_measurements([Observation(0, 0, 10, 20)], 2, 1)
    assert exc.value.track == 0


def test_other_validation_errors():
    with pytest.raises(DuplicateObservation):
        build_measurements([(0, 0, 1, 2), (0, 0, 3, 4), (1, 0, 1, 1)], 2, 1)
    with pytest.raises(IndexOutOfRange):
        build_measurements([(0, 0, 1, 2), (2, 0, 3, 4)], 2, 1)
    with pytest.raises(EmptyCamera):
        build_measurements([(0, 0, 1, 2), (1, 0, 3, 4)], 3, 1)


def test_both_orders_same_pairs():
    obs = [(0, 0, 1, 1), (1, 0, 2, 2), (2, 1, 3, 3), (0, 1, 4, 4), (1, 1, 5, 5)]
    t = build_measurements(obs, 3, 2)
    assert t.p == 5
    assert set(t.camera_major()) == set(t.track_major()) == {(o[0], o[1]) for o in obs}
    assert t.camera_major() == sorted(t.camera_major())
    assert [j for _, j in t.track_major()] == sorted(j for _, j in t.track_major())


def test_permuted_input_gives_same_tensor(rng):
    obs = [(i, j, float(rng.normal()), float(rng.normal())) for i in range(4) for j in range(6)
           if (i + j) % 3 != 0]
    a = build_measurements(obs, 4, 6)
    b = build_measurements([obs[k] for k in rng.permutation(len(obs))], 4, 6)
    for f in ("cam", "track", "points"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def _single_cam(points):
    pts = [(0, j, x, y) for j, (x, y) in enumerate(points)]
    pts += [(1, j, 0.0, 0.0) for j in range(len(points))]
    return build_measurements(pts, 2, len(points))


def test_hartley_two_points():
    t, tr = hartley_normalize(_single_cam([(0, 0), (2, 0)]))
    s = np.sqrt(2)
    assert np.allclose(t.points[t.cam == 0], [[-s, 0], [s, 0]], atol=1e-15)
    N = tr[0].matrix
    assert N[0, 0] == pytest.approx(s)
    assert N[0, 2] == pytest.approx(-s)  # scale * translation (-1, 0)


def test_hartley_zero_spread():
    obs = [(0, 0, 5, 7), (1, 0, 1, 1), (1, 1, 2, 3), (0, 1, 5, 7)]
    t, tr = hartley_normalize(build_measurements(obs, 2, 2))
    assert np.allclose(t.points[t.cam == 0], 0)
    assert tr[0].matrix[0, 0] == 1.0


def test_hartley_statistics(rng):
    raw = rng.normal(300, 80, size=(20, 2))
    t, tr = hartley_normalize(_single_cam(raw))
    pts = t.points[t.cam == 0]
    assert np.linalg.norm(pts.mean(0)) < 1e-12
    assert abs(np.linalg.norm(pts, axis=1).mean() - np.sqrt(2)) < 1e-12
    assert np.allclose(tr[0].matrix @ tr[0].inverse, np.eye(3), atol=1e-12)
    assert np.allclose(tr[0].unapply(pts), raw, rtol=1e-9)


K0 = np.array([[1000.0, 0, 500], [0, 1000, 500], [0, 0, 1]])


def test_intrinsics_examples():
    t = build_measurements([(0, 0, 500, 500), (1, 0, 1500, 500)], 2, 1)
    out, tr = intrinsics_normalize(t, [K0, K0])
    assert np.allclose(out.points, [[0, 0], [1, 0]], atol=1e-15)


def test_intrinsics_roundtrip(rng):
    K = np.array([[800 + 100 * rng.random(), 0.3, 310], [0, 750, 250], [0, 0, 1]])
    raw = rng.uniform(0, 640, size=(2, 2))
    t = build_measurements([(0, 0, *raw[0]), (1, 0, *raw[1])], 2, 1)
    out, tr = intrinsics_normalize(t, [K, K])
    back = np.array([tr[i].unapply(out.points[out.cam == i])[0] for i in range(2)])
    assert np.allclose(back, raw, rtol=1e-9)


def test_intrinsics_errors():
    t = build_measurements([(0, 0, 1, 1), (1, 0, 2, 2)], 2, 1)
    bad = K0.copy()
    bad[1, 0] = 1
    with pytest.raises(NonUpperTriangular):
        intrinsics_normalize(t, [K0, bad])
    with pytest.raises(SingularIntrinsics):
        intrinsics_normalize(t, [K0, np.diag([1.0, 0.0, 1.0])])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_restrict_preserves_invariants(seed):
    from conftest import random_tensor
    rng = np.random.default_rng(seed)
    t, _, _ = random_tensor(rng, 8, 20)
    keep = np.sort(rng.choice(8, size=5, replace=False))
    try:
        sub, cams, tracks = t.restrict(keep)
    except Exception:
        return  # an empty camera in the subset is rejected, not repaired
    assert (sub.track_counts >= 2).all() and (sub.camera_counts >= 1).all()
    assert list(cams) == list(keep)
    dense = t.dense()[np.ix_(cams, tracks)]
    assert np.array_equal(np.isfinite(dense[..., 0]), sub.visibility())
