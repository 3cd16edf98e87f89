import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tvg import geom
from tvg.errors import AlignmentDegenerateError, DegenerateConfigurationError, DegenerateTransferError
from tvg.geom import CameraIntrinsics, Pose


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return geom.so3_exp(axis * rng.uniform(0, max_angle))


def random_triplet(rng, collinear=False):
    """Three cameras (view 1 canonical) and a point in front of all of them."""
    X = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(3, 6)])
    if collinear:
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        c2, c3 = rng.uniform(0.2, 1.0) * d, -rng.uniform(0.2, 1.0) * d
        R2 = random_rotation(rng, 0.2)
        R3 = random_rotation(rng, 0.2)
    else:
        c2, c3 = rng.normal(scale=0.5, size=3), rng.normal(scale=0.5, size=3)
        R2, R3 = random_rotation(rng, 0.3), random_rotation(rng, 0.3)
    # camera_from_view1: x_c = R (x - c)
    P2 = Pose(R2, -R2 @ c2)
    P3 = Pose(R3, -R3 @ c3)
    pts = []
    for P in (Pose.identity(), P2, P3):
        x = P.apply(X)
        pts.append(x / x[2])
    return P2, P3, pts


def test_se3_exp_zero_is_identity():
    P = geom.se3_exp(np.zeros(6))
    assert np.array_equal(P.R, np.eye(3))
    assert np.array_equal(P.t, np.zeros(3))


def test_se3_exp_pure_translation():
    P = geom.se3_exp([0, 0, 0, 1, 2, 3])
    assert np.allclose(P.R, np.eye(3))
    assert np.allclose(P.t, [1, 2, 3])


def test_se3_round_trip_seeded():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        w = rng.normal(size=3)
        w *= rng.uniform(0, np.pi - 1e-3) / np.linalg.norm(w)
        v = rng.normal(size=3) * 2
        xi = np.concatenate([w, v])
        worst = max(worst, np.linalg.norm(geom.se3_log(geom.se3_exp(xi)) - xi))
    assert worst < 1e-9


def test_se3_log_near_pi_is_canonical():
    w = np.array([0.0, 0.0, np.pi - 1e-7])
    out = geom.so3_log(geom.so3_exp(w))
    assert np.allclose(out, w, atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_pose_inverse_and_orthonormality(xi):
    P = geom.se3_exp(xi)
    assert P.is_valid()
    I = P @ P.inverse()
    assert np.allclose(I.R, np.eye(3), atol=1e-12)
    assert np.allclose(I.t, 0, atol=1e-12)


def test_project_axis_point():
    K = CameraIntrinsics(100, 100, 50, 40, 100, 80)
    pr = geom.project(K, Pose.identity(), [0, 0, 1])
    assert np.allclose(pr.pixel, [50, 40]) and pr.depth == 1


def test_project_pinhole_arithmetic():
    K = CameraIntrinsics(100, 100, 50, 50, 100, 100)
    pr = geom.project(K, Pose.identity(), [0.1, 0.2, 1.0])
    assert np.allclose(pr.pixel, [60, 70])


def test_project_behind_camera_not_visible():
    K = CameraIntrinsics(100, 100, 50, 50, 100, 100)
    assert geom.project(K, Pose.identity(), [0, 0, -1]) is None


E = np.eye(3)


def test_trifocal_slices_example_one():
    T = geom.trifocal_from_poses(Pose(np.eye(3), [1, 0, 0]), Pose(np.eye(3), [2, 0, 0]))
    e1, e2, e3 = E
    assert np.allclose(T.slices[0], np.outer(e1, e1))
    assert np.allclose(T.slices[1], 2 * np.outer(e2, e1) - np.outer(e1, e2))
    assert np.allclose(T.slices[2], 2 * np.outer(e3, e1) - np.outer(e1, e3))


def test_trifocal_slices_example_two():
    T = geom.trifocal_from_poses(Pose(np.eye(3), [1, 0, 0]), Pose(np.eye(3), [0, 1, 0]))
    e1, e2, _ = E
    assert np.allclose(T.slices[0], np.outer(e1, e2) - np.outer(e1, e1))


def test_trifocal_linear_in_translations():
    rng = np.random.default_rng(1)
    P2, P3, _ = random_triplet(rng)
    T = geom.trifocal_from_poses(P2, P3)
    T3 = geom.trifocal_from_poses(Pose(P2.R, 3 * P2.t), Pose(P3.R, 3 * P3.t))
    assert np.allclose(T3.slices, 3 * T.slices)


def test_trifocal_zero_baseline_rejected():
    with pytest.raises(DegenerateConfigurationError):
        geom.trifocal_from_poses(Pose.identity(), Pose(np.eye(3), [0, 0, 1e-9]))


def test_epipolar_transfer_zero_tensor():
    T = geom.TrifocalTensor(np.zeros((3, 3, 3)))
    assert np.array_equal(geom.epipolar_transfer(T, [1, 2, 1], [3, 4, 1]), np.zeros(3))


@pytest.mark.parametrize("x,y,z", [(0.3, -0.2, 1.0), (1.5, 2.0, 0.5), (-2.0, 0.1, 3.0)])
def test_epipolar_transfer_symbolic_expansion(x, y, z):
    T = geom.trifocal_from_poses(Pose(np.eye(3), [1, 0, 0]), Pose(np.eye(3), [2, 0, 0]))
    l = geom.epipolar_transfer(T, [x, y, z], [x + 1, y, z])
    assert np.allclose(l, [x * (x + 1) - y**2 - z**2, 2 * y * (x + 1), 2 * z * (x + 1)])


def test_epipolar_transfer_bilinear():
    rng = np.random.default_rng(2)
    P2, P3, (p1, p2, _) = random_triplet(rng)
    T = geom.trifocal_from_poses(P2, P3)
    a = geom.epipolar_transfer(T, 2.5 * p1, -0.7 * p2)
    assert np.allclose(a, 2.5 * -0.7 * geom.epipolar_transfer(T, p1, p2))


def test_residual_examples():
    assert geom.trifocal_residual([1, 2, 3], [1, 2, 3]) == 0
    assert geom.trifocal_residual([1, 0, 1], [0, 1, 0]) == pytest.approx(2.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.floats(-5, 5), st.floats(-5, 5))
def test_residual_homogeneity(p, l, lam, mu):
    r = geom.trifocal_residual(p, l)
    scaled = geom.trifocal_residual(lam * np.array(p), mu * np.array(l))
    assert scaled == pytest.approx(lam**2 * mu**2 * r, rel=1e-9, abs=1e-9)


def test_checked_transfer_exact_triplets():
    rng = np.random.default_rng(3)
    for _ in range(200):
        P2, P3, (p1, p2, p3) = random_triplet(rng)
        pred = geom.point_transfer_checked(geom.trifocal_from_poses(P2, P3), p1, p2)
        err = np.linalg.norm(np.cross(pred, p3)) / (np.linalg.norm(pred) * np.linalg.norm(p3))
        assert err < 1e-9


def test_checked_transfer_collinear_cameras():
    rng = np.random.default_rng(4)
    for _ in range(200):
        P2, P3, (p1, p2, p3) = random_triplet(rng, collinear=True)
        pred = geom.point_transfer_checked(geom.trifocal_from_poses(P2, P3), p1, p2)
        err = np.linalg.norm(np.cross(pred, p3)) / (np.linalg.norm(pred) * np.linalg.norm(p3))
        assert err < 1e-9


def test_checked_transfer_deterministic():
    rng = np.random.default_rng(5)
    P2, P3, (p1, p2, _) = random_triplet(rng)
    T = geom.trifocal_from_poses(P2, P3)
    assert np.array_equal(geom.point_transfer_checked(T, p1, p2),
                          geom.point_transfer_checked(T, p1, p2))


def test_checked_transfer_rejects_zero_tensor():
    with pytest.raises(DegenerateTransferError):
        geom.point_transfer_checked(geom.TrifocalTensor(np.zeros((3, 3, 3))), [0.1, 0.2, 1], [0.3, 0.1, 1])


def test_huber_examples():
    assert geom.huber(0.0, 1.0) == 0.0
    assert geom.huber(0.25, 1.0) == pytest.approx(0.125)
    assert geom.huber(9.0, 1.0) == pytest.approx(2.5)


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 100), st.floats(1e-3, 10))
def test_huber_bounded_by_quadratic(r, delta):
    h = geom.huber(r * r, delta)
    assert h <= 0.5 * r * r + 1e-12
    if r <= delta:
        assert h == pytest.approx(0.5 * r * r)
    else:
        assert h < 0.5 * r * r


def test_huber_continuous_at_knee():
    d = 0.3
    lo, hi = geom.huber((d - 1e-9) ** 2, d), geom.huber((d + 1e-9) ** 2, d)
    assert abs(hi - lo) < 1e-8
    wl, wh = geom.huber_weight((d - 1e-9) ** 2, d), geom.huber_weight((d + 1e-9) ** 2, d)
    assert abs(wh - wl) < 1e-7


def test_procrustes_identity_and_scale():
    rng = np.random.default_rng(6)
    src = rng.normal(size=(20, 3))
    sim = geom.procrustes_align(src, src)
    assert sim.scale == pytest.approx(1) and np.allclose(sim.R, np.eye(3)) and np.allclose(sim.t, 0)
    sim = geom.procrustes_align(src, 2 * src)
    assert sim.scale == pytest.approx(2) and np.allclose(sim.R, np.eye(3)) and np.allclose(sim.t, 0, atol=1e-12)


def test_procrustes_noise_free_recovery():
    rng = np.random.default_rng(7)
    for _ in range(50):
        src = rng.uniform(-1, 1, size=(30, 3))
        truth = geom.SimilarityTransform(rng.uniform(0.2, 5), random_rotation(rng), rng.normal(size=3))
        sim = geom.procrustes_align(src, truth.apply(src))
        assert np.max(np.abs(sim.apply(src) - truth.apply(src))) < 1e-10
        assert abs(sim.scale - truth.scale) < 1e-10


def test_procrustes_noisy_scale_monte_carlo():
    rng = np.random.default_rng(8)
    for _ in range(100):
        src = rng.uniform(-0.5, 0.5, size=(100, 3))
        truth = geom.SimilarityTransform(rng.uniform(0.5, 2), random_rotation(rng), rng.normal(size=3))
        noisy = src + rng.normal(scale=0.01, size=src.shape)
        sim = geom.procrustes_align(noisy, truth.apply(src))
        assert abs(sim.scale / truth.scale - 1) < 0.01


def test_procrustes_optimality_against_perturbations():
    rng = np.random.default_rng(9)
    src = rng.normal(size=(40, 3))
    dst = 1.3 * src @ random_rotation(rng).T + 0.5 + rng.normal(scale=0.05, size=src.shape)
    sim = geom.procrustes_align(src, dst)
    best = np.sum((sim.apply(src) - dst) ** 2)
    for _ in range(100):
        dR = geom.so3_exp(rng.normal(scale=0.02, size=3))
        pert = geom.SimilarityTransform(sim.scale * (1 + rng.normal(scale=0.01)), dR @ sim.R,
                                        sim.t + rng.normal(scale=0.01, size=3))
        assert np.sum((pert.apply(src) - dst) ** 2) >= best


def test_procrustes_degenerate():
    with pytest.raises(AlignmentDegenerateError):
        geom.procrustes_align(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.linspace(0, 1, 10), [1, 2, 3])
    with pytest.raises(AlignmentDegenerateError):
        geom.procrustes_align(line, line)


def test_similarity_round_trip():
    rng = np.random.default_rng(10)
    sim = geom.SimilarityTransform(2.5, random_rotation(rng), rng.normal(size=3))
    x = rng.normal(size=(5, 3))
    assert np.allclose(sim.inverse().apply(sim.apply(x)), x, atol=1e-9)


def test_trimmed_procrustes_rejects_outliers():
    rng = np.random.default_rng(11)
    src = rng.uniform(-1, 1, size=(200, 3))
    truth = geom.SimilarityTransform(1.7, random_rotation(rng), rng.normal(size=3))
    dst = truth.apply(src)
    bad = rng.choice(200, 40, replace=False)
    dst[bad] = rng.uniform(-5, 5, size=(40, 3))
    sim, keep = geom.trimmed_procrustes(src, dst)
    assert abs(sim.scale - 1.7) < 1e-9
    assert not keep[bad].any()
