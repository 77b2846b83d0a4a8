import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fringelab.geometry import (
    CameraModel,
    GeometryError,
    ProjectorModel,
    RigidTransform,
    backproject_ray,
    phase_to_projector_column,
    project,
    projector_column_to_phase,
    rotation_from_axis_angle,
    triangulate_camera_projector,
    triangulate_two_view,
    undistort,
)
from fringelab.rig import jitter_rig, load_rig, make_rig, save_rig


def cam640(**kw):
    return CameraModel(fx=500, fy=500, cx=320, cy=240, width=640, height=480, **kw)


# -- project ----------------------------------------------------------------------


def test_project_optical_axis_hits_principal_point():
    np.testing.assert_allclose(project([0, 0, 1000], cam640()), [320, 240])


def test_project_offset_point():
    np.testing.assert_allclose(project([100, 0, 1000], cam640()), [370, 240])


def test_project_radial_distortion_hand_value():
    # x_d = 0.1 * (1 + 0.1 * 0.01) = 0.1001
    np.testing.assert_allclose(project([100, 0, 1000], cam640(k1=0.1)), [370.05, 240], atol=1e-12)


def test_project_behind_camera():
    with pytest.raises(GeometryError, match="behind camera"):
        project([0, 0, -5], cam640())
    with pytest.raises(GeometryError, match="behind camera"):
        project([0, 0, 0], cam640())


# -- backproject ------------------------------------------------------------------------


def test_backproject_principal_point():
    ray = backproject_ray([320, 240], cam640())
    np.testing.assert_allclose(ray.origin, [0, 0, 0])
    np.testing.assert_allclose(ray.direction, [0, 0, 1])


def test_backproject_offset_pixel():
    ray = backproject_ray([370, 240], cam640())
    np.testing.assert_allclose(ray.direction, np.array([0.1, 0, 1]) / np.hypot(0.1, 1))
    assert abs(np.linalg.norm(ray.direction) - 1) < 1e-12


def test_backproject_round_trip_with_barrel_distortion():
    cam = cam640(k1=-0.05)
    rng = np.random.default_rng(3)
    px = rng.uniform([0, 0], [639, 479], size=(1000, 2))
    ray = backproject_ray(px, cam)
    for s in (200.0, 1000.0, 5000.0):
        err = np.linalg.norm(project(ray.at(np.full(1000, s)), cam) - px, axis=1)
        assert err.max() < 1e-6


def test_undistort_divergence():
    cam = cam640(k1=-5.0)
    with pytest.raises(GeometryError, match="undistort divergence"):
        undistort(np.array([1.2, 0.9]), cam)


@settings(max_examples=40, deadline=None)
@given(
    # strong barrel distortion beyond this folds before the image corner (r = 0.8) and has no inverse there
    k1=st.floats(-0.15, 0.2), k2=st.floats(-0.03, 0.05), p1=st.floats(-0.002, 0.002),
    p2=st.floats(-0.002, 0.002), u=st.floats(0, 639), v=st.floats(0, 479),
)
def test_project_backproject_identity(k1, k2, p1, p2, u, v):
    cam = cam640(k1=k1, k2=k2, p1=p1, p2=p2, pose=RigidTransform.look_at((30, -20, 700), (0, 0, 0)))
    ray = backproject_ray([u, v], cam)
    assert np.linalg.norm(project(ray.at(650.0), cam) - [u, v]) < 1e-6


@pytest.mark.parametrize("u, v", [(0.0, 0.0), (639.0, 479.0), (0.0, 479.0)])
def test_undistort_converges_in_strong_barrel_corners(u, v):
    # the fixed-point map contracts slowly here; Newton has to finish the job
    cam = cam640(k1=-0.125, k2=-0.03125, p1=0.002, p2=-0.002)
    ray = backproject_ray([u, v], cam)
    assert np.linalg.norm(project(ray.at(650.0), cam) - [u, v]) < 1e-6


# -- rigid transforms ----------------------------------------------------------------------


def random_transform(rng):
    return RigidTransform(rotation_from_axis_angle(rng.normal(size=3), rng.uniform(0, np.pi)),
                          rng.normal(size=3) * 100)


def test_transform_composition_associative_and_inverse():
    rng = np.random.default_rng(0)
    a, b, c = (random_transform(rng) for _ in range(3))
    left = a.compose(b).compose(c)
    right = a.compose(b.compose(c))
    np.testing.assert_allclose(left.R, right.R, atol=1e-12)
    np.testing.assert_allclose(left.t, right.t, atol=1e-9)
    ident = a.compose(a.inverse())
    assert np.abs(ident.R - np.eye(3)).max() < 1e-12
    assert np.abs(ident.t).max() < 1e-12


def test_transform_rejects_non_rotation():
    with pytest.raises(GeometryError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))


def test_camera_invariants():
    with pytest.raises(GeometryError):
        CameraModel(fx=-1, fy=500, cx=320, cy=240, width=640, height=480)
    with pytest.raises(GeometryError):
        CameraModel(fx=500, fy=500, cx=640, cy=240, width=640, height=480)


# -- phase <-> projector column --------------------------------------------------------


def full_scale_projector(**kw):
    return ProjectorModel(fx=1000, fy=1000, cx=455.5, cy=569.5, width=912, height=1140, periods=48, **kw)


def test_phase_to_column_examples():
    proj = full_scale_projector()
    assert phase_to_projector_column(0.0, proj) == 0
    assert phase_to_projector_column(2 * np.pi, proj) == pytest.approx(19)
    assert phase_to_projector_column(2 * np.pi * 48, proj) == pytest.approx(912)


def test_phase_to_column_out_of_range():
    proj = full_scale_projector()
    with pytest.raises(GeometryError, match="phase out of projector range"):
        phase_to_projector_column(-0.1, proj)
    with pytest.raises(GeometryError, match="phase out of projector range"):
        phase_to_projector_column(2 * np.pi * 48 + 1e-6, proj)


def test_phase_column_monotone_and_invertible():
    proj = full_scale_projector()
    Phi = np.linspace(0, 2 * np.pi * 48, 1001)
    u = phase_to_projector_column(Phi, proj)
    assert np.all(np.diff(u) > 0)
    np.testing.assert_allclose(projector_column_to_phase(u, proj), Phi, rtol=0, atol=1e-12)


# -- camera-projector triangulation ------------------------------------------------------------


def rectified_rig():
    cam = cam640()
    proj = ProjectorModel(fx=800, fy=800, cx=455.5, cy=569.5, width=912, height=1140, periods=48,
                          pose=RigidTransform(np.eye(3), [-150.0, 0, 0]))
    return cam, proj


def test_triangulate_plane_at_500():
    cam, proj = rectified_rig()
    rng = np.random.default_rng(1)
    px = rng.uniform([0, 0], [639, 479], size=(500, 2))
    pts_true = backproject_ray(px, cam).at(np.zeros(500))
    ray = backproject_ray(px, cam)
    pts_true = ray.at(500.0 / ray.direction[:, 2])
    u_p = project(pts_true, proj)[:, 0]
    pts, res = triangulate_camera_projector(px, cam, u_p, proj)
    assert np.abs(pts[:, 2] - 500).max() < 1e-6
    assert res.max() < 1e-9


def test_triangulate_column_shift_is_monotone():
    cam, proj = rectified_rig()
    depths = [triangulate_camera_projector([320, 240], cam, u, proj)[0][2] for u in np.arange(600, 700, 1.0)]
    assert np.all(np.diff(depths) < 0) or np.all(np.diff(depths) > 0)


def test_triangulate_degenerate_intersection():
    cam = cam640()
    proj = ProjectorModel(fx=500, fy=500, cx=320, cy=240, width=640, height=480, periods=8)
    with pytest.raises(GeometryError, match="degenerate intersection"):
        triangulate_camera_projector([320, 240], cam, 320.0, proj)


def test_triangulate_with_projector_distortion():
    cam = cam640()
    proj = ProjectorModel(fx=800, fy=800, cx=455.5, cy=569.5, width=912, height=1140, periods=48,
                          pose=RigidTransform(np.eye(3), [-150.0, 0, 0]), k1=0.05)
    ray = backproject_ray([[300.0, 200.0], [400, 300]], cam)
    pts_true = ray.at(np.array([600.0, 700.0]))
    u_p = project(pts_true, proj)[:, 0]
    pts, _ = triangulate_camera_projector([[300.0, 200.0], [400, 300]], cam, u_p, proj)
    np.testing.assert_allclose(pts, pts_true, atol=1e-6)


# -- two-view triangulation -----------------------------------------------------------------------


def stereo_pair():
    return cam640(), cam640(pose=RigidTransform(np.eye(3), [-100.0, 0, 0]))


def test_two_view_disparity_example():
    c1, c2 = stereo_pair()
    p, res = triangulate_two_view([320, 240], c1, [315, 240], c2)
    assert p[2] == pytest.approx(10000.0)
    assert res < 1e-9


def test_two_view_degenerate_baseline():
    c1 = cam640()
    with pytest.raises(GeometryError, match="degenerate baseline"):
        triangulate_two_view([320, 240], c1, [320, 240], c1)


def test_two_view_round_trip_random_points():
    rig = make_rig()
    c1, c2 = rig.cameras[:2]
    rng = np.random.default_rng(5)
    pts = rng.uniform([-80, -60, -65], [80, 60, 65], size=(1000, 3))
    est, res = triangulate_two_view(project(pts, c1), c1, project(pts, c2), c2)
    assert np.abs(est - pts).max() < 1e-6
    assert res.max() < 1e-6


def test_two_view_noise_grows_with_depth_squared():
    c1, c2 = stereo_pair()
    rng = np.random.default_rng(11)
    med = []
    depths = np.array([1000.0, 2000.0, 4000.0])
    for z in depths:
        P = np.column_stack([rng.uniform(-50, 50, 4000), rng.uniform(-50, 50, 4000), np.full(4000, z)])
        p1 = project(P, c1) + rng.normal(0, 0.1, (4000, 2))
        p2 = project(P, c2) + rng.normal(0, 0.1, (4000, 2))
        est, _ = triangulate_two_view(p1, c1, p2, c2)
        med.append(np.median(np.abs(est[:, 2] - z)))
    ratios = np.array(med) / med[0]
    np.testing.assert_allclose(ratios, (depths / depths[0]) ** 2, rtol=0.2)


# -- rigs ---------------------------------------------------------------------------------


def test_rig_json_round_trip(tmp_path):
    rig = make_rig(periods=48)
    save_rig(rig, tmp_path / "rig.json")
    back = load_rig(tmp_path / "rig.json")
    assert back.periods == 48
    for a, b in zip(rig.cameras + (rig.projector,), back.cameras + (back.projector,)):
        np.testing.assert_array_equal(a.pose.R, b.pose.R)
        np.testing.assert_array_equal(a.pose.t, b.pose.t)
        assert (a.fx, a.cx, a.width) == (b.fx, b.cx, b.width)


def test_jitter_is_bounded_and_keeps_camera1():
    rig = make_rig()
    angles = []
    for seed in range(20):
        j = jitter_rig(rig, np.random.default_rng(seed), rot_deg=0.05, trans_mm=0.1)
        assert j.cameras[0] == rig.cameras[0]
        for a, b in zip(rig.cameras[1:] + (rig.projector,), j.cameras[1:] + (j.projector,)):
            dR = b.pose.R @ a.pose.R.T
            angle = np.degrees(np.arccos(np.clip((np.trace(dR) - 1) / 2, -1, 1)))
            assert angle <= 0.05 + 1e-9
            angles.append(angle)
            assert np.linalg.norm(b.center - a.center) < 0.1 + 600 * np.radians(0.05) + 1e-9
    # magnitudes spread over the whole range up to the bound
    assert min(angles) < 0.01 and max(angles) > 0.04
