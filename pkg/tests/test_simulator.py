import json

import numpy as np
import pytest

from fringelab.fpi import read_fpi, read_ply, write_fpi, write_ply
from fringelab.geometry import backproject_ray, project, projector_column_to_phase
from fringelab.rig import make_rig
from fringelab.scene import HeightField, Plane, ReflectivityField, Scene, Sphere
from fringelab.simulator import (
    TWO_PI,
    DatasetManifest,
    RenderError,
    generate_dataset,
    make_discontinuity_scene,
    make_staircase_scene,
    make_test_scene,
    render_fringe_stack,
    render_reference,
    stage_seed,
)


@pytest.fixture(scope="module")
def rig():
    return make_rig(periods=12)


def plane_scene(z=0.0, A=0.5, B=0.25, **kw):
    return Scene((Plane((0, 0, 1), z),), ReflectivityField(A), ReflectivityField(B), **kw)


def test_intensity_closed_form(rig):
    stack, gt = render_fringe_stack(plane_scene(), rig.cameras[0], rig.projector, 3)
    m = gt.mask
    expected = 0.5 + 0.25 * np.cos(gt.Phi[m])
    np.testing.assert_allclose(stack.images[0][m], expected, atol=1e-15)


def test_reference_orders_match_projector_column_oracle(rig):
    cam = rig.cameras[0]
    stack, gt = render_fringe_stack(plane_scene(), cam, rig.projector, 3)
    # independent oracle: intersect every pixel ray with z = 0, project into the projector
    ray = backproject_ray(cam.pixel_grid(), cam)
    pts = ray.at(-ray.origin[..., 2] / ray.direction[..., 2])
    Phi = projector_column_to_phase(project(pts, rig.projector)[..., 0], rig.projector)
    m = gt.mask
    np.testing.assert_allclose(gt.Phi[m], Phi[m], atol=1e-9)
    # orders follow the (-pi, pi] wrap convention
    np.testing.assert_array_equal(gt.k[m], np.ceil((Phi[m] - np.pi) / TWO_PI))


def test_ground_truth_invariants(rig):
    _, gt = render_fringe_stack(make_test_scene(), rig.cameras[0], rig.projector, 3)
    m = gt.mask
    assert np.array_equal(gt.Phi[m], gt.phi[m] + TWO_PI * gt.k[m])
    assert gt.k[m].min() >= 0 and gt.k[m].max() <= rig.periods - 1
    assert np.all(gt.phi[m] > -np.pi) and np.all(gt.phi[m] <= np.pi)


def test_noise_free_energy_bound(rig):
    stack, gt = render_fringe_stack(make_test_scene(), rig.cameras[0], rig.projector, 4)
    lo, hi = gt.A - gt.B, gt.A + gt.B
    assert np.all(stack.images >= lo - 1e-12) and np.all(stack.images <= hi + 1e-12)
    assert stack.images.min() >= 0 and stack.images.max() <= 1


def test_determinism(rig):
    a, _ = render_fringe_stack(make_test_scene(), rig.cameras[0], rig.projector, 3, rng_seed=1)
    b, _ = render_fringe_stack(make_test_scene(), rig.cameras[0], rig.projector, 3, rng_seed=2)
    assert np.array_equal(a.images, b.images)
    noisy = plane_scene(noise_sigma=0.01)
    c, _ = render_fringe_stack(noisy, rig.cameras[0], rig.projector, 3, rng_seed=5)
    d, _ = render_fringe_stack(noisy, rig.cameras[0], rig.projector, 3, rng_seed=5)
    e, _ = render_fringe_stack(noisy, rig.cameras[0], rig.projector, 3, rng_seed=6)
    assert np.array_equal(c.images, d.images)
    assert not np.array_equal(c.images, e.images)


def test_quantization_gives_256_levels(rig):
    stack, _ = render_fringe_stack(plane_scene(noise_sigma=0.005, quantize=True), rig.cameras[0], rig.projector, 3)
    np.testing.assert_allclose(stack.images * 255, np.round(stack.images * 255), atol=1e-9)


def test_empty_render(rig):
    with pytest.raises(RenderError, match="empty render"):
        render_fringe_stack(Scene((Sphere((0, 0, 5000.0), 1.0),)), rig.cameras[0], rig.projector, 3)


def test_shadowed_pixels_are_masked(rig):
    # a small sphere floating high casts a projector shadow on the plane
    scene = Scene((Plane((0, 0, 1), -40.0), Sphere((0, 0, 40.0), 15.0)))
    _, gt = render_fringe_stack(scene, rig.cameras[0], rig.projector, 3)
    on_plane = gt.surface == 0
    shadow = on_plane & ~gt.mask & np.isfinite(gt.depth)
    assert shadow.sum() > 20
    assert np.all(gt.k[shadow] == -1)


def test_scene_rejects_overbright_reflectivity():
    with pytest.raises(ValueError):
        Scene((Plane((0, 0, 1), 0),), ReflectivityField(0.8), ReflectivityField(0.3))
    with pytest.raises(ValueError):
        Scene(())


def test_heightfield_hits_match_bilinear_surface():
    z = np.array([[0.0, 10.0], [5.0, 20.0]])
    hf = HeightField((0.0, 10.0), (0.0, 10.0), z)
    o = np.array([[2.5, 7.5, 100.0]])
    d = np.array([[0.0, 0.0, -1.0]])
    s = hf.intersect(o, d)
    # bilinear height at (2.5, 7.5)
    expected = 0.25 * 0.75 * 0 + 0.75 * 0.75 * 5.0 + 0.25 * 0.25 * 10 + 0.25 * 0.75 * 20
    expected = (1 - 0.25) * (1 - 0.75) * 0 + 0.25 * (1 - 0.75) * 10 + (1 - 0.25) * 0.75 * 5 + 0.25 * 0.75 * 20
    assert 100 - s[0] == pytest.approx(expected, abs=1e-9)


# -- reference ------------------------------------------------------------------------


def test_reference_record(rig):
    ref = render_reference(rig)
    k = ref.k_ref[ref.mask]
    assert k.min() >= 0 and k.max() <= rig.periods - 1
    again = render_reference(rig)
    assert np.array_equal(ref.stack1.images, again.stack1.images)
    assert np.array_equal(ref.Phi_ref, again.Phi_ref)
    # along the fringe axis the reference phase is monotone in every row
    for row, m in zip(ref.Phi_ref, ref.mask):
        d = np.diff(row[m])
        assert np.all(d > 0) or np.all(d < 0)


def test_reference_needs_two_cameras(rig):
    from fringelab.rig import Rig

    with pytest.raises(ValueError):
        render_reference(Rig(rig.cameras[:1], rig.projector))


# -- discontinuity scene ----------------------------------------------------------------


def seam_gradients(rig, scene):
    stack, gt = render_fringe_stack(scene, rig.cameras[0], rig.projector, 3)
    dI = np.abs(np.diff(stack.images[0], axis=1))
    both = gt.mask[:, 1:] & gt.mask[:, :-1]
    seam = both & (gt.surface[:, 1:] != gt.surface[:, :-1])
    interior = both & (gt.surface[:, 1:] == gt.surface[:, :-1])
    return dI[seam].max(), np.median(dI[interior]), gt, seam


@pytest.mark.parametrize("K", [12, 48])
def test_discontinuity_scene_hides_the_seam(K):
    rig = make_rig(periods=K)
    seam_max, median, gt, seam = seam_gradients(rig, make_discontinuity_scene(rig))
    assert seam.sum() > 50
    assert seam_max < 3 * median
    jump = np.abs(np.diff(gt.k, axis=1))[seam]
    assert np.all(jump >= 1)
    depth = gt.depth[gt.mask]
    assert depth.min() > rig.zmin and depth.max() < rig.zmax


def test_discontinuity_half_period_shows_seam(rig):
    seam_max, median, _, _ = seam_gradients(rig, make_discontinuity_scene(rig, gap_periods=0.5))
    assert seam_max > 3 * median


def test_staircase_steps_are_uniform_phase_shifts():
    rig = make_rig(periods=48)
    scene = make_staircase_scene(rig, span_periods=3.0)
    _, gt = render_fringe_stack(scene, rig.cameras[0], rig.projector, 3)
    ref = render_reference(rig)
    m = gt.mask & ref.mask
    dk = (gt.Phi - ref.Phi_ref) / TWO_PI
    expected = np.linspace(-3, 3, 12)
    seen = []
    for i in range(len(scene.primitives)):
        on = m & (gt.surface == i)
        if on.any():
            # fronto-parallel plates shift the phase uniformly
            assert np.ptp(dk[on]) < 1e-9
            seen.append(dk[on][0])
    assert len(seen) == 12
    np.testing.assert_allclose(sorted(seen), expected, atol=1e-6)


# -- datasets ------------------------------------------------------------------------------


def test_generate_dataset(tmp_path, rig):
    m1 = generate_dataset(6, rig, {"views": 2}, 3, tmp_path / "a")
    m2 = generate_dataset(6, rig, {"views": 2}, 3, tmp_path / "b")
    assert m1.records[0]["reference"] and not any(r["reference"] for r in m1.records[1:])
    assert json.loads((tmp_path / "a/manifest.json").read_text()) == json.loads((tmp_path / "b/manifest.json").read_text())
    for rel in m1.records[3]["stacks"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    loaded = DatasetManifest.load(tmp_path / "a/manifest.json")
    assert {r["split"] for r in loaded.records} == {"train", "val"}
    for rec in loaded.records:
        data = loaded.load_record(rec)
        assert len(data["stacks"]) == 2
        assert data["stacks"][0].shape == (3, 96, 128)
        assert data["truth"][0][..., 4].any()
        assert data["labels"][0].shape == (96, 128, 2)


def test_dataset_manifest_missing_file(tmp_path, rig):
    m = generate_dataset(2, rig, {"views": 2}, 0, tmp_path)
    (tmp_path / m.records[1]["stacks"][0]).unlink()
    with pytest.raises(FileNotFoundError):
        DatasetManifest.load(tmp_path / "manifest.json")


def test_dataset_rejects_zero_count(tmp_path, rig):
    with pytest.raises(ValueError):
        generate_dataset(0, rig, None, 0, tmp_path)


def test_stage_seed_is_stable():
    assert stage_seed(7, "camera", 1) == stage_seed(7, "camera", 1)
    assert stage_seed(7, "camera", 1) != stage_seed(7, "camera", 2)
    assert stage_seed(7, "camera", 1) != stage_seed(8, "camera", 1)


# -- file formats ------------------------------------------------------------------------


def test_fpi_round_trip(tmp_path):
    a = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_fpi(tmp_path / "a.fpi", a)
    raw = (tmp_path / "a.fpi").read_bytes()
    assert raw.startswith(b"FPI1 3 2 4\n")
    assert np.array_equal(read_fpi(tmp_path / "a.fpi"), a)
    write_fpi(tmp_path / "b.fpi", a[..., 0])
    assert read_fpi(tmp_path / "b.fpi").shape == (2, 3)
    (tmp_path / "c.fpi").write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="truncated"):
        read_fpi(tmp_path / "c.fpi")


def test_ply_round_trip(tmp_path):
    pts = np.random.default_rng(0).normal(size=(10, 3)) * 50
    write_ply(tmp_path / "p.ply", pts)
    np.testing.assert_allclose(read_ply(tmp_path / "p.ply"), pts, atol=1e-9)
    write_ply(tmp_path / "e.ply", np.zeros((0, 3)))
    assert read_ply(tmp_path / "e.ply").shape == (0, 3)
