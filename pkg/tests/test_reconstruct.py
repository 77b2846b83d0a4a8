import numpy as np
import pytest

from fringelab.evaluation import fit_sphere
from fringelab.phase import retrieve_ps
from fringelab.rig import make_rig
from fringelab.simulator import make_sphere_pair_scene, make_test_scene, render_views
from fringelab.reconstruct import reconstruct


@pytest.fixture(scope="module")
def scene_views():
    rig = make_rig(periods=12)
    stacks, gts = render_views(make_test_scene(), rig, 3, 0, 2)
    return rig, [retrieve_ps(s) for s in stacks], gts


def test_projector_method_is_exact(scene_views):
    rig, _, (g1, _) = scene_views
    rec = reconstruct(g1.Phi, rig, mask=g1.mask)
    assert np.array_equal(rec.mask, g1.mask)
    err = np.abs(rec.points[g1.mask] - g1.points[g1.mask])
    assert err.max() < 1e-6
    assert np.all(np.isnan(rec.depth[~g1.mask]))


def test_stereo_method_close_to_truth(scene_views):
    rig, (p1, p2), (g1, g2) = scene_views
    rec = reconstruct(g1.Phi, rig, "stereo", phi2=p2.phi, mask=g1.mask, mask2=g2.mask)
    assert rec.mask.sum() > 0.8 * g1.mask.sum()
    err = np.abs(rec.depth - g1.depth)[rec.mask]
    assert np.median(err) < 0.02
    assert np.all(rec.residual[rec.mask] >= 0)


def test_reconstruct_argument_errors(scene_views):
    rig, _, (g1, _) = scene_views
    with pytest.raises(ValueError):
        reconstruct(g1.Phi, rig, "stereo")
    with pytest.raises(ValueError):
        reconstruct(g1.Phi, rig, "laser")


def test_out_of_pattern_phase_is_dropped(scene_views):
    rig, _, (g1, _) = scene_views
    Phi = g1.Phi.copy()
    Phi[g1.mask] = -1.0
    rec = reconstruct(Phi, rig, mask=g1.mask)
    assert not rec.mask.any()


def test_sphere_radius_from_ground_truth_phase():
    rig = make_rig(periods=12)
    scene = make_sphere_pair_scene()
    _, (g1,) = render_views(scene, rig, 3, 0, 1)
    rec = reconstruct(g1.Phi, rig, mask=g1.mask)
    on1 = rec.mask & (g1.surface == 0)
    fit = fit_sphere(rec.points[on1])
    assert abs(fit.radius - 25.3989) < 1e-6
