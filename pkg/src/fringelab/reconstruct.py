"""Depth from absolute phase: camera-projector and camera-camera triangulation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GeometryError, project_unchecked, triangulate_camera_projector, triangulate_two_view
from .rig import Rig
from .unwrap import TWO_PI, sample_phase

METHODS = ("projector", "stereo")


@dataclass
class Reconstruction:
    points: np.ndarray  # (H, W, 3) world mm, NaN where undefined
    depth: np.ndarray  # (H, W) world z
    residual: np.ndarray  # (H, W) point-to-plane mm or reprojection px
    mask: np.ndarray

    def cloud(self) -> np.ndarray:
        return self.points[self.mask]


def _empty(shape):
    return (np.full(shape + (3,), np.nan), np.full(shape, np.nan),
            np.full(shape, np.nan), np.zeros(shape, dtype=bool))


def reconstruct_projector(Phi, rig: Rig, mask=None) -> Reconstruction:
    """Intersect camera-1 rays with the projector column planes given by ``Phi``."""
    Phi = np.asarray(Phi, dtype=np.float64)
    proj = rig.projector
    K = proj.periods
    m = np.isfinite(Phi) if mask is None else (mask & np.isfinite(Phi))
    m &= (Phi >= 0) & (Phi <= TWO_PI * K)
    pts, depth, res, ok = _empty(Phi.shape)
    rows, cols = np.nonzero(m)
    if len(rows):
        pix = np.stack([cols, rows], -1).astype(np.float64)
        u_p = Phi[rows, cols] * proj.fringe_extent / (TWO_PI * K)
        try:
            p, r = triangulate_camera_projector(pix, rig.cameras[0], u_p, proj)
        except GeometryError:
            p = np.full((len(rows), 3), np.nan)
            r = np.full(len(rows), np.nan)
        good = np.all(np.isfinite(p), axis=-1)
        pts[rows, cols] = p
        depth[rows, cols] = p[:, 2]
        res[rows, cols] = r
        ok[rows, cols] = good
    return Reconstruction(pts, depth, res, ok)


def reconstruct_stereo(Phi, phi2, rig: Rig, mask=None, mask2=None, iterations: int = 6) -> Reconstruction:
    """Camera 1 to camera 2 triangulation of phase correspondences.

    Each camera-1 pixel is seeded by its camera-projector point, projected
    into camera 2 and slid along the epipolar line until camera 2's wrapped
    phase equals the camera-1 phase (secant iterations); the two pixels are
    then triangulated with the two-camera calibration alone.
    """
    Phi = np.asarray(Phi, dtype=np.float64)
    seed = reconstruct_projector(Phi, rig, mask)
    cam1, cam2 = rig.cameras[0], rig.cameras[1]
    mask2 = np.ones(phi2.shape, dtype=bool) if mask2 is None else mask2
    pts, depth, res, ok = _empty(Phi.shape)
    rows, cols = np.nonzero(seed.mask)
    if not len(rows):
        return Reconstruction(pts, depth, res, ok)
    target = Phi[rows, cols]
    p0 = seed.points[rows, cols]
    q0, _ = project_unchecked(p0, cam2)
    ray_dir = p0 - cam1.center
    ray_dir /= np.linalg.norm(ray_dir, axis=-1, keepdims=True)
    q1, _ = project_unchecked(p0 + ray_dir, cam2)
    e = q1 - q0
    e /= np.linalg.norm(e, axis=-1, keepdims=True)

    def residual(t):
        q = q0 + t[:, None] * e
        s = sample_phase(phi2, mask2, q)
        return np.mod(s - target + np.pi, TWO_PI) - np.pi

    t_a = np.zeros(len(rows))
    f_a = residual(t_a)
    t_b = np.full(len(rows), 0.25)
    f_b = residual(t_b)
    for _ in range(iterations):
        with np.errstate(divide="ignore", invalid="ignore"):
            step = f_b * (t_b - t_a) / (f_b - f_a)
        step = np.where(np.isfinite(step), np.clip(step, -1.0, 1.0), 0.0)
        t_a, f_a = t_b, f_b
        t_b = t_b - step
        f_b = residual(t_b)
    good = np.isfinite(f_b) & (np.abs(f_b) < 1e-6)
    if np.any(good):
        p1 = np.stack([cols, rows], -1).astype(np.float64)[good]
        q = (q0 + t_b[:, None] * e)[good]
        try:
            p, r = triangulate_two_view(p1, cam1, q, cam2)
        except GeometryError:
            return Reconstruction(pts, depth, res, ok)
        rr, cc = rows[good], cols[good]
        pts[rr, cc] = p
        depth[rr, cc] = p[:, 2]
        res[rr, cc] = r
        ok[rr, cc] = True
    return Reconstruction(pts, depth, res, ok)


def reconstruct(Phi, rig: Rig, method: str = "projector", phi2=None, mask=None, mask2=None) -> Reconstruction:
    if method == "projector":
        return reconstruct_projector(Phi, rig, mask)
    if method == "stereo":
        if phi2 is None:
            raise ValueError("stereo reconstruction needs camera-2 wrapped phase")
        return reconstruct_stereo(Phi, phi2, rig, mask, mask2)
    raise ValueError(f"unknown reconstruction method {method!r}")
