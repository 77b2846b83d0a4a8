"""Pinhole camera / projector models, lens distortion, rays and triangulation.

Conventions
-----------
World frame: right-handed, millimetres.  The plane ``z = 0`` is the first
calibration pose (the reference plane) and ``+z`` points from that plane
towards the devices, so "depth" in this package is the world z coordinate.

Camera frame: x right, y down, z along the optical axis.  A pose maps world
to camera coordinates, ``X_cam = R @ X_world + t``.

Pixel coordinates: ``u`` along image columns, ``v`` along rows; the centre of
pixel ``(row, col)`` sits at ``(u, v) = (col, row)``.

All functions accept batched inputs: pixels have shape ``(..., 2)`` and points
``(..., 3)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

UNDISTORT_MAX_ITER = 20
UNDISTORT_TOL_PX = 1e-12


class GeometryError(ValueError):
    """Raised for invalid or degenerate geometric configurations."""


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation, ``x -> R @ x + t``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9 or np.linalg.det(R) <= 0:
            raise GeometryError("R is not a proper rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def apply_vector(self, vectors):
        return np.asarray(vectors, dtype=np.float64) @ self.R.T

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> RigidTransform:
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    @staticmethod
    def look_at(position, target, up=(0.0, 1.0, 0.0)) -> RigidTransform:
        """World->camera pose for a device at ``position`` aimed at ``target``.

        ``up`` is the world direction that should appear towards the top of
        the image (negative camera y).
        """
        position = np.asarray(position, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - position
        z /= np.linalg.norm(z)
        y = -np.asarray(up, dtype=np.float64)
        y = y - (y @ z) * z
        norm = np.linalg.norm(y)
        if norm < 1e-12:
            raise GeometryError("up vector parallel to viewing direction")
        y /= norm
        x = np.cross(y, z)
        R = np.stack([x, y, z])
        return RigidTransform(R, -R @ position)


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues formula."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    Kx = np.array(
        [[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]]
    )
    return np.eye(3) + np.sin(angle) * Kx + (1.0 - np.cos(angle)) * (Kx @ Kx)


@dataclass(frozen=True)
class Ray:
    """A ray (or a batch of rays) in world coordinates; ``direction`` is unit."""

    origin: np.ndarray
    direction: np.ndarray

    def at(self, s):
        s = np.asarray(s, dtype=np.float64)
        return self.origin + s[..., None] * self.direction


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with Brown-Conrady distortion ``(k1, k2, k3, p1, p2)``."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = field(default_factory=RigidTransform)
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("sensor size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside the sensor")
        coeffs = (self.k1, self.k2, self.k3, self.p1, self.p2)
        if not np.all(np.isfinite(coeffs)):
            raise GeometryError("distortion coefficients must be finite")

    @property
    def center(self) -> np.ndarray:
        """Optical centre in world coordinates."""
        return -self.pose.R.T @ self.pose.t

    @property
    def has_distortion(self) -> bool:
        return any(c != 0.0 for c in (self.k1, self.k2, self.k3, self.p1, self.p2))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def pixel_grid(self) -> np.ndarray:
        """``(height, width, 2)`` array of pixel-centre coordinates."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack([u, v], axis=-1)

    def with_pose(self, pose: RigidTransform):
        return replace(self, pose=pose)


@dataclass(frozen=True)
class ProjectorModel(CameraModel):
    """A projector treated as an inverse camera.

    ``periods`` is the number of fringe periods across ``fringe_axis``
    (``"x"``: along columns, ``"y"``: along rows).
    """

    fringe_axis: str = "x"
    periods: int = 12

    def __post_init__(self):
        super().__post_init__()
        if self.fringe_axis not in ("x", "y"):
            raise GeometryError("fringe_axis must be 'x' or 'y'")
        if int(self.periods) != self.periods or self.periods < 1:
            raise GeometryError("periods must be a positive integer")

    @property
    def fringe_extent(self) -> int:
        return self.width if self.fringe_axis == "x" else self.height

    def with_periods(self, periods: int) -> ProjectorModel:
        return replace(self, periods=periods)


# -- distortion --------------------------------------------------------------


def distort(xy, cam: CameraModel) -> np.ndarray:
    """Apply Brown-Conrady distortion to normalised image coordinates."""
    xy = np.asarray(xy, dtype=np.float64)
    x, y = xy[..., 0], xy[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (cam.k1 + r2 * (cam.k2 + r2 * cam.k3))
    xd = x * radial + 2.0 * cam.p1 * x * y + cam.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + cam.p1 * (r2 + 2.0 * y * y) + 2.0 * cam.p2 * x * y
    return np.stack([xd, yd], axis=-1)


def undistort(xy_d, cam: CameraModel) -> np.ndarray:
    """Invert :func:`distort` by fixed-point iteration, then Newton if that stalls."""
    xy_d = np.asarray(xy_d, dtype=np.float64)
    if not cam.has_distortion:
        return xy_d.copy()
    xd, yd = xy_d[..., 0], xy_d[..., 1]
    x, y = xd.copy(), yd.copy()
    scale = max(cam.fx, cam.fy)
    for _ in range(UNDISTORT_MAX_ITER):
        r2 = x * x + y * y
        radial = 1.0 + r2 * (cam.k1 + r2 * (cam.k2 + r2 * cam.k3))
        dx = 2.0 * cam.p1 * x * y + cam.p2 * (r2 + 2.0 * x * x)
        dy = cam.p1 * (r2 + 2.0 * y * y) + 2.0 * cam.p2 * x * y
        x_new = (xd - dx) / radial
        y_new = (yd - dy) / radial
        step = np.maximum(np.abs(x_new - x), np.abs(y_new - y))
        x, y = x_new, y_new
        if not np.all(np.isfinite(step)):
            break
        if step.size == 0 or step.max() * scale < UNDISTORT_TOL_PX:
            return np.stack([x, y], axis=-1)
    # slow contraction (strong distortion near the corners): polish with Newton
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        x, y = xd.copy(), yd.copy()
    for _ in range(UNDISTORT_MAX_ITER):
        xy = np.stack([x, y], axis=-1)
        resid = distort(xy, cam) - xy_d
        if not np.all(np.isfinite(resid)):
            break
        if np.abs(resid).max() * scale < 1e-9:
            return xy
        r2 = x * x + y * y
        radial = 1.0 + r2 * (cam.k1 + r2 * (cam.k2 + r2 * cam.k3))
        d_radial = cam.k1 + r2 * (2.0 * cam.k2 + 3.0 * r2 * cam.k3)
        jxx = radial + 2.0 * x * x * d_radial + 2.0 * cam.p1 * y + 6.0 * cam.p2 * x
        jxy = 2.0 * x * y * d_radial + 2.0 * cam.p1 * x + 2.0 * cam.p2 * y
        jyy = radial + 2.0 * y * y * d_radial + 6.0 * cam.p1 * y + 2.0 * cam.p2 * x
        det = jxx * jyy - jxy * jxy
        x = x - (jyy * resid[..., 0] - jxy * resid[..., 1]) / det
        y = y - (jxx * resid[..., 1] - jxy * resid[..., 0]) / det
    raise GeometryError("undistort divergence")


# -- projection --------------------------------------------------------------


def project_unchecked(points, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Project world points; returns ``(pixels, in_front)`` without raising.

    Pixels of points at or behind the camera are NaN.
    """
    pc = cam.pose.apply(points)
    z = pc[..., 2]
    in_front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = pc[..., :2] / np.where(in_front, z, np.nan)[..., None]
    xy_d = distort(xy, cam)
    uv = np.empty_like(xy_d)
    uv[..., 0] = cam.fx * xy_d[..., 0] + cam.cx
    uv[..., 1] = cam.fy * xy_d[..., 1] + cam.cy
    return uv, in_front


def project(points, cam: CameraModel) -> np.ndarray:
    """Project world points (mm) to fractional pixel coordinates.

    The result may lie outside the sensor; callers check bounds.  Raises
    :class:`GeometryError` ("behind camera") if any point has camera-frame
    ``z <= 0``.
    """
    uv, in_front = project_unchecked(points, cam)
    if not np.all(in_front):
        raise GeometryError("behind camera")
    return uv


def normalized_coords(pixels, cam: CameraModel) -> np.ndarray:
    """Undistorted normalised coordinates ``(x, y)`` of pixels."""
    pixels = np.asarray(pixels, dtype=np.float64)
    xy_d = np.stack(
        [(pixels[..., 0] - cam.cx) / cam.fx, (pixels[..., 1] - cam.cy) / cam.fy],
        axis=-1,
    )
    return undistort(xy_d, cam)


def backproject_ray(pixels, cam: CameraModel) -> Ray:
    """World-frame ray(s) through pixel centre(s), distortion removed."""
    xy = normalized_coords(pixels, cam)
    d_cam = np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    d_world = d_cam @ cam.pose.R  # R^T applied to row vectors
    origin = np.broadcast_to(cam.center, d_world.shape).copy()
    return Ray(origin, d_world)


def in_bounds(pixels, cam: CameraModel, margin: float = 0.0) -> np.ndarray:
    """Pixels that fall inside the sensor (``margin`` px from the border)."""
    u, v = pixels[..., 0], pixels[..., 1]
    with np.errstate(invalid="ignore"):
        return (
            (u >= margin)
            & (u <= cam.width - 1 - margin)
            & (v >= margin)
            & (v <= cam.height - 1 - margin)
        )


# -- projector phase ---------------------------------------------------------


def phase_to_projector_column(phase, proj: ProjectorModel):
    """Absolute phase (rad) -> projector coordinate along the fringe axis (px)."""
    phase = np.asarray(phase, dtype=np.float64)
    span = 2.0 * np.pi * proj.periods
    if np.any(phase < 0) or np.any(phase > span) or not np.all(np.isfinite(phase)):
        raise GeometryError("phase out of projector range")
    out = phase * proj.fringe_extent / span
    return float(out) if out.ndim == 0 else out


def projector_column_to_phase(column, proj: ProjectorModel):
    column = np.asarray(column, dtype=np.float64)
    out = column * (2.0 * np.pi * proj.periods / proj.fringe_extent)
    return float(out) if out.ndim == 0 else out


# -- triangulation -----------------------------------------------------------


def _column_plane(columns, proj: ProjectorModel):
    """World-frame normals of the planes swept by ideal projector columns."""
    columns = np.asarray(columns, dtype=np.float64)
    n = np.zeros(columns.shape + (3,))
    if proj.fringe_axis == "x":
        n[..., 0] = proj.fx
        n[..., 2] = proj.cx - columns
    else:
        n[..., 1] = proj.fy
        n[..., 2] = proj.cy - columns
    n = n @ proj.pose.R  # to world
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return n


def intersect_column_planes(ray: Ray, columns, proj: ProjectorModel):
    """Ray / ideal column-plane intersection.

    Returns ``(s, points, cos_angle)``; ``s`` is the distance along the ray and
    ``cos_angle`` the |cosine| between ray direction and plane normal (0 means
    parallel).  No distortion handling, no error checks.
    """
    n = _column_plane(columns, proj)
    c = proj.center
    denom = np.sum(n * ray.direction, axis=-1)
    num = np.sum(n * (c - ray.origin), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = num / denom
    return s, ray.at(s), np.abs(denom)


def _projector_coordinate(points, proj: ProjectorModel):
    uv, front = project_unchecked(points, proj)
    return (uv[..., 0] if proj.fringe_axis == "x" else uv[..., 1]), front


def triangulate_camera_projector(pixels, cam: CameraModel, u_p, proj: ProjectorModel):
    """Intersect camera ray(s) with the light plane(s) of projector column ``u_p``.

    Returns ``(points, residual)`` where residual is the point-to-plane distance
    in mm.  With projector distortion the ideal-plane solution is refined by
    Newton steps along the camera ray so that the point projects onto ``u_p``.
    """
    ray = backproject_ray(pixels, cam)
    u_p = np.asarray(u_p, dtype=np.float64)
    if proj.has_distortion:
        # column of the distorted projector image -> ideal column at mid-height
        mid = proj.cy if proj.fringe_axis == "x" else proj.cx
        pix = np.stack(np.broadcast_arrays(u_p, mid), axis=-1)
        if proj.fringe_axis == "y":
            pix = pix[..., ::-1]
        xy = normalized_coords(pix, proj)
        ideal = xy[..., 0] * proj.fx + proj.cx if proj.fringe_axis == "x" else xy[..., 1] * proj.fy + proj.cy
    else:
        ideal = u_p
    s, pts, cosang = intersect_column_planes(ray, ideal, proj)
    if np.any(cosang < 1e-12) or not np.all(np.isfinite(s)):
        raise GeometryError("degenerate intersection")
    if proj.has_distortion:
        for _ in range(10):
            col, _front = _projector_coordinate(ray.at(s), proj)
            h = 1e-3
            col_h, _ = _projector_coordinate(ray.at(s + h), proj)
            slope = (col_h - col) / h
            s = s - (col - u_p) / slope
        pts = ray.at(s)
        col, _ = _projector_coordinate(pts, proj)
        # residual: distance to the (curved) light sheet, linearised
        residual = np.abs(col - u_p) / np.abs(slope)
    else:
        n = _column_plane(ideal, proj)
        residual = np.abs(np.sum(n * (pts - proj.center), axis=-1))
    if np.ndim(residual) == 0:
        return pts, float(residual)
    return pts, residual


def triangulate_two_view(p1, cam1: CameraModel, p2, cam2: CameraModel):
    """Midpoint triangulation of corresponding pixels in two cameras.

    Returns ``(points, residual_px)`` with the mean reprojection error over
    both views.
    """
    r1 = backproject_ray(p1, cam1)
    r2 = backproject_ray(p2, cam2)
    d1, d2 = r1.direction, r2.direction
    w0 = r1.origin - r2.origin
    b = np.sum(d1 * d2, axis=-1)
    d = np.sum(d1 * w0, axis=-1)
    e = np.sum(d2 * w0, axis=-1)
    denom = 1.0 - b * b
    sin_angle = np.linalg.norm(np.cross(d1, d2), axis=-1)
    if np.any(sin_angle < 1e-6):
        raise GeometryError("degenerate baseline")
    s1 = (b * e - d) / denom
    s2 = (e - b * d) / denom
    pts = 0.5 * (r1.at(s1) + r2.at(s2))
    e1 = np.linalg.norm(project(pts, cam1) - np.asarray(p1, dtype=np.float64), axis=-1)
    e2 = np.linalg.norm(project(pts, cam2) - np.asarray(p2, dtype=np.float64), axis=-1)
    residual = 0.5 * (e1 + e2)
    if np.ndim(residual) == 0:
        return pts, float(residual)
    return pts, residual
