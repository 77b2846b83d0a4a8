"""Fringe-order recovery: stereo phase unwrapping, reference plane, temporal oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    backproject_ray,
    in_bounds,
    intersect_column_planes,
    project_unchecked,
    triangulate_camera_projector,
)
from .rig import Rig

TWO_PI = 2.0 * np.pi
REJECT_THRESHOLD = 0.5  # rad
TIE_MARGIN = 0.05  # rad


@dataclass
class OrderMap:
    k: np.ndarray  # int, -1 = undecided
    confidence: np.ndarray  # best (summed) wrapped-phase mismatch, rad
    mask: np.ndarray  # pixels the map was asked to resolve

    @property
    def decided(self) -> np.ndarray:
        return self.mask & (self.k >= 0)


@dataclass
class DepthRange:
    """Global ``[zmin, zmax]`` window, optionally narrowed per pixel.

    Where ``center`` is finite the admissible depths are
    ``[center - half_width, center + half_width]`` intersected with the global
    window; NaN centres fall back to the global window.
    """

    zmin: float
    zmax: float
    center: np.ndarray | None = None
    half_width: float | None = None

    def __post_init__(self):
        if not self.zmin < self.zmax:
            raise ValueError("zmin must be below zmax")
        if self.center is not None and not (self.half_width and self.half_width > 0):
            raise ValueError("half_width must be positive")

    @staticmethod
    def of(rig: Rig) -> DepthRange:
        return DepthRange(rig.zmin, rig.zmax)

    def bounds(self, index=None):
        """``(lo, hi)`` arrays for the pixels selected by ``index`` (or all)."""
        if self.center is None:
            return np.float64(self.zmin), np.float64(self.zmax)
        c = self.center if index is None else self.center[index]
        has = np.isfinite(c)
        lo = np.where(has, np.maximum(self.zmin, c - self.half_width), self.zmin)
        hi = np.where(has, np.minimum(self.zmax, c + self.half_width), self.zmax)
        return lo, hi


@dataclass
class ReferenceData:
    stack1: object  # FringeStack, camera 1
    stack2: object  # FringeStack, camera 2
    k_ref: np.ndarray
    Phi_ref: np.ndarray
    mask: np.ndarray


@dataclass
class CandidateSet:
    """Per-pixel order candidates, arrays shaped ``(P, K)`` (or ``(K,)`` for one pixel)."""

    k: np.ndarray
    points: np.ndarray  # (..., K, 3) mm
    in_range: np.ndarray
    pixels2: np.ndarray  # (..., K, 2) projection into camera 2 (NaN when not projected)
    phi1: np.ndarray
    pixels3: np.ndarray | None = None

    def _single(self) -> CandidateSet:
        return CandidateSet(self.k[0], self.points[0], self.in_range[0], self.pixels2[0],
                            self.phi1[0], None if self.pixels3 is None else self.pixels3[0])


def phase_mismatch(a, b):
    """Wrap-around distance ``|wrap(a - b)|`` in [0, pi]."""
    d = np.mod(np.asarray(a) - np.asarray(b) + np.pi, TWO_PI) - np.pi
    return np.abs(d)


def sample_phase(phi, valid, pixels, method: str = "local", margin: float = 0.0):
    """Sample a wrapped phase map at fractional pixels.

    ``"local"``: the four neighbours are unwrapped relative to the nearest one
    and interpolated bilinearly (exact for locally linear phase up to a slope
    of pi per pixel).  If exactly one neighbour is invalid and the sample lies
    in the triangle of the other three, that triangle is interpolated
    linearly instead.  ``"phasor"``: bilinear interpolation of ``exp(i phi)``.
    Other samples whose neighbourhood touches an invalid pixel are NaN.
    """
    h, w = phi.shape
    u = pixels[..., 0]
    v = pixels[..., 1]
    inside = in_bounds(pixels, _Bounds(w, h), margin) & np.isfinite(u) & np.isfinite(v)
    uu = np.where(inside, u, 0.0)
    vv = np.where(inside, v, 0.0)
    j0 = np.minimum(np.floor(uu).astype(int), w - 2)
    i0 = np.minimum(np.floor(vv).astype(int), h - 2)
    tx = uu - j0
    ty = vv - i0
    p00, p01 = phi[i0, j0], phi[i0, j0 + 1]
    p10, p11 = phi[i0 + 1, j0], phi[i0 + 1, j0 + 1]
    ok = inside & valid[i0, j0] & valid[i0, j0 + 1] & valid[i0 + 1, j0] & valid[i0 + 1, j0 + 1]
    w00, w01, w10, w11 = (1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty
    if method == "phasor":
        z = (w00 * np.exp(1j * p00) + w01 * np.exp(1j * p01)
             + w10 * np.exp(1j * p10) + w11 * np.exp(1j * p11))
        out = np.angle(z)
    elif method == "local":
        anchor = np.where(tx < 0.5, np.where(ty < 0.5, p00, p10), np.where(ty < 0.5, p01, p11))

        def rel(p):
            return np.mod(p - anchor + np.pi, TWO_PI) - np.pi

        out = anchor + w00 * rel(p00) + w01 * rel(p01) + w10 * rel(p10) + w11 * rel(p11)
        v00, v01, v10, v11 = valid[i0, j0], valid[i0, j0 + 1], valid[i0 + 1, j0], valid[i0 + 1, j0 + 1]
        one_bad = inside & (v00.astype(int) + v01 + v10 + v11 == 3)
        if np.any(one_bad):
            def step(x, y):
                return np.mod(y - x + np.pi, TWO_PI) - np.pi

            # linear interpolation over the triangle of the three valid corners
            cases = (
                (~v11 & (tx + ty <= 1), p00 + tx * step(p00, p01) + ty * step(p00, p10)),
                (~v00 & (tx + ty >= 1), p11 + (1 - tx) * step(p11, p10) + (1 - ty) * step(p11, p01)),
                (~v01 & (ty >= tx), p00 + ty * step(p00, p10) + tx * step(p10, p11)),
                (~v10 & (tx >= ty), p00 + tx * step(p00, p01) + ty * step(p01, p11)),
            )
            for sel, val in cases:
                sel = one_bad & sel
                out = np.where(sel, val, out)
                ok = ok | sel
    else:
        raise ValueError(f"unknown interpolation {method!r}")
    return np.where(ok, out, np.nan)


@dataclass(frozen=True)
class _Bounds:
    width: int
    height: int


def _pixel_grid_points(mask):
    rows, cols = np.nonzero(mask)
    return rows, cols, np.stack([cols, rows], axis=-1).astype(np.float64)


def candidates_for_pixels(pixels, phi1, rig: Rig, depth: DepthRange, index=None,
                          project_views: int = 2) -> CandidateSet:
    """All ``K`` order hypotheses for camera-1 pixels ``(P, 2)`` with wrapped phases ``phi1``.

    Each hypothesis is triangulated against the projector; hypotheses outside
    the depth window (or behind the camera / outside the pattern) are flagged
    out of range.  In-range hypotheses are projected into cameras 2..views.
    """
    cam1, proj = rig.cameras[0], rig.projector
    K = proj.periods
    phi1 = np.asarray(phi1, dtype=np.float64)
    ks = np.arange(K)
    Phi = phi1[..., None] + TWO_PI * ks
    valid_phase = (Phi >= 0) & (Phi <= TWO_PI * K)
    cols = np.clip(Phi, 0, TWO_PI * K) * proj.fringe_extent / (TWO_PI * K)
    if proj.has_distortion:
        pts = np.empty(Phi.shape + (3,))
        for j in range(K):
            pts[..., j, :], _ = triangulate_camera_projector(pixels, cam1, cols[..., j], proj)
        s = np.sum((pts - cam1.center) * backproject_ray(pixels, cam1).direction[..., None, :], axis=-1)
    else:
        ray = backproject_ray(pixels, cam1)
        ray = type(ray)(ray.origin[..., None, :], ray.direction[..., None, :])
        s, pts, cosang = intersect_column_planes(ray, cols, proj)
        valid_phase &= cosang > 1e-12
    z = pts[..., 2]
    lo, hi = depth.bounds(index)
    lo = np.asarray(lo)[..., None] if np.ndim(lo) else lo
    hi = np.asarray(hi)[..., None] if np.ndim(hi) else hi
    with np.errstate(invalid="ignore"):
        in_range = valid_phase & (s > 0) & (z >= lo) & (z <= hi)
    projected = []
    for cam in rig.cameras[1:project_views]:
        px = np.full(Phi.shape + (2,), np.nan)
        if np.any(in_range):
            uv, front = project_unchecked(pts[in_range], cam)
            uv[~front] = np.nan
            px[in_range] = uv
        projected.append(px)
    while len(projected) < 2:
        projected.append(None)
    return CandidateSet(np.broadcast_to(ks, Phi.shape), pts, in_range, projected[0], phi1, projected[1])


def build_candidates(pixel, phi1: float, rig: Rig, depth: DepthRange | None = None) -> CandidateSet:
    """Candidate set for a single camera-1 pixel."""
    depth = DepthRange.of(rig) if depth is None else depth
    pixel = np.asarray(pixel, dtype=np.float64)
    return candidates_for_pixels(pixel[None], np.array([phi1]), rig, depth,
                                 project_views=len(rig.cameras))._single()


def select_order(mismatch, reject: float = REJECT_THRESHOLD, tie: float = TIE_MARGIN):
    """Pick the candidate with the smallest mismatch along the last axis.

    NaN entries are discarded candidates.  Returns ``(index, best)`` where
    ``index`` is -1 if the best exceeds ``reject``, if the runner-up is within
    ``tie`` of it, or if no candidate survives.
    """
    m = np.where(np.isnan(mismatch), np.inf, mismatch)
    order = np.argsort(m, axis=-1, kind="stable")
    best_idx = order[..., 0]
    best = np.take_along_axis(m, order[..., :1], axis=-1)[..., 0]
    if m.shape[-1] > 1:
        second = np.take_along_axis(m, order[..., 1:2], axis=-1)[..., 0]
    else:
        second = np.full(best.shape, np.inf)
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(best) & (best <= reject) & (second - best >= tie)
    idx = np.where(ok, best_idx, -1)
    return idx, best


def phase_similarity_select(cands: CandidateSet, phi2, window: float = 0.0, valid2=None,
                            reject: float = REJECT_THRESHOLD, tie: float = TIE_MARGIN,
                            method: str = "local"):
    """Resolve the order of one pixel (or a batch) from camera-2 phase similarity.

    ``window`` is a border margin in px: candidates projecting closer than
    this to the camera-2 image edge are discarded.
    Returns ``(k, confidence)``.
    """
    valid2 = np.ones(phi2.shape, dtype=bool) if valid2 is None else valid2
    sampled = sample_phase(phi2, valid2, cands.pixels2, method, window)
    mm = np.where(cands.in_range, phase_mismatch(sampled, np.asarray(cands.phi1)[..., None]), np.nan)
    idx, best = select_order(mm, reject, tie)
    k = np.where(idx >= 0, np.take_along_axis(cands.k, np.maximum(idx, 0)[..., None], -1)[..., 0], -1)
    conf = np.where(np.isfinite(best), best, np.pi)
    if np.ndim(k) == 0:
        return int(k), float(conf)
    return k, conf


def spu_unwrap(phi1, phi2, rig: Rig, depth: DepthRange | None = None, views: int = 2,
               phi3=None, mask1=None, mask2=None, mask3=None,
               reject: float = REJECT_THRESHOLD, tie: float = TIE_MARGIN,
               method: str = "local", chunk: int = 4096) -> OrderMap:
    """Stereo phase unwrapping of camera-1 wrapped phase.

    With ``views=3`` the candidates that pass the camera-2 reject threshold
    are also checked in camera 3 and the two mismatches are summed before
    selection (reject threshold doubled for the sum; a candidate camera 3
    cannot sample counts its camera-2 mismatch twice).  Camera 3 verifies
    rather than overrides: the pixel stays undecided unless the summed
    choice is also camera 2's own unambiguous choice and camera 3 actually
    sampled it.  Every wrong three-view order is then also wrong with two
    views, at the cost of a few more undecided pixels.
    """
    if views not in (2, 3):
        raise ValueError("views must be 2 or 3")
    if views == 3 and (phi3 is None or len(rig.cameras) < 3):
        raise ValueError("three-view unwrapping needs phi3 and a third camera")
    depth = DepthRange.of(rig) if depth is None else depth
    mask1 = np.ones(phi1.shape, bool) if mask1 is None else mask1
    mask2 = np.ones(phi2.shape, bool) if mask2 is None else mask2
    if views == 3:
        mask3 = np.ones(phi3.shape, bool) if mask3 is None else mask3
    k_map = np.full(phi1.shape, -1, dtype=int)
    conf = np.full(phi1.shape, np.pi * (views - 1))
    rows, cols, pix = _pixel_grid_points(mask1)
    for start in range(0, len(rows), chunk):
        sl = slice(start, start + chunk)
        r, c = rows[sl], cols[sl]
        cands = candidates_for_pixels(pix[sl], phi1[r, c], rig, depth, (r, c), views)
        mm = phase_mismatch(sample_phase(phi2, mask2, cands.pixels2, method), cands.phi1[:, None])
        mm = np.where(cands.in_range, mm, np.nan)
        limit = reject
        if views == 3:
            with np.errstate(invalid="ignore"):
                survive = mm <= reject
            mm3 = phase_mismatch(sample_phase(phi3, mask3, cands.pixels3, method), cands.phi1[:, None])
            mm2 = np.where(survive, mm, np.nan)
            mm = mm2 + np.where(np.isnan(mm3), mm2, mm3)
            limit = 2 * reject
        idx, best = select_order(mm, limit, tie)
        if views == 3:
            idx2, _ = select_order(mm2, reject, tie)
            seen3 = np.take_along_axis(~np.isnan(mm3), np.maximum(idx, 0)[:, None], axis=-1)[:, 0]
            idx = np.where((idx == idx2) & seen3, idx, -1)
        k_map[r, c] = idx
        conf[r, c] = np.where(np.isfinite(best), best, np.pi * (views - 1))
    return OrderMap(k_map, conf, mask1.copy())


def adc_update(prev_depth, half_width: float, zmin: float, zmax: float) -> DepthRange:
    """Per-pixel depth windows centred on a previous reconstruction."""
    return DepthRange(zmin, zmax, np.asarray(prev_depth, dtype=np.float64), half_width)


def reference_unwrap(phi, ref: ReferenceData, K: int, mask=None) -> OrderMap:
    """Orders that bring ``phi`` closest to the reference absolute phase."""
    phi = np.asarray(phi, dtype=np.float64)
    k = np.clip(np.round((ref.Phi_ref - phi) / TWO_PI), 0, K - 1).astype(int)
    m = ref.mask if mask is None else (mask & ref.mask)
    conf = phase_mismatch(phi + TWO_PI * k, ref.Phi_ref)
    return OrderMap(np.where(m, k, -1), conf, m)


def tpu_hierarchical(phi_high, phi_unit, K: int, mask=None) -> OrderMap:
    """Two-frequency temporal unwrapping; ``phi_unit`` is the single-period phase.

    ``phi_unit`` may be given wrapped; it is mapped to [0, 2 pi) first.
    """
    phi_high = np.asarray(phi_high, dtype=np.float64)
    Phi_unit = np.mod(np.asarray(phi_unit, dtype=np.float64), TWO_PI)
    raw = np.round((K * Phi_unit - phi_high) / TWO_PI)
    k = np.clip(raw, 0, K - 1).astype(int)
    m = np.ones(phi_high.shape, bool) if mask is None else mask
    conf = phase_mismatch(phi_high + TWO_PI * k, K * Phi_unit)
    return OrderMap(np.where(m, k, -1), conf, m)


def unwrap_apply(phi, order: OrderMap | np.ndarray):
    """``Phi = phi + 2 pi k``; undecided pixels become NaN."""
    k = order.k if isinstance(order, OrderMap) else np.asarray(order)
    decided = k >= 0
    if isinstance(order, OrderMap):
        decided = decided & order.mask
    return np.where(decided, np.asarray(phi) + TWO_PI * k, np.nan)
