"""Scene primitives and batched ray casting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HIT_EPS = 1e-7  # mm, minimum ray parameter accepted as a hit
BISECT_TOL = 1e-9  # mm


@dataclass(frozen=True)
class Plane:
    """Plane ``normal . X = offset``, optionally clipped to an xy rectangle."""

    normal: tuple[float, float, float] = (0.0, 0.0, 1.0)
    offset: float = 0.0
    bounds: tuple[float, float, float, float] | None = None  # xmin, xmax, ymin, ymax

    def intersect(self, origins, dirs):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (self.offset / np.linalg.norm(self.normal) - origins @ n) / denom
        s = np.where(np.abs(denom) > 1e-15, s, np.inf)
        s = np.where(s > HIT_EPS, s, np.inf)
        if self.bounds is not None:
            x0, x1, y0, y1 = self.bounds
            p = origins + np.where(np.isfinite(s), s, 0.0)[..., None] * dirs
            inside = (p[..., 0] >= x0) & (p[..., 0] <= x1) & (p[..., 1] >= y0) & (p[..., 1] <= y1)
            s = np.where(inside, s, np.inf)
        return s

    def to_dict(self):
        return {"type": "plane", "normal": list(self.normal), "offset": self.offset,
                "bounds": None if self.bounds is None else list(self.bounds)}


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def intersect(self, origins, dirs):
        c = np.asarray(self.center, dtype=np.float64)
        oc = origins - c
        b = np.sum(oc * dirs, axis=-1)
        cc = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - cc
        root = np.sqrt(np.maximum(disc, 0.0))
        s_near = -b - root
        s_far = -b + root
        s = np.where(s_near > HIT_EPS, s_near, np.where(s_far > HIT_EPS, s_far, np.inf))
        return np.where(disc >= 0, s, np.inf)

    def to_dict(self):
        return {"type": "sphere", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class HeightField:
    """Surface ``z = h(x, y)`` from a regular grid, bilinear between nodes.

    ``heights`` has shape ``(ny, nx)``; node ``[j, i]`` sits at
    ``(x0 + i*dx, y0 + j*dy)``.  Outside the grid there is no surface.
    """

    x_range: tuple[float, float]
    y_range: tuple[float, float]
    heights: np.ndarray = field(repr=False)

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=np.float64)
        if h.ndim != 2 or min(h.shape) < 2:
            raise ValueError("height grid must be 2-D with at least 2x2 nodes")
        object.__setattr__(self, "heights", h)

    def height(self, x, y):
        """Bilinear height; NaN outside the grid."""
        ny, nx = self.heights.shape
        (x0, x1), (y0, y1) = self.x_range, self.y_range
        fx = (np.asarray(x) - x0) / (x1 - x0) * (nx - 1)
        fy = (np.asarray(y) - y0) / (y1 - y0) * (ny - 1)
        outside = (fx < 0) | (fx > nx - 1) | (fy < 0) | (fy > ny - 1) | ~np.isfinite(fx) | ~np.isfinite(fy)
        fx = np.clip(np.nan_to_num(fx), 0, nx - 1)
        fy = np.clip(np.nan_to_num(fy), 0, ny - 1)
        i = np.minimum(fx.astype(int), nx - 2)
        j = np.minimum(fy.astype(int), ny - 2)
        tx, ty = fx - i, fy - j
        h = self.heights
        z = (h[j, i] * (1 - tx) * (1 - ty) + h[j, i + 1] * tx * (1 - ty)
             + h[j + 1, i] * (1 - tx) * ty + h[j + 1, i + 1] * tx * ty)
        return np.where(outside, np.nan, z)

    def _gap(self, origins, dirs, s):
        p = origins + s[..., None] * dirs
        return p[..., 2] - self.height(p[..., 0], p[..., 1])

    def intersect(self, origins, dirs):
        # march through the slab between min and max height, then bisect
        hmin, hmax = float(self.heights.min()), float(self.heights.max())
        dz = dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            sa = (hmin - 1e-6 - origins[..., 2]) / dz
            sb = (hmax + 1e-6 - origins[..., 2]) / dz
        s0 = np.maximum(np.minimum(sa, sb), HIT_EPS)
        s1 = np.maximum(sa, sb)
        s0 = np.where(np.abs(dz) > 1e-12, s0, np.inf)
        s1 = np.where(np.abs(dz) > 1e-12, s1, -np.inf)
        ok = s1 > s0
        out = np.full(dz.shape, np.inf)
        if not np.any(ok):
            return out
        ny, nx = self.heights.shape
        cell = min((self.x_range[1] - self.x_range[0]) / (nx - 1),
                   (self.y_range[1] - self.y_range[0]) / (ny - 1))
        span = np.where(ok, s1 - s0, 0.0)
        dxy = np.linalg.norm(dirs[..., :2], axis=-1)
        need = span * np.maximum(dxy / (cell / 8.0), np.abs(dz) / max((hmax - hmin) / 64.0, 1e-3))
        n_steps = int(np.clip(np.ceil(need.max()), 2, 4000))
        o, d = origins[ok], dirs[ok]
        a, b = s0[ok], s1[ok]
        ts = np.linspace(0.0, 1.0, n_steps + 1)
        hit_lo = np.full(a.shape, np.nan)
        hit_hi = np.full(a.shape, np.nan)
        prev_s = a
        prev_g = self._gap(o, d, prev_s)
        found = np.zeros(a.shape, dtype=bool)
        for t in ts[1:]:
            cur_s = a + t * (b - a)
            cur_g = self._gap(o, d, cur_s)
            cross = ~found & (prev_g > 0) & (cur_g <= 0)
            hit_lo[cross] = prev_s[cross]
            hit_hi[cross] = cur_s[cross]
            found |= cross
            prev_s, prev_g = cur_s, cur_g
            if found.all():
                break
        if np.any(found):
            lo, hi = hit_lo[found], hit_hi[found]
            of, df = o[found], d[found]
            while np.max(hi - lo) > BISECT_TOL:
                mid = 0.5 * (lo + hi)
                if np.all((mid == lo) | (mid == hi)):
                    break  # no representable midpoint left
                above = self._gap(of, df, mid) > 0
                lo = np.where(above, mid, lo)
                hi = np.where(above, hi, mid)
            res = np.full(a.shape, np.inf)
            res[found] = 0.5 * (lo + hi)
            out[ok] = res
        return out

    def to_dict(self):
        return {"type": "heightfield", "x_range": list(self.x_range),
                "y_range": list(self.y_range), "heights": self.heights.tolist()}


def primitive_from_dict(d: dict):
    kind = d["type"]
    if kind == "plane":
        b = d.get("bounds")
        return Plane(tuple(d["normal"]), float(d["offset"]), None if b is None else tuple(b))
    if kind == "sphere":
        return Sphere(tuple(d["center"]), float(d["radius"]))
    if kind == "heightfield":
        return HeightField(tuple(d["x_range"]), tuple(d["y_range"]), np.asarray(d["heights"]))
    raise ValueError(f"unknown primitive type {kind!r}")


@dataclass(frozen=True)
class ReflectivityField:
    """Smooth field ``base + sum_i amp_i * cos(kx_i x + ky_i y + phase_i)`` over world xy."""

    base: float
    terms: tuple[tuple[float, float, float, float], ...] = ()

    def __call__(self, x, y):
        out = np.full(np.shape(x), self.base, dtype=np.float64)
        for amp, kx, ky, ph in self.terms:
            out = out + amp * np.cos(kx * np.asarray(x) + ky * np.asarray(y) + ph)
        return out

    @property
    def bounds(self) -> tuple[float, float]:
        total = sum(abs(t[0]) for t in self.terms)
        return self.base - total, self.base + total

    def to_dict(self):
        return {"base": self.base, "terms": [list(t) for t in self.terms]}

    @staticmethod
    def from_dict(d) -> ReflectivityField:
        if isinstance(d, (int, float)):
            return ReflectivityField(float(d))
        return ReflectivityField(float(d["base"]), tuple(tuple(t) for t in d.get("terms", [])))

    @staticmethod
    def random(rng: np.random.Generator, base_range, amp_total: float, n_terms: int = 3):
        base = rng.uniform(*base_range)
        terms = []
        for _ in range(n_terms):
            wavelength = rng.uniform(80.0, 300.0)
            theta = rng.uniform(0, 2 * np.pi)
            k = 2 * np.pi / wavelength
            terms.append((amp_total / n_terms, k * np.cos(theta), k * np.sin(theta), rng.uniform(0, 2 * np.pi)))
        return ReflectivityField(base, tuple(terms))


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    A: ReflectivityField = ReflectivityField(0.5)
    B: ReflectivityField = ReflectivityField(0.25)
    noise_sigma: float = 0.0
    quantize: bool = False
    phase_offset: float = 0.0  # global offset added to the projected phase

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        a_lo, a_hi = self.A.bounds
        b_lo, b_hi = self.B.bounds
        if a_hi + b_hi > 1.0 + 1e-12 or a_lo - b_hi < -1e-12 or b_lo < 0:
            raise ValueError("reflectivity fields must satisfy 0 <= A-B and A+B <= 1")

    def intersect(self, origins, dirs):
        """Nearest hit distance and primitive index (-1 where nothing is hit)."""
        best = np.full(np.shape(origins)[:-1], np.inf)
        index = np.full(best.shape, -1, dtype=int)
        for i, prim in enumerate(self.primitives):
            s = prim.intersect(origins, dirs)
            closer = s < best
            best = np.where(closer, s, best)
            index = np.where(closer, i, index)
        return best, index

    def with_noise(self, sigma: float, quantize: bool) -> Scene:
        return Scene(self.primitives, self.A, self.B, sigma, quantize, self.phase_offset)

    def to_dict(self):
        return {
            "primitives": [p.to_dict() for p in self.primitives],
            "A": self.A.to_dict(),
            "B": self.B.to_dict(),
            "noise_sigma": self.noise_sigma,
            "quantize": self.quantize,
            "phase_offset": self.phase_offset,
        }

    @staticmethod
    def from_dict(d) -> Scene:
        return Scene(
            tuple(primitive_from_dict(p) for p in d["primitives"]),
            ReflectivityField.from_dict(d.get("A", 0.5)),
            ReflectivityField.from_dict(d.get("B", 0.25)),
            float(d.get("noise_sigma", 0.0)),
            bool(d.get("quantize", False)),
            float(d.get("phase_offset", 0.0)),
        )
