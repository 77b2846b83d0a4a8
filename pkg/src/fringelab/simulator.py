"""Ray-cast renderer for N-step phase-shifted fringe images with exact ground truth."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fpi import read_fpi, write_fpi
from .geometry import (
    CameraModel,
    ProjectorModel,
    backproject_ray,
    in_bounds,
    project,
    project_unchecked,
    projector_column_to_phase,
)
from .rig import Rig, load_rig, make_rig, save_rig
from .scene import HeightField, Plane, ReflectivityField, Scene, Sphere

TWO_PI = 2.0 * np.pi


class RenderError(RuntimeError):
    pass


@dataclass
class FringeStack:
    images: np.ndarray  # (N, H, W)
    N: int
    K: int
    camera_id: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 3 or self.images.shape[0] != self.N:
            raise ValueError("images must be an (N, H, W) array")
        if self.N < 3:
            raise ValueError("phase shifting needs N >= 3")

    @property
    def shape(self):
        return self.images.shape[1:]


@dataclass
class GroundTruth:
    depth: np.ndarray  # world z of the visible surface, NaN where nothing is hit
    Phi: np.ndarray  # absolute phase, 0 outside the mask
    phi: np.ndarray  # wrapped phase in (-pi, pi]
    k: np.ndarray  # fringe order, -1 outside the mask
    mask: np.ndarray  # surface hit and lit by the projector
    A: np.ndarray
    B: np.ndarray
    points: np.ndarray = field(repr=False)  # (H, W, 3) world hit points, NaN if none
    surface: np.ndarray | None = field(default=None, repr=False)  # primitive index, -1 if none

    def to_array(self) -> np.ndarray:
        """Channels: depth, Phi, phi, k, mask."""
        return np.stack([self.depth, self.Phi, self.phi, self.k, self.mask], axis=-1)


def wrap(phase):
    """Wrap to (-pi, pi]."""
    w = np.angle(np.exp(1j * np.asarray(phase)))
    return np.where(w == -np.pi, np.pi, w)


def order_from_phase(Phi):
    """Fringe order with ``Phi - 2*pi*k`` in (-pi, pi]."""
    return np.ceil((np.asarray(Phi) - np.pi) / TWO_PI).astype(int)


def stage_seed(seed: int, *labels) -> int:
    """Derive a sub-seed from a root seed and string/int labels (fixed hashing)."""
    words = [int(seed) & 0xFFFFFFFF]
    for lab in labels:
        words.append(zlib.crc32(str(lab).encode()))
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0])


def _shadowed(scene: Scene, points: np.ndarray, proj: ProjectorModel) -> np.ndarray:
    c = proj.center
    vec = points - c
    dist = np.linalg.norm(vec, axis=-1)
    dirs = vec / dist[..., None]
    origins = np.broadcast_to(c, points.shape).copy()
    s, _ = scene.intersect(origins, dirs)
    return s < dist - 1e-6 * np.maximum(1.0, dist)


def trace(scene: Scene, cam: CameraModel, proj: ProjectorModel):
    """Per-pixel nearest surface hit and its projector phase (noise-free).

    Returns ``(points, hit, lit, Phi, surface)``: ``lit`` marks hits inside
    the projector pattern and not shadowed; ``Phi`` is 0 elsewhere;
    ``surface`` is the index of the primitive hit (-1 for none).
    """
    ray = backproject_ray(cam.pixel_grid(), cam)
    s, surface = scene.intersect(ray.origin, ray.direction)
    hit = np.isfinite(s)
    points = np.full(s.shape + (3,), np.nan)
    points[hit] = ray.at(s)[hit]
    lit = np.zeros_like(hit)
    Phi = np.zeros(s.shape)
    if np.any(hit):
        ph = points[hit]
        uv, front = project_unchecked(ph, proj)
        ok = front & in_bounds(uv, proj)
        col = uv[:, 0] if proj.fringe_axis == "x" else uv[:, 1]
        phase = np.where(ok, projector_column_to_phase(np.nan_to_num(col), proj), 0.0)
        ok[ok] = ~_shadowed(scene, ph[ok], proj)
        lit[hit] = ok
        Phi[hit] = np.where(ok, phase, 0.0)
    return points, hit, lit, Phi, surface


def render_fringe_stack(scene: Scene, cam: CameraModel, proj: ProjectorModel, N: int,
                        rng_seed: int = 0, camera_id: int = 0) -> tuple[FringeStack, GroundTruth]:
    """Render ``I_n = A + B cos(Phi + 2 pi n / N) + noise`` for one camera.

    Unlit (shadowed / outside the pattern) surface pixels receive only ``A``;
    pixels that see no surface are black.  The ground-truth mask further drops
    the last half period of the pattern, where the wrapped-phase order would
    be ``K``.  Noise is additive Gaussian drawn from a Philox stream keyed by
    ``rng_seed``; with ``quantize`` the result is rounded to 256 levels and
    clipped to [0, 1].
    """
    if N < 3:
        raise ValueError("N must be >= 3")
    points, hit, lit, Phi, surface = trace(scene, cam, proj)
    if not np.any(hit):
        raise RenderError("empty render")
    x = np.where(hit, points[..., 0], 0.0)
    y = np.where(hit, points[..., 1], 0.0)
    A = np.where(hit, scene.A(x, y), 0.0)
    B = np.where(lit, scene.B(x, y), 0.0)
    shifts = TWO_PI * np.arange(N) / N
    images = A[None] + B[None] * np.cos(Phi[None] + scene.phase_offset + shifts[:, None, None])
    if scene.noise_sigma > 0:
        rng = np.random.Generator(np.random.Philox(rng_seed))
        images = images + rng.normal(0.0, scene.noise_sigma, images.shape)
    if scene.quantize:
        images = np.clip(np.round(images * 255.0), 0, 255) / 255.0
    # ground truth only where the order is a valid index 0..K-1
    k = order_from_phase(Phi)
    mask = lit & (k >= 0) & (k <= proj.periods - 1)
    k = np.where(mask, k, -1)
    phi = np.where(mask, Phi - TWO_PI * k, 0.0)
    depth = np.where(hit, points[..., 2], np.nan)
    gt = GroundTruth(depth, np.where(mask, Phi, 0.0), phi, k, mask, A, B, points, surface)
    return FringeStack(images, N, proj.periods, camera_id), gt


def covisible(scene: Scene, gt: GroundTruth, cam: CameraModel, gt_other: GroundTruth | None = None,
              tol: float = 1e-6) -> np.ndarray:
    """Mask of ``gt`` pixels whose surface point another camera sees unoccluded.

    With ``gt_other`` the point must also land between four pixels that are
    inside that camera's ground-truth mask and image the same primitive, so a
    phase sample there is well posed.
    """
    out = np.zeros(gt.mask.shape, dtype=bool)
    pts = gt.points[gt.mask]
    if pts.size == 0:
        return out
    uv, front = project_unchecked(pts, cam)
    ok = front & in_bounds(uv, cam)
    c = cam.center
    vec = pts - c
    dist = np.linalg.norm(vec, axis=-1)
    s, prim = scene.intersect(np.broadcast_to(c, pts.shape).copy(), vec / dist[:, None])
    ok &= np.abs(s - dist) < tol * np.maximum(1.0, dist)
    if gt_other is not None:
        h, w = gt_other.mask.shape
        j0 = np.clip(np.floor(np.nan_to_num(uv[:, 0])).astype(int), 0, w - 2)
        i0 = np.clip(np.floor(np.nan_to_num(uv[:, 1])).astype(int), 0, h - 2)
        m = gt_other.mask
        ok &= m[i0, j0] & m[i0, j0 + 1] & m[i0 + 1, j0] & m[i0 + 1, j0 + 1]
        if gt_other.surface is not None:
            sf = gt_other.surface
            for di, dj in ((0, 0), (0, 1), (1, 0), (1, 1)):
                ok &= sf[i0 + di, j0 + dj] == prim
    out[gt.mask] = ok
    return out


def render_views(scene: Scene, rig: Rig, N: int, seed: int = 0, views: int | None = None):
    """Render every camera of the rig; returns lists of stacks and ground truths."""
    views = len(rig.cameras) if views is None else views
    stacks, gts = [], []
    for i, cam in enumerate(rig.cameras[:views]):
        st, gt = render_fringe_stack(scene, cam, rig.projector, N, stage_seed(seed, "camera", i), i)
        stacks.append(st)
        gts.append(gt)
    return stacks, gts


# -- reference plane ---------------------------------------------------------


def reference_scene() -> Scene:
    return Scene((Plane((0.0, 0.0, 1.0), 0.0),), ReflectivityField(0.5), ReflectivityField(0.25))


def render_reference(rig: Rig, proj: ProjectorModel | None = None, N: int = 3):
    """Fringe stacks of the ``z = 0`` plane in cameras 1 and 2 plus its camera-1 orders."""
    from .unwrap import ReferenceData

    if len(rig.cameras) < 2:
        raise ValueError("reference data needs at least two cameras")
    proj = rig.projector if proj is None else proj
    scene = reference_scene()
    st1, gt1 = render_fringe_stack(scene, rig.cameras[0], proj, N, 0, 0)
    st2, gt2 = render_fringe_stack(scene, rig.cameras[1], proj, N, 0, 1)
    if not gt1.mask.any() or not gt2.mask.any():
        raise RenderError("reference plane not visible from both cameras")
    return ReferenceData(st1, st2, gt1.k, gt1.Phi, gt1.mask)


# -- named scenes --------------------------------------------------------------


def _phase_along_ray(ray_o, ray_d, z, proj):
    s = (z - ray_o[2]) / ray_d[2]
    uv = project(ray_o + s * ray_d, proj)
    return projector_column_to_phase(uv[0] if proj.fringe_axis == "x" else uv[1], proj)


def plate_gap_depth(rig: Rig, seam_x: float, z_near: float, phase_gap: float) -> float:
    """Depth of a far plate, below ``z_near``, whose camera-1 phase seen just
    past a plate edge at ``(seam_x, 0, z_near)`` differs by ``phase_gap`` rad."""
    cam = rig.cameras[0]
    edge = np.array([seam_x, 0.0, z_near])
    o = cam.center
    d = (edge - o) / np.linalg.norm(edge - o)
    phase_edge = _phase_along_ray(o, d, z_near, rig.projector)

    def f(z):
        return abs(_phase_along_ray(o, d, z, rig.projector) - phase_edge) - phase_gap

    lo, hi = z_near - 300.0, z_near
    if f(lo) < 0:
        raise ValueError("phase gap not reachable below the near plate")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    return 0.5 * (lo + hi)


def make_discontinuity_scene(rig: Rig | None = None, gap_periods: float = 1.0,
                             z_near: float | None = None, seam_x: float = -30.0) -> Scene:
    """Two parallel plates, the far one hidden behind the near plate's edge.

    The depth gap is chosen so that, along camera 1's line of sight past the
    edge, the projected phase drops by ``gap_periods`` full periods.  With an
    integer gap the camera-1 fringes run on without a visible seam while the
    true fringe order jumps.  By default the near plate sits 0.4 periods
    above the reference plane, inside the reference band, and the far plate
    lies beyond the band.
    """
    rig = make_rig() if rig is None else rig
    gap = TWO_PI * gap_periods
    if z_near is None:
        z_near = 0.4 * depth_per_period(rig)
    z_far = plate_gap_depth(rig, seam_x, z_near, gap)
    near = Plane((0.0, 0.0, 1.0), z_near, (-400.0, seam_x, -400.0, 400.0))
    far = Plane((0.0, 0.0, 1.0), z_far, (-400.0, 400.0, -400.0, 400.0))
    return Scene((near, far), ReflectivityField(0.5), ReflectivityField(0.25))


def depth_per_period(rig: Rig, z: float = 0.0) -> float:
    """Depth change (mm) that shifts camera 1's central-pixel phase by 2 pi near ``z``."""
    cam = rig.cameras[0]
    ray = backproject_ray(np.array([cam.cx, cam.cy]), cam)
    h = 1e-3
    g = (_phase_along_ray(ray.origin, ray.direction, z + h, rig.projector)
         - _phase_along_ray(ray.origin, ray.direction, z - h, rig.projector)) / (2 * h)
    return float(TWO_PI / abs(g))


def _depth_for_phase_shift(rig: Rig, x: float, shift: float) -> float:
    """Depth on camera 1's ray through ``(x, 0, 0)`` whose phase differs from the
    reference-plane phase by ``shift`` rad (bisection; phase is monotone in depth)."""
    cam = rig.cameras[0]
    o = cam.center
    d = (np.array([x, 0.0, 0.0]) - o) / np.linalg.norm(np.array([x, 0.0, 0.0]) - o)
    p0 = _phase_along_ray(o, d, 0.0, rig.projector)
    sign = np.sign(_phase_along_ray(o, d, 1.0, rig.projector) - p0)
    lo, hi = -0.9 * o[2], 0.9 * o[2]
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if sign * (_phase_along_ray(o, d, mid, rig.projector) - p0) < shift:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-10:
            break
    return 0.5 * (lo + hi)


def make_staircase_scene(rig: Rig | None = None, span_periods: float = 3.0, steps: int = 12) -> Scene:
    """Fronto-parallel steps along x spanning ``+-span_periods`` of phase.

    Each step's depth is solved so that, on camera 1's line of sight through
    the step centre, its phase differs from the reference plane by an evenly
    spaced amount between ``-span_periods`` and ``+span_periods`` periods.
    """
    rig = make_rig() if rig is None else rig
    shifts = np.linspace(-span_periods, span_periods, steps) * TWO_PI
    edges = np.linspace(-110.0, 110.0, steps + 1)
    centres = 0.5 * (edges[:-1] + edges[1:])
    edges[0], edges[-1] = -400.0, 400.0
    plates = tuple(
        Plane((0.0, 0.0, 1.0), _depth_for_phase_shift(rig, float(xc), float(sh)),
              (float(edges[i]), float(edges[i + 1]), -400.0, 400.0))
        for i, (xc, sh) in enumerate(zip(centres, shifts))
    )
    return Scene(plates, ReflectivityField(0.5), ReflectivityField(0.25))


REFERENCE_SPHERE_RADII = (25.3989, 25.4038)
REFERENCE_SPHERE_DISTANCE = 100.0532


def make_sphere_pair_scene(radii=REFERENCE_SPHERE_RADII, distance=REFERENCE_SPHERE_DISTANCE,
                           height: float = 30.0) -> Scene:
    """Two spheres side by side along x, floating above the reference plane."""
    c1 = (-distance / 2.0, 0.0, height)
    c2 = (distance / 2.0, 0.0, height)
    return Scene((Sphere(c1, radii[0]), Sphere(c2, radii[1])), ReflectivityField(0.5), ReflectivityField(0.25))


def make_test_scene() -> Scene:
    """A generic scene: tilted background plane, a sphere and a smooth bump."""
    xs = np.linspace(-60.0, 20.0, 17)
    ys = np.linspace(-60.0, 20.0, 17)
    X, Y = np.meshgrid(xs, ys)
    bump = 30.0 * np.exp(-((X + 20.0) ** 2 + (Y + 20.0) ** 2) / (2 * 15.0**2)) + 10.0
    bump[0, :] = bump[-1, :] = bump[:, 0] = bump[:, -1] = 10.0
    return Scene(
        (
            Plane((0.05, -0.03, 1.0), 0.0),
            Sphere((45.0, 20.0, 5.0), 28.0),
            HeightField((-60.0, 20.0), (-60.0, 20.0), bump),
        ),
        ReflectivityField(0.5, ((0.05, 0.03, 0.01, 0.2),)),
        ReflectivityField(0.25, ((0.05, -0.02, 0.025, 1.0),)),
    )


# -- random scenes and datasets ---------------------------------------------------

DEFAULT_RECIPE = {
    "N": 3,
    "views": 3,
    "val_fraction": 0.2,
    "background_probability": 0.8,
    "background_z": [-12.0, 12.0],
    "background_tilt_deg": 6.0,
    "objects": [1, 3],
    "sphere_radius": [12.0, 35.0],
    "max_height": 22.0,
    "xy_extent": [[-90.0, 90.0], [-65.0, 65.0]],
    "A_base": [0.42, 0.55],
    "B_base": [0.16, 0.28],
    "field_amplitude": 0.05,
    "noise_sigma": 0.0,
    "quantize": False,
    "min_visible_fraction": 0.05,
}


def random_scene(rng: np.random.Generator, recipe: dict | None = None) -> Scene:
    """Random combination of plane / spheres / bumps near the reference depth."""
    r = {**DEFAULT_RECIPE, **(recipe or {})}
    (x0, x1), (y0, y1) = r["xy_extent"]
    hmax = float(r["max_height"])
    prims = []
    base_z = 0.0
    if rng.uniform() < r["background_probability"]:
        base_z = rng.uniform(*r["background_z"])
        tilt = np.deg2rad(r["background_tilt_deg"])
        nx, ny = np.tan(rng.uniform(-tilt, tilt)), np.tan(rng.uniform(-tilt, tilt))
        prims.append(Plane((float(nx), float(ny), 1.0), float(base_z)))
    n_obj = int(rng.integers(r["objects"][0], r["objects"][1] + 1))
    for _ in range(n_obj):
        cx, cy = rng.uniform(x0 * 0.8, x1 * 0.8), rng.uniform(y0 * 0.8, y1 * 0.8)
        if rng.uniform() < 0.5:
            rad = rng.uniform(*r["sphere_radius"])
            top = base_z + rng.uniform(0.3, 1.0) * hmax
            prims.append(Sphere((float(cx), float(cy), float(top - rad)), float(rad)))
        else:
            size = rng.uniform(40.0, 110.0)
            n = 9
            xs = np.linspace(cx - size / 2, cx + size / 2, n)
            ys = np.linspace(cy - size / 2, cy + size / 2, n)
            X, Y = np.meshgrid(xs, ys)
            theta = rng.uniform(0, np.pi)
            sx, sy = rng.uniform(0.15, 0.3, 2) * size
            Xr = (X - cx) * np.cos(theta) + (Y - cy) * np.sin(theta)
            Yr = -(X - cx) * np.sin(theta) + (Y - cy) * np.cos(theta)
            amp = rng.uniform(0.3, 1.0) * hmax * rng.choice([-1.0, 1.0])
            bump = base_z + 0.5 + amp * np.exp(-(Xr**2 / (2 * sx**2) + Yr**2 / (2 * sy**2)))
            prims.append(HeightField((float(xs[0]), float(xs[-1])), (float(ys[0]), float(ys[-1])), bump))
    if not prims:
        prims.append(Plane((0.0, 0.0, 1.0), 0.0))
    amp = float(r["field_amplitude"])
    A = ReflectivityField.random(rng, r["A_base"], amp)
    B = ReflectivityField.random(rng, r["B_base"], amp)
    return Scene(tuple(prims), A, B, float(r["noise_sigma"]), bool(r["quantize"]))


def ps_labels(stack: FringeStack) -> np.ndarray:
    """``(H, W, 2)`` numerator / denominator labels from the N-step closed form."""
    from .phase import ps_numerator_denominator

    M, D = ps_numerator_denominator(stack)
    return np.stack([M, D], axis=-1)


@dataclass
class DatasetManifest:
    records: list
    seed: int
    rig_path: str
    recipe: dict
    root: Path | None = None

    @property
    def reference(self) -> dict:
        refs = [r for r in self.records if r["reference"]]
        if len(refs) != 1:
            raise ValueError("manifest must flag exactly one reference record")
        return refs[0]

    def split(self, name: str) -> list:
        return [r for r in self.records if r["split"] == name]

    def path(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel

    def to_dict(self):
        return {"seed": self.seed, "rig": self.rig_path, "recipe": self.recipe, "records": self.records}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @staticmethod
    def load(path) -> DatasetManifest:
        path = Path(path)
        d = json.loads(path.read_text())
        m = DatasetManifest(d["records"], int(d["seed"]), d["rig"], d.get("recipe", {}), path.parent)
        for rec in m.records:
            for key in ("stacks", "truth", "labels"):
                for rel in rec[key]:
                    if not m.path(rel).exists():
                        raise FileNotFoundError(m.path(rel))
        return m

    def load_record(self, rec: dict) -> dict:
        """Arrays of one record: stacks ``(N, H, W)``, truth ``(H, W, 5)``, labels ``(H, W, 2)``."""
        return {
            "stacks": [np.moveaxis(read_fpi(self.path(p), squeeze=False), -1, 0) for p in rec["stacks"]],
            "truth": [read_fpi(self.path(p), squeeze=False) for p in rec["truth"]],
            "labels": [read_fpi(self.path(p), squeeze=False) for p in rec["labels"]],
        }


def _write_sample(out: Path, sid: str, stacks, gts) -> dict:
    rec = {"id": sid, "stacks": [], "truth": [], "labels": []}
    for i, (st, gt) in enumerate(zip(stacks, gts)):
        names = (f"{sid}_cam{i + 1}_stack.fpi", f"{sid}_cam{i + 1}_truth.fpi", f"{sid}_cam{i + 1}_md.fpi")
        write_fpi(out / names[0], np.moveaxis(st.images, 0, -1))
        write_fpi(out / names[1], gt.to_array())
        write_fpi(out / names[2], ps_labels(st))
        rec["stacks"].append(names[0])
        rec["truth"].append(names[1])
        rec["labels"].append(names[2])
    return rec


def generate_dataset(count: int, rig: Rig, recipe: dict | None, seed: int, out_dir) -> DatasetManifest:
    """Render ``count`` samples (reference plane first) into ``out_dir``.

    Every sample stores, per camera, the fringe stack, the ground truth
    (depth, Phi, phi, k, mask) and the N-step numerator/denominator labels.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    r = {**DEFAULT_RECIPE, **(recipe or {})}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_rig(rig, out / "rig.json")
    N, views = int(r["N"]), min(int(r["views"]), len(rig.cameras))
    records = []
    ref_stacks, ref_gts = render_views(reference_scene(), rig, N, stage_seed(seed, "reference"), views)
    rec = _write_sample(out, "s0000", ref_stacks, ref_gts)
    rec.update(reference=True, split="train", scene=reference_scene().to_dict())
    records.append(rec)
    rng = np.random.default_rng(stage_seed(seed, "scenes"))
    n_val = int(round((count - 1) * float(r["val_fraction"])))
    for i in range(1, count):
        for _attempt in range(100):
            scene = random_scene(rng, r)
            try:
                stacks, gts = render_views(scene, rig, N, stage_seed(seed, "sample", i), views)
            except RenderError:
                continue
            if all(gt.mask.mean() >= r["min_visible_fraction"] for gt in gts):
                break
        else:
            raise RenderError("could not place a visible scene after 100 attempts")
        rec = _write_sample(out, f"s{i:04d}", stacks, gts)
        split = "val" if i > count - 1 - n_val else "train"
        rec.update(reference=False, split=split, scene=scene.to_dict())
        records.append(rec)
    manifest = DatasetManifest(records, seed, "rig.json", r, out)
    manifest.save(out / "manifest.json")
    return manifest


def load_dataset_rig(manifest: DatasetManifest) -> Rig:
    return load_rig(manifest.path(manifest.rig_path))
