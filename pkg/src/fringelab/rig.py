"""Camera-projector-camera rigs: construction, calibration files, jitter.

Calibration file (JSON)::

    {
      "cameras": [
        {"name": "cam1", "fx": .., "fy": .., "cx": .., "cy": ..,
         "k1": .., "k2": .., "k3": .., "p1": .., "p2": ..,
         "width": .., "height": ..,
         "R": [9 row-major doubles], "t": [3 doubles, mm]},
        ...
      ],
      "projector": {same keys as a camera, plus "fringe_axis": "x"|"y",
                    "periods": K},
      "volume": {"zmin": .., "zmax": ..}
    }

``R``/``t`` map world to device coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import (
    CameraModel,
    GeometryError,
    ProjectorModel,
    RigidTransform,
    rotation_from_axis_angle,
)

_CAMERA_KEYS = ("fx", "fy", "cx", "cy", "k1", "k2", "k3", "p1", "p2")


@dataclass(frozen=True)
class Rig:
    cameras: tuple[CameraModel, ...]
    projector: ProjectorModel
    zmin: float = -65.0
    zmax: float = 65.0

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if not self.cameras:
            raise GeometryError("rig needs at least one camera")
        if not self.zmin < self.zmax:
            raise GeometryError("zmin must be below zmax")

    @property
    def periods(self) -> int:
        return self.projector.periods

    def with_periods(self, periods: int) -> Rig:
        return replace(self, projector=self.projector.with_periods(periods))


def make_rig(scale: str = "desk", periods: int | None = None, n_cameras: int = 3) -> Rig:
    """Synthetic rig standing 600 mm above the reference plane.

    Camera 1 sits 200 mm left of the projector; camera 2 is close to the
    projector on the other side (baseline ratio -1/8 relative to camera 1), so
    on a fronto-parallel surface the wrong order ``k`` shows a wrapped-phase
    mismatch of ``2 pi |wrap(k / 8)|`` >= 0.785 rad for ``|k| < 8``.  The
    130 mm working volume spans fewer than 8 periods at K=48.  Camera 3 is
    offset in x (ratio -0.3) and y.
    """
    if scale == "desk":
        cam_w, cam_h, proj_w, proj_h, k_default = 128, 96, 192, 240, 12
    elif scale == "full":
        cam_w, cam_h, proj_w, proj_h, k_default = 640, 480, 912, 1140, 48
    else:
        raise ValueError(f"unknown rig scale {scale!r}")
    periods = k_default if periods is None else periods
    height = 600.0
    # camera field ~240 mm wide, projector field ~270 mm wide at the plane
    f_cam = cam_w * height / 240.0
    f_proj = proj_w * height / 270.0
    target = np.zeros(3)
    positions = [(-200.0, 0.0, height), (25.0, 0.0, height), (60.0, 140.0, height)]
    cameras = []
    for pos in positions[:n_cameras]:
        pose = RigidTransform.look_at(pos, target)
        cameras.append(
            CameraModel(
                fx=f_cam, fy=f_cam, cx=(cam_w - 1) / 2, cy=(cam_h - 1) / 2,
                width=cam_w, height=cam_h, pose=pose,
            )
        )
    proj = ProjectorModel(
        fx=f_proj, fy=f_proj, cx=(proj_w - 1) / 2, cy=(proj_h - 1) / 2,
        width=proj_w, height=proj_h,
        pose=RigidTransform.look_at((0.0, 0.0, height), target),
        fringe_axis="x", periods=periods,
    )
    return Rig(tuple(cameras), proj)


def jitter_rig(rig: Rig, rng: np.random.Generator, rot_deg: float = 0.05, trans_mm: float = 0.1) -> Rig:
    """Perturb extrinsics of every device except camera 1 (the world anchor).

    Each perturbed pose gets a rotation of up to ``rot_deg`` about a random
    axis and a translation offset of up to ``trans_mm`` in a random direction;
    both magnitudes are drawn uniformly from ``[0, bound]``.
    """

    def perturb(dev):
        axis = rng.normal(size=3)
        dR = rotation_from_axis_angle(axis, np.deg2rad(rot_deg * rng.uniform()))
        dt = rng.normal(size=3)
        dt *= trans_mm * rng.uniform() / np.linalg.norm(dt)
        return dev.with_pose(RigidTransform(dR, dt).compose(dev.pose))

    cams = (rig.cameras[0],) + tuple(perturb(c) for c in rig.cameras[1:])
    return replace(rig, cameras=cams, projector=perturb(rig.projector))


def _device_to_dict(dev: CameraModel, name: str) -> dict:
    d = {"name": name}
    for key in _CAMERA_KEYS:
        d[key] = float(getattr(dev, key))
    d["width"] = int(dev.width)
    d["height"] = int(dev.height)
    d["R"] = [float(x) for x in dev.pose.R.ravel()]
    d["t"] = [float(x) for x in dev.pose.t]
    return d


def _device_kwargs(d: dict) -> dict:
    kw = {key: float(d.get(key, 0.0)) for key in _CAMERA_KEYS}
    kw["width"] = int(d["width"])
    kw["height"] = int(d["height"])
    kw["pose"] = RigidTransform(np.asarray(d["R"], dtype=np.float64).reshape(3, 3), d["t"])
    return kw


def rig_to_dict(rig: Rig) -> dict:
    proj = _device_to_dict(rig.projector, "projector")
    proj["fringe_axis"] = rig.projector.fringe_axis
    proj["periods"] = int(rig.projector.periods)
    return {
        "cameras": [_device_to_dict(c, f"cam{i + 1}") for i, c in enumerate(rig.cameras)],
        "projector": proj,
        "volume": {"zmin": rig.zmin, "zmax": rig.zmax},
    }


def rig_from_dict(d: dict) -> Rig:
    cams = tuple(CameraModel(**_device_kwargs(c)) for c in d["cameras"])
    p = d["projector"]
    proj = ProjectorModel(
        **_device_kwargs(p), fringe_axis=p.get("fringe_axis", "x"), periods=int(p["periods"])
    )
    vol = d.get("volume", {})
    return Rig(cams, proj, float(vol.get("zmin", -65.0)), float(vol.get("zmax", 65.0)))


def save_rig(rig: Rig, path) -> None:
    Path(path).write_text(json.dumps(rig_to_dict(rig), indent=2))


def load_rig(path) -> Rig:
    return rig_from_dict(json.loads(Path(path).read_text()))
