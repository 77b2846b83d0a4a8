"""Accuracy metrics: sphere fitting, order error rates, phase and depth errors, reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .fpi import write_fpi
from .simulator import REFERENCE_SPHERE_DISTANCE, REFERENCE_SPHERE_RADII
from .unwrap import OrderMap


class EvaluationError(ValueError):
    pass


@dataclass
class SphereFit:
    center: np.ndarray
    radius: float
    rms: float
    inliers: int
    condition: float  # condition number of the geometric Jacobian (large for small caps)

    def to_dict(self):
        d = asdict(self)
        d["center"] = [float(x) for x in self.center]
        return d


def _algebraic_sphere(p):
    # |p|^2 = 2 c.p + (R^2 - |c|^2)
    A = np.column_stack([2.0 * p, np.ones(len(p))])
    b = np.sum(p * p, axis=1)
    sv = np.linalg.svd(A, compute_uv=False)
    if not sv[-1] > 1e-10 * sv[0]:
        raise EvaluationError("rank deficient")
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    c = sol[:3]
    r2 = sol[3] + c @ c
    if r2 <= 0:
        raise EvaluationError("rank deficient")
    return c, np.sqrt(r2)


def _jacobian(q, c, r):
    diff = q - c
    dist = np.linalg.norm(diff, axis=1)
    return np.column_stack([-diff / dist[:, None], -np.ones(len(q))]), dist - r


def fit_sphere(points, iterations: int = 5, trim: bool = False) -> SphereFit:
    """Least-squares sphere: algebraic solution refined by Gauss-Newton on
    geometric distance.

    Points are centred on their mean before fitting, so the result does not
    depend on where the cloud sits in the world.  With ``trim`` points whose
    residual exceeds 3 robust sigmas (MAD) are dropped once and the fit redone.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    p = p[np.all(np.isfinite(p), axis=1)]
    if len(p) < 10:
        raise EvaluationError("need at least 10 points")
    origin = p.mean(axis=0)
    q = p - origin
    c, r = _algebraic_sphere(q)
    for _ in range(iterations):
        J, res = _jacobian(q, c, r)
        delta, *_ = np.linalg.lstsq(J, -res, rcond=None)
        c = c + delta[:3]
        r = r + delta[3]
    J, res = _jacobian(q, c, r)
    sv = np.linalg.svd(J, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    if trim:
        mad = 1.4826 * np.median(np.abs(res - np.median(res)))
        keep = np.abs(res) <= 3.0 * mad if mad > 0 else np.ones(len(q), bool)
        if keep.sum() < len(q):
            fit = fit_sphere(p[keep], iterations, trim=False)
            return fit
    return SphereFit(c + origin, float(abs(r)), float(np.sqrt(np.mean(res**2))), len(q), cond)


def sphere_pair_report(cloud1, cloud2, radii=REFERENCE_SPHERE_RADII, distance: float = REFERENCE_SPHERE_DISTANCE) -> dict:
    """Fit both spheres and compare radii and centre distance with the truth."""
    radii = tuple(radii)
    if len(radii) != 2:
        raise EvaluationError("need exactly two true radii")
    f1, f2 = fit_sphere(cloud1), fit_sphere(cloud2)
    d = float(np.linalg.norm(f1.center - f2.center))
    return {
        "r1": f1.radius,
        "r2": f2.radius,
        "center_distance": d,
        "rms1": f1.rms,
        "rms2": f2.rms,
        "dev_r1": f1.radius - radii[0],
        "dev_r2": f2.radius - radii[1],
        "dev_distance": d - distance,
        "truth": {"r1": radii[0], "r2": radii[1], "center_distance": distance},
    }


def _as_orders(o):
    if isinstance(o, OrderMap):
        return o.k, o.mask
    k = np.asarray(o)
    return k, np.ones(k.shape, dtype=bool)


def observed_orders(phi, Phi_true, mask=None) -> OrderMap:
    """Orders that carry a measured wrapped phase onto the true absolute phase.

    ``k = round((Phi_true - phi) / 2 pi)``.  For noise-free phase this is the
    ground-truth order.  Where noise has pushed the measured phase across the
    +-pi cut it is the neighbouring order, and that is the order an unwrapper
    must pick to recover the true absolute phase.
    """
    phi = np.asarray(phi, dtype=np.float64)
    Phi_true = np.asarray(Phi_true, dtype=np.float64)
    m = np.isfinite(phi) & np.isfinite(Phi_true)
    if mask is not None:
        m &= np.asarray(mask, dtype=bool)
    k = np.round(np.where(m, Phi_true - phi, 0.0) / (2 * np.pi)).astype(int)
    return OrderMap(np.where(m, k, -1), np.zeros(phi.shape), m)


def order_error_rate(pred, truth, mask=None) -> dict:
    """Wrong decided pixels over decided pixels, on the joint mask.

    The joint mask is where both maps are defined and the truth is decided.
    """
    kp, mp = _as_orders(pred)
    kt, mt = _as_orders(truth)
    if kp.shape != kt.shape:
        raise EvaluationError("order maps are not co-registered")
    joint = mp & mt & (kt >= 0)
    if mask is not None:
        joint &= mask
    n = int(joint.sum())
    if n == 0:
        raise EvaluationError("empty joint mask")
    decided = joint & (kp >= 0)
    wrong = decided & (kp != kt)
    nd = int(decided.sum())
    return {
        "rate": float(wrong.sum() / nd) if nd else 0.0,
        "count": int(wrong.sum()),
        "decided": nd,
        "pixels": n,
        "undecided_fraction": float(1.0 - nd / n),
    }


def phase_and_depth_errors(pred_Phi, truth_Phi, pred_depth, truth_depth, mask) -> dict:
    """Masked RMSEs and per-pixel error maps (NaN off the evaluated set).

    Pixels where a prediction is undefined (NaN) are excluded and counted.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EvaluationError("empty mask")
    out = {}
    for name, pred, truth in (("phase", pred_Phi, truth_Phi), ("depth", pred_depth, truth_depth)):
        if pred is None or truth is None:
            continue
        err = np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
        use = mask & np.isfinite(err)
        out[f"{name}_rmse"] = float(np.sqrt(np.mean(err[use] ** 2))) if use.any() else float("nan")
        out[f"{name}_missing"] = int((mask & ~np.isfinite(err)).sum())
        out[f"{name}_error"] = np.where(use, err, np.nan)
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def write_report(path, metrics: dict, maps: dict | None = None) -> dict:
    """Write metrics as JSON; error maps go to FPI1 files next to it.

    Array-valued entries of ``metrics`` are moved to ``maps`` automatically.
    Returns the JSON document as written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    maps = dict(maps or {})
    doc = {}
    for k, v in metrics.items():
        if isinstance(v, np.ndarray) and v.ndim >= 2:
            maps[k] = v
        else:
            doc[k] = _jsonable(v)
    files = {}
    for name, arr in maps.items():
        fn = f"{path.stem}_{name}.fpi"
        write_fpi(path.parent / fn, np.asarray(arr, dtype=np.float32))
        files[name] = fn
    if files:
        doc["maps"] = files
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return doc


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())
