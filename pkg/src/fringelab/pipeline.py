"""End-to-end pipeline: simulate, retrieve, unwrap, triangulate, evaluate.

A run writes every intermediate product into its output directory together
with ``manifest.json`` (config, config hash, derived seeds, versions and a
SHA-256 of every artifact).  Nothing in the outputs depends on wall-clock
time, so rerunning a config reproduces the directory bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import observed_orders, order_error_rate, phase_and_depth_errors, sphere_pair_report, write_report
from .fpi import write_fpi, write_ply
from .phase import PhaseMaps, ft_wrapped_phase, phase_maps_from_md, retrieve_ps
from .reconstruct import reconstruct
from .rig import Rig, jitter_rig, load_rig, make_rig, save_rig
from .scene import Scene
from .simulator import (
    make_discontinuity_scene,
    make_sphere_pair_scene,
    make_staircase_scene,
    make_test_scene,
    random_scene,
    reference_scene,
    render_fringe_stack,
    render_reference,
    render_views,
    stage_seed,
)
from .unwrap import (
    TWO_PI,
    DepthRange,
    OrderMap,
    adc_update,
    reference_unwrap,
    spu_unwrap,
    tpu_hierarchical,
    unwrap_apply,
)

RETRIEVAL_METHODS = ("ps", "ft", "cnn1")
UNWRAP_METHODS = ("spu", "ref", "tpu", "cnn2")
SCENE_NAMES = ("test", "spheres", "discontinuity", "staircase", "reference", "random")


class ConfigError(ValueError):
    """Invalid configuration; reported before any output is written."""


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    rig: str | None = None  # calibration JSON; None -> desk rig
    scene: str = "test"  # a scene name or a scene JSON file
    N: int = 3
    K: int = 12
    retrieval: str = "ps"
    unwrap: str = "spu"
    views: int = 2
    zmin: float | None = None
    zmax: float | None = None
    adc: bool = False  # bootstrap with 3-view SPU, then unwrap with per-pixel windows
    adc_from: str | None = None  # previous depth map (FPI1) for per-pixel windows
    adc_half_width: float = 5.0
    reconstruct: str = "projector"
    cnn1_weights: str | None = None
    cnn2_weights: str | None = None
    noise: float = 0.0
    quantize: bool = False
    jitter: bool = False  # unwrap with a perturbed calibration
    out: str = "run"
    seed: int = 0
    name: str | None = None

    @staticmethod
    def from_dict(d: dict) -> PipelineConfig:
        known = {f.name for f in fields(PipelineConfig)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return PipelineConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def validate(cfg: PipelineConfig) -> None:
    """Raise :class:`ConfigError` for impossible method combinations or missing files."""
    if cfg.retrieval not in RETRIEVAL_METHODS:
        raise ConfigError(f"unknown retrieval method {cfg.retrieval!r}")
    if cfg.unwrap not in UNWRAP_METHODS:
        raise ConfigError(f"unknown unwrap method {cfg.unwrap!r}")
    if cfg.views not in (2, 3):
        raise ConfigError("views must be 2 or 3")
    if cfg.N < 3:
        raise ConfigError("N must be >= 3")
    if cfg.K < 1:
        raise ConfigError("K must be >= 1")
    if cfg.reconstruct not in ("projector", "stereo"):
        raise ConfigError(f"unknown reconstruction {cfg.reconstruct!r}")
    if cfg.retrieval == "cnn1" and not cfg.cnn1_weights:
        raise ConfigError("retrieval cnn1 needs cnn1_weights")
    if cfg.unwrap == "cnn2" and not cfg.cnn2_weights:
        raise ConfigError("unwrap cnn2 needs cnn2_weights and reference data")
    if cfg.adc and cfg.adc_from:
        raise ConfigError("use either adc or adc_from, not both")
    if (cfg.adc or cfg.adc_from) and cfg.unwrap != "spu":
        raise ConfigError("adaptive depth constraint applies to spu only")
    for key in ("rig", "cnn1_weights", "cnn2_weights", "adc_from"):
        path = getattr(cfg, key)
        if path and not Path(path).exists():
            raise ConfigError(f"{key} file not found: {path}")
    if cfg.scene not in SCENE_NAMES and not Path(cfg.scene).exists():
        raise ConfigError(f"unknown scene {cfg.scene!r}")
    if (cfg.zmin is None) != (cfg.zmax is None):
        raise ConfigError("give both zmin and zmax")
    if cfg.zmin is not None and not cfg.zmin < cfg.zmax:
        raise ConfigError("zmin must be below zmax")


def load_config_rig(cfg: PipelineConfig) -> Rig:
    rig = load_rig(cfg.rig) if cfg.rig else make_rig("desk")
    if cfg.views == 3 and len(rig.cameras) < 3:
        raise ConfigError("three views need a rig with three cameras")
    rig = rig.with_periods(cfg.K)
    if cfg.zmin is not None:
        from dataclasses import replace

        rig = replace(rig, zmin=float(cfg.zmin), zmax=float(cfg.zmax))
    return rig


def build_scene(cfg: PipelineConfig, rig: Rig) -> Scene:
    name = cfg.scene
    if name == "test":
        scene = make_test_scene()
    elif name == "spheres":
        scene = make_sphere_pair_scene()
    elif name == "discontinuity":
        scene = make_discontinuity_scene(rig)
    elif name == "staircase":
        scene = make_staircase_scene(rig)
    elif name == "reference":
        scene = reference_scene()
    elif name == "random":
        scene = random_scene(np.random.default_rng(stage_seed(cfg.seed, "scene")))
    else:
        scene = Scene.from_dict(json.loads(Path(name).read_text()))
    if cfg.noise or cfg.quantize:
        scene = scene.with_noise(cfg.noise, cfg.quantize)
    return scene


def retrieve(method: str, stack, N: int, weights: str | None = None) -> PhaseMaps:
    """Wrapped phase of one camera by PS (all frames), FT or CNN1 (first frame)."""
    images = getattr(stack, "images", stack)
    if method == "ps":
        return retrieve_ps(images)
    if method == "ft":
        phi, mask = ft_wrapped_phase(images[0])
        nan = np.full(phi.shape, np.nan)
        return PhaseMaps(nan, nan, phi, nan, mask)
    if method == "cnn1":
        from .nn import infer_cnn1, load_weights

        spec, params, _ = load_weights(weights)
        M, D = infer_cnn1(params, spec, images[0])
        return phase_maps_from_md(M, D, N)
    raise ValueError(f"unknown retrieval method {method!r}")


class _Writer:
    """Collects artifact files and their hashes for the manifest."""

    def __init__(self, root: Path):
        self.root = root
        self.files = {}

    def _record(self, name):
        self.files[name] = hashlib.sha256((self.root / name).read_bytes()).hexdigest()

    def fpi(self, name, data):
        write_fpi(self.root / name, np.asarray(data, dtype=np.float32))
        self._record(name)

    def json(self, name, obj):
        (self.root / name).write_text(json.dumps(obj, indent=2, sort_keys=True))
        self._record(name)

    def ply(self, name, points):
        write_ply(self.root / name, points)
        self._record(name)


def _orders_to_float(om: OrderMap):
    return np.where(om.decided, om.k, -1).astype(np.float32)


def run_pipeline(cfg: PipelineConfig, log=None) -> dict:
    """Execute every stage for ``cfg``; returns the report dictionary.

    Raises :class:`ConfigError` before touching the output directory, and
    :class:`StageError` naming the failing stage otherwise.
    """
    validate(cfg)
    rig = load_config_rig(cfg)
    out = Path(cfg.out)
    stage = "simulate"
    try:
        scene = build_scene(cfg, rig)
        out.mkdir(parents=True, exist_ok=True)
        w = _Writer(out)
        n_views = max(2, cfg.views, 3 if cfg.adc else 2)
        n_views = min(n_views, len(rig.cameras))
        seed = stage_seed(cfg.seed, "render")
        stacks, gts = render_views(scene, rig, cfg.N, seed, n_views)
        save_rig(rig, out / "rig.json")
        w._record("rig.json")
        w.json("scene.json", scene.to_dict())
        for i, (st, gt) in enumerate(zip(stacks, gts)):
            w.fpi(f"cam{i + 1}_stack.fpi", np.moveaxis(st.images, 0, -1))
            w.fpi(f"cam{i + 1}_truth.fpi", gt.to_array())
        # the unwrapping stage sees the (optionally perturbed) calibration
        urig = rig
        if cfg.jitter:
            urig = jitter_rig(rig, np.random.default_rng(stage_seed(cfg.seed, "jitter")))

        stage = "retrieve"
        maps = [retrieve(cfg.retrieval, st, cfg.N, cfg.cnn1_weights) for st in stacks]
        for i, pm in enumerate(maps):
            w.fpi(f"cam{i + 1}_phase.fpi", np.stack([pm.M, pm.D, pm.phi, pm.B_mod, pm.mask], -1))

        stage = "unwrap"
        K = rig.periods
        gt1 = gts[0]
        depth = DepthRange.of(urig)
        extra = {}
        if cfg.unwrap == "spu":
            kw = dict(mask1=maps[0].mask, mask2=maps[1].mask)
            if cfg.adc or cfg.adc_from:
                if cfg.adc:
                    boot = spu_unwrap(maps[0].phi, maps[1].phi, urig, depth, 3, maps[2].phi,
                                      mask3=maps[2].mask, **kw)
                    prev = reconstruct(unwrap_apply(maps[0].phi, boot), urig).depth
                    w.fpi("bootstrap_orders.fpi", _orders_to_float(boot))
                else:
                    from .fpi import read_fpi

                    prev = read_fpi(cfg.adc_from)
                depth = adc_update(prev, cfg.adc_half_width, urig.zmin, urig.zmax)
            if cfg.views == 3:
                om = spu_unwrap(maps[0].phi, maps[1].phi, urig, depth, 3, maps[2].phi,
                                mask3=maps[2].mask, **kw)
            else:
                om = spu_unwrap(maps[0].phi, maps[1].phi, urig, depth, 2, **kw)
        elif cfg.unwrap == "ref":
            ref = render_reference(rig, N=cfg.N)
            om = reference_unwrap(maps[0].phi, ref, K, maps[0].mask)
            extra["reference_band"] = _reference_band(gt1, ref)
        elif cfg.unwrap == "tpu":
            unit = render_fringe_stack(scene, rig.cameras[0], rig.projector.with_periods(1), cfg.N,
                                       stage_seed(cfg.seed, "unit"), 0)[0]
            pu = retrieve("ps", unit, cfg.N)
            om = tpu_hierarchical(maps[0].phi, pu.phi, K, maps[0].mask & pu.mask)
        else:  # cnn2
            from .nn import cnn2_input, infer_cnn2, load_weights

            ref = render_reference(rig, N=cfg.N)
            spec, params, _ = load_weights(cfg.cnn2_weights)
            x = cnn2_input(stacks[0].images[0], stacks[1].images[0], ref.stack1.images[0],
                           ref.stack2.images[0], np.where(ref.mask, ref.k_ref, 0), K)
            om = infer_cnn2(params, spec, x, K, maps[0].mask)
        Phi = unwrap_apply(maps[0].phi, om)
        w.fpi("orders.fpi", _orders_to_float(om))
        w.fpi("Phi.fpi", np.where(np.isfinite(Phi), Phi, np.nan))

        stage = "reconstruct"
        rec = reconstruct(Phi, urig, cfg.reconstruct, phi2=maps[1].phi, mask2=maps[1].mask)
        w.fpi("depth.fpi", rec.depth)
        w.ply("cloud.ply", rec.cloud())

        stage = "evaluate"
        # orders are scored against the wrap the measured phase actually has
        truth = observed_orders(maps[0].phi, gt1.Phi, gt1.mask)
        report = {"config": cfg.to_dict(), "orders": order_error_rate(om, truth)}
        errs = phase_and_depth_errors(Phi, np.where(gt1.mask, gt1.Phi, np.nan), rec.depth, gt1.depth, gt1.mask)
        report.update({k: v for k, v in errs.items() if not isinstance(v, np.ndarray)})
        report.update(extra)
        if cfg.scene == "spheres":
            surf = gt1.surface
            try:
                report["spheres"] = sphere_pair_report(rec.points[rec.mask & (surf == 0)],
                                                       rec.points[rec.mask & (surf == 1)])
            except ValueError as exc:
                report["spheres"] = {"error": str(exc)}
        maps_out = {k: v for k, v in errs.items() if isinstance(v, np.ndarray)}
        write_report(out / "report.json", report, maps_out)
        for name in ["report.json"] + [f"report_{k}.fpi" for k in maps_out]:
            w._record(name)
        manifest = {
            "config": cfg.to_dict(),
            "config_sha256": cfg.digest(),
            "seeds": {"render": seed, "jitter": stage_seed(cfg.seed, "jitter") if cfg.jitter else None},
            "versions": {"fringelab": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
            "files": dict(sorted(w.files.items())),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except ConfigError:
        raise
    except Exception as exc:  # noqa: BLE001 - any failure is reported with its stage
        raise StageError(stage, str(exc)) from exc
    if log:
        log(f"wrote {out}")
    return report


def _reference_band(gt, ref) -> dict:
    """How many pixels lie outside the +-pi band around the reference phase."""
    m = gt.mask & ref.mask
    outside = m & (np.abs(gt.Phi - ref.Phi_ref) >= np.pi)
    return {"pixels": int(m.sum()), "outside_band": int(outside.sum()),
            "outside_fraction": float(outside.sum() / max(int(m.sum()), 1))}


COMPARE_KEYS = ("rig", "scene", "N", "K", "noise", "quantize", "seed")


def compare_methods(configs, out_dir) -> list:
    """Run several configs on one simulated scene and tabulate their accuracy.

    Writes ``compare.csv`` and ``compare.json`` into ``out_dir``.
    """
    configs = list(configs)
    if len(configs) < 2:
        raise ConfigError("need at least two configs to compare")
    base = {k: getattr(configs[0], k) for k in COMPARE_KEYS}
    for c in configs[1:]:
        if {k: getattr(c, k) for k in COMPARE_KEYS} != base:
            raise ConfigError("mismatched scenes: configs must share rig, scene, N, K, noise and seed")
    for c in configs:
        validate(c)
    out = Path(out_dir)
    rows = []
    for i, c in enumerate(configs):
        name = c.name or f"{c.retrieval}-{c.unwrap}-{c.views}v{'-adc' if c.adc else ''}"
        run = PipelineConfig.from_dict({**c.to_dict(), "out": str(out / f"method{i + 1}"), "name": name})
        rep = run_pipeline(run)
        rows.append({
            "method": name,
            "order_error_rate": rep["orders"]["rate"],
            "undecided_fraction": rep["orders"]["undecided_fraction"],
            "phase_rmse": rep.get("phase_rmse", float("nan")),
            "depth_rmse": rep.get("depth_rmse", float("nan")),
        })
    with open(out / "compare.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    (out / "compare.json").write_text(json.dumps(rows, indent=2))
    return rows


def standard_methods(base: PipelineConfig, cnn1_weights=None, cnn2_weights=None) -> list:
    """The four comparison methods on ``base``'s scene.

    3-view SPU + ADC, 2-view SPU with the depth constraint, reference-plane
    unwrapping, and the learned CNN1 + CNN2 pipeline.
    """
    d = base.to_dict()
    common = {k: d[k] for k in COMPARE_KEYS}
    return [
        PipelineConfig(**common, retrieval="ps", unwrap="spu", views=3, adc=True, name="spu3-adc"),
        PipelineConfig(**common, retrieval="ps", unwrap="spu", views=2, zmin=base.zmin, zmax=base.zmax,
                       name="spu2-depth"),
        PipelineConfig(**common, retrieval="ps", unwrap="ref", name="reference"),
        PipelineConfig(**common, retrieval="cnn1", unwrap="cnn2", cnn1_weights=cnn1_weights,
                       cnn2_weights=cnn2_weights, name="cnn"),
    ]


def main_error(exc: Exception) -> int:
    if isinstance(exc, ConfigError):
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if isinstance(exc, StageError):
        print(f"stage {exc}", file=sys.stderr)
        return 1
    print(f"error: {exc}", file=sys.stderr)
    return 1
