"""Command line entry point: ``fringelab <subcommand> ...``.

Exit codes: 0 success, 1 a stage failed, 2 invalid arguments or config.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .fpi import read_fpi, read_ply, write_fpi, write_ply
from .pipeline import (
    ConfigError,
    PipelineConfig,
    StageError,
    build_scene,
    compare_methods,
    load_config_rig,
    main_error,
    retrieve,
    run_pipeline,
    validate,
)

# -- helpers -------------------------------------------------------------------------


def _stack(path):
    """An FPI1 stack file stores the N frames as channels."""
    data = read_fpi(path, squeeze=False)
    return np.moveaxis(data, -1, 0)


def _phase_file(path):
    """Wrapped phase and mask from a ``retrieve`` output (or a bare phase map)."""
    data = read_fpi(path, squeeze=False)
    if data.shape[-1] >= 5:
        return data[..., 2].astype(np.float64), data[..., 4] > 0.5
    phi = data[..., 0].astype(np.float64)
    return phi, np.isfinite(phi)


def _load_config(args) -> PipelineConfig:
    d = {}
    if getattr(args, "config", None):
        d.update(json.loads(Path(args.config).read_text()))
    for key in ("rig", "scene", "N", "K", "retrieval", "unwrap", "views", "zmin", "zmax", "adc",
                "adc_from", "adc_half_width", "reconstruct", "cnn1_weights", "cnn2_weights",
                "noise", "quantize", "jitter", "out", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    return PipelineConfig.from_dict(d)


def _add_config_flags(p):
    p.add_argument("--config", help="PipelineConfig JSON; flags override its fields")
    p.add_argument("--rig")
    p.add_argument("--scene")
    p.add_argument("--N", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--retrieval", choices=("ps", "ft", "cnn1"))
    p.add_argument("--unwrap", choices=("spu", "ref", "tpu", "cnn2"))
    p.add_argument("--views", type=int, choices=(2, 3))
    p.add_argument("--zmin", type=float)
    p.add_argument("--zmax", type=float)
    p.add_argument("--adc", action="store_true", default=None)
    p.add_argument("--adc-from", dest="adc_from")
    p.add_argument("--adc-half-width", dest="adc_half_width", type=float)
    p.add_argument("--reconstruct", choices=("projector", "stereo"))
    p.add_argument("--cnn1-weights", dest="cnn1_weights")
    p.add_argument("--cnn2-weights", dest="cnn2_weights")
    p.add_argument("--noise", type=float)
    p.add_argument("--quantize", action="store_true", default=None)
    p.add_argument("--jitter", action="store_true", default=None)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)


# -- subcommands ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .rig import load_rig, make_rig
    from .simulator import generate_dataset, render_views, stage_seed

    if args.dataset:
        rig = load_rig(args.rig) if args.rig else make_rig("desk")
        rig = rig.with_periods(args.K or rig.periods)
        recipe = json.loads(Path(args.recipe).read_text()) if args.recipe else None
        m = generate_dataset(args.dataset, rig, recipe, args.seed or 0, args.out or "dataset")
        print(f"{len(m.records)} samples -> {Path(args.out or 'dataset') / 'manifest.json'}")
        return 0
    cfg = _load_config(args)
    validate(cfg)
    rig = load_config_rig(cfg)
    scene = build_scene(cfg, rig)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stacks, gts = render_views(scene, rig, cfg.N, stage_seed(cfg.seed, "render"),
                               min(max(2, cfg.views), len(rig.cameras)))
    from .rig import save_rig

    save_rig(rig, out / "rig.json")
    (out / "scene.json").write_text(json.dumps(scene.to_dict(), indent=2))
    for i, (st, gt) in enumerate(zip(stacks, gts)):
        write_fpi(out / f"cam{i + 1}_stack.fpi", np.moveaxis(st.images, 0, -1))
        write_fpi(out / f"cam{i + 1}_truth.fpi", gt.to_array())
    print(f"rendered {len(stacks)} views -> {out}")
    return 0


def cmd_retrieve(args) -> int:
    stack = _stack(args.stack)
    if args.method == "cnn1" and not args.weights:
        raise ConfigError("retrieve --method cnn1 needs --weights")
    pm = retrieve(args.method, stack, stack.shape[0], args.weights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("M", "D", "phi", "B_mod", "mask"):
        write_fpi(out / f"{name}.fpi", np.asarray(getattr(pm, name), dtype=np.float32))
    print(f"wrapped phase -> {out}")
    return 0


def cmd_unwrap(args) -> int:
    from .rig import load_rig
    from .simulator import render_reference
    from .unwrap import DepthRange, adc_update, reference_unwrap, spu_unwrap, tpu_hierarchical, unwrap_apply

    rig = load_rig(args.rig)
    if args.K:
        rig = rig.with_periods(args.K)
    phi1, m1 = _phase_file(args.phi1)
    if args.method == "spu":
        if not args.phi2:
            raise ConfigError("spu needs --phi2")
        if args.views == 3 and not args.phi3:
            raise ConfigError("three views need --phi3")
        phi2, m2 = _phase_file(args.phi2)
        zmin = rig.zmin if args.zmin is None else args.zmin
        zmax = rig.zmax if args.zmax is None else args.zmax
        depth = DepthRange(zmin, zmax)
        if args.adc_from:
            depth = adc_update(read_fpi(args.adc_from), args.adc_half_width, zmin, zmax)
        phi3 = m3 = None
        if args.views == 3:
            phi3, m3 = _phase_file(args.phi3)
        om = spu_unwrap(phi1, phi2, rig, depth, args.views, phi3, m1, m2, m3)
    elif args.method == "ref":
        om = reference_unwrap(phi1, render_reference(rig), rig.periods, m1)
    else:
        if not args.phi_unit:
            raise ConfigError("tpu needs --phi-unit")
        pu, mu = _phase_file(args.phi_unit)
        om = tpu_hierarchical(phi1, pu, rig.periods, m1 & mu)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_fpi(out / "orders.fpi", np.where(om.decided, om.k, -1).astype(np.float32))
    write_fpi(out / "Phi.fpi", unwrap_apply(phi1, om).astype(np.float32))
    print(f"decided {int(om.decided.sum())} of {int(om.mask.sum())} pixels -> {out}")
    return 0


def cmd_reconstruct(args) -> int:
    from .reconstruct import reconstruct
    from .rig import load_rig

    rig = load_rig(args.rig)
    Phi = read_fpi(args.Phi).astype(np.float64)
    phi2 = m2 = None
    if args.method == "stereo":
        if not args.phi2:
            raise ConfigError("stereo reconstruction needs --phi2")
        phi2, m2 = _phase_file(args.phi2)
    rec = reconstruct(Phi, rig, args.method, phi2=phi2, mask2=m2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_fpi(out / "depth.fpi", rec.depth.astype(np.float32))
    write_ply(out / "cloud.ply", rec.cloud())
    print(f"{int(rec.mask.sum())} points -> {out}")
    return 0


def cmd_train(args) -> int:
    from .nn import ModelSpec, train_from_manifest
    from .simulator import DatasetManifest

    manifest = DatasetManifest.load(args.dataset)
    spec = ModelSpec(1 if args.task == "cnn1" else 5, 2 if args.task == "cnn1" else 1, filters=args.filters,
                     blocks=args.blocks)
    crop = tuple(int(v) for v in args.crop.split("x")) if args.crop else None
    res = train_from_manifest(args.task, manifest, args.epochs, args.seed, spec=spec, lr=args.lr,
                              lr_final=args.lr_final, crop=crop, out_dir=args.out, name=args.task,
                              log=(lambda s: print(s, file=sys.stderr)) if args.verbose else None)
    first, last = res.curve[0], res.curve[-1]
    print(f"{args.task}: val loss {first[2]:.4g} -> {last[2]:.4g}, best epoch {res.best_epoch} -> {args.out}")
    return 0


def cmd_infer(args) -> int:
    from .nn import infer_cnn1, infer_cnn2, load_weights
    from .phase import wrapped_phase

    spec, params, _ = load_weights(args.weights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.task == "cnn1":
        img = _stack(args.input)[0]
        M, D = infer_cnn1(params, spec, img)
        write_fpi(out / "M.fpi", M.astype(np.float32))
        write_fpi(out / "D.fpi", D.astype(np.float32))
        write_fpi(out / "phi.fpi", wrapped_phase(M, D).astype(np.float32))
    else:
        if not args.K:
            raise ConfigError("cnn2 inference needs --K")
        x = read_fpi(args.input, squeeze=False)
        om = infer_cnn2(params, spec, x, args.K)
        write_fpi(out / "orders.fpi", om.k.astype(np.float32))
    print(f"{args.task} output -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import order_error_rate, phase_and_depth_errors, sphere_pair_report, write_report

    if args.what == "spheres":
        rep = sphere_pair_report(read_ply(args.cloud1), read_ply(args.cloud2))
        maps = None
    elif args.what == "orders":
        pred = read_fpi(args.pred).astype(int)
        truth = read_fpi(args.truth, squeeze=False)
        k_true = truth[..., 3].astype(int) if truth.shape[-1] >= 5 else truth[..., 0].astype(int)
        mask = truth[..., 4] > 0.5 if truth.shape[-1] >= 5 else k_true >= 0
        rep = order_error_rate(pred, np.where(mask, k_true, -1))
        maps = None
    else:
        truth = read_fpi(args.truth, squeeze=False)
        mask = truth[..., 4] > 0.5
        pred_depth = read_fpi(args.pred_depth) if args.pred_depth else None
        rep = phase_and_depth_errors(read_fpi(args.pred), truth[..., 1], pred_depth, truth[..., 0], mask)
        maps = {k: rep.pop(k) for k in list(rep) if isinstance(rep[k], np.ndarray)}
    write_report(args.out, rep, maps)
    print(json.dumps({k: v for k, v in rep.items() if not isinstance(v, (dict, np.ndarray))}, indent=2))
    return 0


def cmd_pipeline(args) -> int:
    rep = run_pipeline(_load_config(args))
    print(json.dumps(rep["orders"], indent=2))
    return 0


def cmd_compare(args) -> int:
    configs = [PipelineConfig.from_dict(json.loads(Path(p).read_text())) for p in args.configs]
    rows = compare_methods(configs, args.out)
    for r in rows:
        print(f"{r['method']:>16}  error {r['order_error_rate']:.4f}  undecided {r['undecided_fraction']:.4f}"
              f"  phase {r['phase_rmse']:.4g} rad  depth {r['depth_rmse']:.4g} mm")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fringelab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render fringe stacks and ground truth, or a training dataset")
    _add_config_flags(p)
    p.add_argument("--dataset", type=int, help="generate a dataset with this many samples instead")
    p.add_argument("--recipe", help="randomisation recipe JSON for --dataset")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("retrieve", help="wrapped phase from a fringe stack")
    p.add_argument("--method", choices=("ps", "ft", "cnn1"), default="ps")
    p.add_argument("--stack", required=True)
    p.add_argument("--weights")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("unwrap", help="fringe orders and absolute phase")
    p.add_argument("--method", choices=("spu", "ref", "tpu"), default="spu")
    p.add_argument("--rig", required=True)
    p.add_argument("--K", type=int)
    p.add_argument("--phi1", required=True)
    p.add_argument("--phi2")
    p.add_argument("--phi3")
    p.add_argument("--phi-unit", dest="phi_unit")
    p.add_argument("--views", type=int, choices=(2, 3), default=2)
    p.add_argument("--zmin", type=float)
    p.add_argument("--zmax", type=float)
    p.add_argument("--adc-from", dest="adc_from")
    p.add_argument("--adc-half-width", dest="adc_half_width", type=float, default=5.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_unwrap)

    p = sub.add_parser("reconstruct", help="depth map and PLY point cloud from absolute phase")
    p.add_argument("--rig", required=True)
    p.add_argument("--Phi", required=True)
    p.add_argument("--method", choices=("projector", "stereo"), default="projector")
    p.add_argument("--phi2")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("train", help="train CNN1 or CNN2 on a generated dataset")
    p.add_argument("--task", choices=("cnn1", "cnn2"), required=True)
    p.add_argument("--dataset", required=True, help="manifest.json")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-final", dest="lr_final", type=float, help="cosine decay to this rate")
    p.add_argument("--filters", type=int, default=16)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--crop", help="random training crops, e.g. 48x64")
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a trained network")
    p.add_argument("--task", choices=("cnn1", "cnn2"), required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True, help="cnn1: fringe stack; cnn2: 5-channel FPI1 input")
    p.add_argument("--K", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="accuracy reports")
    p.add_argument("what", choices=("spheres", "orders", "phase"))
    p.add_argument("--cloud1")
    p.add_argument("--cloud2")
    p.add_argument("--pred")
    p.add_argument("--pred-depth", dest="pred_depth")
    p.add_argument("--truth")
    p.add_argument("--out", default="report.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="simulate -> retrieve -> unwrap -> reconstruct -> evaluate")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("compare", help="tabulate several pipeline configs on one scene")
    p.add_argument("configs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, StageError) as exc:
        return main_error(exc)
    except (ValueError, OSError, KeyError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, (KeyError, FileNotFoundError)) else 1


if __name__ == "__main__":
    sys.exit(main())
