"""Training samples, the training loop and inference for CNN1 / CNN2.

CNN1 maps one fringe image to the N-step numerator and denominator (M, D).
CNN2 maps five channels (camera-1 fringe, camera-2 fringe, both reference
fringes and the reference order map over K) to the order map over K.
Fringe channels are the first phase-shifted frame of each stack.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..simulator import DatasetManifest, stage_seed
from ..unwrap import OrderMap
from .io import save_weights, write_loss_csv
from .model import ModelSpec, build_model, forward, loss_and_grad
from .optim import AdamState, adam_step

CNN1_SPEC = ModelSpec(1, 2, filters=16)
CNN2_SPEC = ModelSpec(5, 1, filters=16)


def cnn2_input(fringe1, fringe2, ref1, ref2, k_ref, K: int) -> np.ndarray:
    return np.stack([fringe1, fringe2, ref1, ref2, np.asarray(k_ref, dtype=np.float64) / K], axis=-1)


def _truth_channels(truth):
    # truth layout: depth, Phi, phi, k, mask
    return truth[..., 3], truth[..., 4] > 0.5


def cnn1_samples(manifest: DatasetManifest, split: str, cameras=(0, 1)) -> list:
    """``(image, M/D target, mask)`` per record and camera; every pixel supervised."""
    out = []
    for rec in manifest.split(split):
        data = manifest.load_record(rec)
        for c in cameras:
            img = data["stacks"][c][0]
            out.append((img[..., None], data["labels"][c], np.ones(img.shape, dtype=bool)))
    return out


def reference_inputs(manifest: DatasetManifest):
    """Reference fringes of cameras 1 and 2 and the reference order map."""
    ref = manifest.load_record(manifest.reference)
    k_ref, mask = _truth_channels(ref["truth"][0])
    return ref["stacks"][0][0], ref["stacks"][1][0], np.where(mask, k_ref, 0.0)


def cnn2_samples(manifest: DatasetManifest, split: str, K: int) -> list:
    """``(5-channel input, k/K target, camera-1 truth mask)`` per record."""
    r1, r2, k_ref = reference_inputs(manifest)
    out = []
    for rec in manifest.split(split):
        data = manifest.load_record(rec)
        k, mask = _truth_channels(data["truth"][0])
        x = cnn2_input(data["stacks"][0][0], data["stacks"][1][0], r1, r2, k_ref, K)
        out.append((x, (np.where(mask, k, 0.0) / K)[..., None], mask))
    return out


def evaluate_loss(params, spec: ModelSpec, samples) -> float:
    """Pooled masked MSE over ``samples`` (no gradient)."""
    dt = np.dtype(spec.dtype)
    total, n = 0.0, 0
    for x, t, m in samples:
        y = forward(params, spec, x)
        d = np.where(m[..., None], y - t.astype(dt), 0)
        total += float(np.sum(d.astype(np.float64) ** 2))
        n += int(m.sum()) * spec.output_channels
    return total / n if n else float("nan")


def _crop(sample, size, rng):
    x, t, m = sample
    ch, cw = size
    h, w = m.shape
    if ch >= h and cw >= w:
        return sample
    i = int(rng.integers(0, h - ch + 1))
    j = int(rng.integers(0, w - cw + 1))
    return x[i : i + ch, j : j + cw], t[i : i + ch, j : j + cw], m[i : i + ch, j : j + cw]


@dataclass
class TrainResult:
    params: dict  # best-validation parameters
    final_params: dict
    curve: list  # (epoch, train_loss, val_loss); epoch 0 is the initial evaluation
    best_epoch: int


def train(spec: ModelSpec, train_samples, val_samples, epochs: int, seed: int = 0,
          lr: float = 1e-3, crop: tuple[int, int] | None = None, params: dict | None = None,
          lr_final: float | None = None, out_dir=None, name: str = "model",
          log=None) -> TrainResult:
    """Adam training with batch size one and seeded shuffling.

    With ``lr_final`` the step size follows a cosine from ``lr`` at the first
    epoch down to ``lr_final`` at the last one; otherwise it stays at ``lr``.

    The train loss of an epoch is the mean loss of its updates; the val loss
    is evaluated after the epoch.  The parameters with the lowest validation
    loss (end-of-epoch train loss if there is no validation set) are kept.  With
    ``out_dir`` the best weights and the loss curve CSV are written there.
    """
    train_samples = list(train_samples)
    val_samples = list(val_samples)
    if not train_samples:
        raise ValueError("empty training set")
    params = build_model(spec, stage_seed(seed, "init")) if params is None else params
    state = AdamState.init(params, lr=lr)
    rng = np.random.default_rng(stage_seed(seed, "shuffle"))
    tr0 = evaluate_loss(params, spec, train_samples)
    va0 = evaluate_loss(params, spec, val_samples) if val_samples else float("nan")
    curve = [(0, tr0, va0)]
    best, best_epoch = (va0 if val_samples else tr0), 0
    best_params = params
    for epoch in range(1, epochs + 1):
        if lr_final is not None and epochs > 1:
            c = 0.5 * (1 + np.cos(np.pi * (epoch - 1) / (epochs - 1)))
            state = replace(state, lr=float(lr_final + (lr - lr_final) * c))
        losses = []
        for i in rng.permutation(len(train_samples)):
            sample = train_samples[i]
            if crop is not None:
                sample = _crop(sample, crop, rng)
            if not np.any(sample[2]):
                continue
            loss, grads = loss_and_grad(params, spec, [sample])
            params, state = adam_step(params, grads, state)
            losses.append(loss)
        tr = float(np.mean(losses)) if losses else float("nan")
        va = evaluate_loss(params, spec, val_samples) if val_samples else float("nan")
        if not np.isfinite(tr) or (val_samples and not np.isfinite(va)):
            raise FloatingPointError("diverged")
        curve.append((epoch, tr, va))
        # the epoch's train loss was measured before each update, so without a
        # validation set the end-of-epoch parameters are scored afresh
        score = va if val_samples else evaluate_loss(params, spec, train_samples)
        if score < best:
            best, best_epoch, best_params = score, epoch, params
        if log is not None:
            log(f"{name} epoch {epoch}: train {tr:.6g} val {va:.6g}")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {"epoch": best_epoch, "seed": seed, "lr": lr, "lr_final": lr_final}
        save_weights(out / f"{name}.fpnn", spec, best_params, meta)
        write_loss_csv(out / f"{name}_loss.csv", curve)
    return TrainResult(best_params, params, curve, best_epoch)


def train_from_manifest(task: str, manifest: DatasetManifest, epochs: int, seed: int = 0,
                        spec: ModelSpec | None = None, **kw) -> TrainResult:
    """Train CNN1 (``task="cnn1"``) or CNN2 (``task="cnn2"``) on a generated dataset."""
    if task == "cnn1":
        spec = spec or CNN1_SPEC
        tr, va = cnn1_samples(manifest, "train"), cnn1_samples(manifest, "val")
    elif task == "cnn2":
        spec = spec or CNN2_SPEC
        from ..simulator import load_dataset_rig

        K = load_dataset_rig(manifest).periods
        tr, va = cnn2_samples(manifest, "train", K), cnn2_samples(manifest, "val", K)
    else:
        raise ValueError(f"unknown task {task!r}")
    return train(spec, tr, va, epochs, seed, name=kw.pop("name", task), **kw)


def infer_cnn1(params, spec: ModelSpec, image) -> tuple[np.ndarray, np.ndarray]:
    """Predicted numerator and denominator maps for one normalised fringe image."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    y = forward(params, spec, image).astype(np.float64)
    return y[..., 0], y[..., 1]


def infer_cnn2(params, spec: ModelSpec, stack, K: int, mask=None) -> OrderMap:
    """Order map ``k = clip(round(output * K), 0, K-1)``.

    The confidence is the distance of ``output * K`` from the chosen integer.
    """
    y = forward(params, spec, stack)[..., 0].astype(np.float64) * K
    k = np.clip(np.round(y), 0, K - 1).astype(int)
    m = np.ones(k.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return OrderMap(np.where(m, k, -1), np.abs(y - k), m)
