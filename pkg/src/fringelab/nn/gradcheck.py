"""Central-difference verification of the layer kernels (double precision).

Each check draws a random small case, forms the scalar ``L = sum(r * f(x))``
for a random projection ``r`` and compares the analytic gradient of ``L``
with central differences.  The error is the relative norm
``|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)``.
"""

from __future__ import annotations

import numpy as np

from . import layers as L
from .model import ModelSpec, backward, build_model, forward

STEP = 1e-6


def numeric_grad(f, x, h: float = STEP):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def _away_from_zero(rng, shape, gap=1e-3):
    x = rng.uniform(-1, 1, shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap * 2, x)


def check_conv(rng) -> float:
    h, w = rng.integers(1, 6, 2)
    cin, cout = rng.integers(1, 4, 2)
    x = rng.standard_normal((h, w, cin))
    wt = rng.standard_normal((3, 3, cin, cout))
    b = rng.standard_normal(cout)
    r = rng.standard_normal((h, w, cout))
    y, cache = L.conv_forward(x, wt, b)
    dx, dw, db = L.conv_backward(r, cache)

    def f():
        return float(np.sum(r * L.conv_forward(x, wt, b)[0]))

    errs = [rel_error(dx, numeric_grad(f, x)), rel_error(dw, numeric_grad(f, wt)),
            rel_error(db, numeric_grad(f, b))]
    return max(errs)


def check_relu(rng) -> float:
    x = _away_from_zero(rng, (4, 5, 3))
    r = rng.standard_normal(x.shape)
    _, cache = L.relu_forward(x)
    return rel_error(L.relu_backward(r, cache), numeric_grad(lambda: float(np.sum(r * L.relu_forward(x)[0])), x))


def check_maxpool(rng) -> float:
    f = int(rng.choice([2, 4]))
    hb, wb, c = rng.integers(1, 3, 3)
    # well-separated values so no window has a near tie
    x = rng.permutation(hb * f * wb * f * c).astype(np.float64).reshape(hb * f, wb * f, c) * 0.01
    x += rng.uniform(0, 1e-3, x.shape)
    r = rng.standard_normal((hb, wb, c))
    _, cache = L.maxpool_forward(x, f)
    return rel_error(L.maxpool_backward(r, cache),
                     numeric_grad(lambda: float(np.sum(r * L.maxpool_forward(x, f)[0])), x))


def check_upsample(rng) -> float:
    f = int(rng.choice([2, 4, 8]))
    x = rng.standard_normal((*rng.integers(1, 4, 2), 2))
    r = rng.standard_normal((x.shape[0] * f, x.shape[1] * f, 2))
    _, cache = L.upsample_forward(x, f)
    return rel_error(L.upsample_backward(r, cache),
                     numeric_grad(lambda: float(np.sum(r * L.upsample_forward(x, f)[0])), x))


def check_residual(rng) -> float:
    """Residual block ``x + relu(conv2(relu(conv1(x))))``."""
    c = int(rng.integers(1, 4))
    x = rng.standard_normal((3, 4, c))
    w1, w2 = rng.standard_normal((2, 3, 3, c, c)) * 0.5
    b1, b2 = rng.standard_normal((2, c)) * 0.1
    r = rng.standard_normal(x.shape)

    def fwd():
        a, c1 = L.conv_forward(x, w1, b1)
        a, r1 = L.relu_forward(a)
        a, c2 = L.conv_forward(a, w2, b2)
        a, r2 = L.relu_forward(a)
        y, _ = L.add_forward(x, a)
        return y, (c1, r1, c2, r2)

    _, (c1, r1, c2, r2) = fwd()
    d_skip, d_branch = L.add_backward(r, None)
    d_branch = L.relu_backward(d_branch, r2)
    d_branch, dw2, _ = L.conv_backward(d_branch, c2)
    d_branch = L.relu_backward(d_branch, r1)
    d_branch, dw1, _ = L.conv_backward(d_branch, c1)
    dx = d_skip + d_branch

    def f():
        return float(np.sum(r * fwd()[0]))

    return max(rel_error(dx, numeric_grad(f, x)), rel_error(dw1, numeric_grad(f, w1)),
               rel_error(dw2, numeric_grad(f, w2)))


def check_concat(rng) -> float:
    xs = [rng.standard_normal((3, 2, int(c))) for c in rng.integers(1, 4, 3)]
    y, cache = L.concat_forward(xs)
    r = rng.standard_normal(y.shape)
    grads = L.concat_backward(r, cache)
    errs = []
    for i, x in enumerate(xs):
        errs.append(rel_error(grads[i], numeric_grad(lambda: float(np.sum(r * L.concat_forward(xs)[0])), x)))
    return max(errs)


def check_mse(rng) -> float:
    y = rng.standard_normal((4, 3, 2))
    t = rng.standard_normal(y.shape)
    mask = rng.uniform(size=(4, 3)) < 0.7
    mask[0, 0] = True
    _, cache = L.mse_forward(y, t, mask)
    return rel_error(L.mse_backward(cache), numeric_grad(lambda: L.mse_forward(y, t, mask)[0], y))


def check_model(rng) -> float:
    """Whole four-path network, a handful of coordinates per tensor."""
    spec = ModelSpec(2, 1, filters=2, blocks=1, dtype="float64")
    params = build_model(spec, int(rng.integers(1 << 31)), init="he")
    for k in params:
        if k.endswith(".b"):
            params[k] = rng.uniform(0.05, 0.2, params[k].shape)
    x = rng.uniform(0, 1, (8, 8, 2))
    r = rng.standard_normal((8, 8, 1))
    y, cache = forward(params, spec, x, return_cache=True)
    grads, _ = backward(r, spec, cache, params=params)
    worst = 0.0
    for name, p in params.items():
        idx = [np.unravel_index(i, p.shape) for i in rng.choice(p.size, min(3, p.size), replace=False)]
        for j in idx:
            old = p[j]
            p[j] = old + STEP
            fp = float(np.sum(r * forward(params, spec, x)))
            p[j] = old - STEP
            fm = float(np.sum(r * forward(params, spec, x)))
            p[j] = old
            num = (fp - fm) / (2 * STEP)
            worst = max(worst, abs(num - grads[name][j]) / max(abs(num), abs(grads[name][j]), 1e-8))
    return worst


CHECKS = {
    "conv": check_conv,
    "relu": check_relu,
    "maxpool": check_maxpool,
    "upsample": check_upsample,
    "residual": check_residual,
    "concat": check_concat,
    "mse": check_mse,
}


def gradient_suite(cases: int = 50, seed: int = 0) -> dict:
    """Worst relative error per layer type over ``cases`` random cases."""
    out = {}
    for name, check in CHECKS.items():
        rng = np.random.default_rng([seed, len(name), sum(map(ord, name))])
        out[name] = max(check(rng) for _ in range(cases))
    return out
