"""Four-path residual CNN: specification, parameters, forward and backward passes.

Path ``p`` max-pools the input by ``factors[p]``, applies an input conv, a
stack of residual blocks and an output conv, and (for pooled paths) an
upsampling block (nearest resize + conv).  The four path outputs are
concatenated and mapped to the output channels by a final linear conv.
All convs are 3x3 / stride 1 / zero padding and ReLU-activated except the last.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import layers as L


@dataclass(frozen=True)
class ModelSpec:
    input_channels: int
    output_channels: int
    filters: int = 16
    blocks: int = 4
    factors: tuple[int, ...] = (1, 2, 4, 8)
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(int(f) for f in self.factors))
        if self.output_channels not in (1, 2):
            raise ValueError("output_channels must be 1 or 2")
        if self.input_channels < 1 or self.filters < 1 or self.blocks < 0:
            raise ValueError("invalid model size")

    def to_dict(self):
        d = asdict(self)
        d["factors"] = list(self.factors)
        return d

    @staticmethod
    def from_dict(d) -> ModelSpec:
        return ModelSpec(**{**d, "factors": tuple(d.get("factors", (1, 2, 4, 8)))})

    def check_input(self, x):
        if x.ndim != 3 or x.shape[-1] != self.input_channels:
            raise ValueError(f"expected (H, W, {self.input_channels}) input, got {x.shape}")
        f = max(self.factors)
        if x.shape[0] % f or x.shape[1] % f:
            raise ValueError(f"shape incompatible with path {len(self.factors)}")


def param_shapes(spec: ModelSpec) -> dict:
    """Ordered ``name -> shape`` for every tensor of the model."""
    C = spec.filters
    shapes = {}

    def conv(name, cin, cout):
        shapes[f"{name}.w"] = (3, 3, cin, cout)
        shapes[f"{name}.b"] = (cout,)

    for p, f in enumerate(spec.factors):
        conv(f"path{p}.conv_in", spec.input_channels, C)
        for j in range(spec.blocks):
            conv(f"path{p}.res{j}.conv1", C, C)
            conv(f"path{p}.res{j}.conv2", C, C)
        conv(f"path{p}.conv_out", C, C)
        if f > 1:
            conv(f"path{p}.up", C, C)
    conv("final", C * len(spec.factors), spec.output_channels)
    return shapes


def build_model(spec: ModelSpec, init_seed: int = 0, init: str = "residual") -> dict:
    """Fresh parameters with zero biases.

    ``init="he"`` draws every kernel He-normal.  ``init="residual"`` (the
    default) also draws He-normal but zeroes the second conv of each residual
    block, so every block starts as the identity, and scales the final linear
    conv by 0.1.  Without this the stacked blocks inflate the output variance
    and the first epochs are spent undoing the initialisation.
    ``init="zeros"`` zeroes everything.
    """
    if init not in ("he", "residual", "zeros"):
        raise ValueError(f"unknown init {init!r}")
    rng = np.random.default_rng(init_seed)
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".b") or init == "zeros":
            params[name] = np.zeros(shape, dtype=spec.dtype)
            continue
        fan_in = shape[0] * shape[1] * shape[2]
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        if init == "residual":
            if name.endswith(".conv2.w"):
                w = np.zeros(shape)
            elif name == "final.w":
                w = 0.1 * w
        params[name] = w.astype(spec.dtype)
    return params


def count_params(params: dict) -> int:
    return int(sum(v.size for v in params.values()))


def _conv_relu(params, name, x, cache):
    y, c = L.conv_forward(x, params[f"{name}.w"], params[f"{name}.b"])
    y, r = L.relu_forward(y)
    cache[name] = (c, r)
    return y


def _conv_relu_back(dy, name, cache, grads):
    c, r = cache[name]
    dy = L.relu_backward(dy, r)
    dx, dw, db = L.conv_backward(dy, c)
    grads[f"{name}.w"] += dw
    grads[f"{name}.b"] += db
    return dx


def forward(params: dict, spec: ModelSpec, x, return_cache: bool = False):
    """Network output ``(H, W, output_channels)`` for one ``(H, W, C0)`` input."""
    x = np.asarray(x, dtype=spec.dtype)
    spec.check_input(x)
    cache = {}
    outs = []
    for p, f in enumerate(spec.factors):
        h, cache[f"path{p}.pool"] = L.maxpool_forward(x, f)
        h = _conv_relu(params, f"path{p}.conv_in", h, cache)
        for j in range(spec.blocks):
            name = f"path{p}.res{j}"
            a = _conv_relu(params, f"{name}.conv1", h, cache)
            a = _conv_relu(params, f"{name}.conv2", a, cache)
            h, _ = L.add_forward(h, a)
        h = _conv_relu(params, f"path{p}.conv_out", h, cache)
        if f > 1:
            h, cache[f"path{p}.upsample"] = L.upsample_forward(h, f)
            h = _conv_relu(params, f"path{p}.up", h, cache)
        outs.append(h)
    cat, cache["concat"] = L.concat_forward(outs)
    y, cache["final"] = L.conv_forward(cat, params["final.w"], params["final.b"])
    if return_cache:
        return y, cache
    return y


def backward(dy, spec: ModelSpec, cache: dict, grads: dict | None = None, params: dict | None = None):
    """Accumulate parameter gradients for output gradient ``dy``; returns ``(grads, dx)``."""
    if grads is None:
        grads = {k: np.zeros_like(v) for k, v in params.items()}
    dcat, dw, db = L.conv_backward(dy, cache["final"])
    grads["final.w"] += dw
    grads["final.b"] += db
    douts = L.concat_backward(dcat, cache["concat"])
    dx = None
    for p in reversed(range(len(spec.factors))):
        f = spec.factors[p]
        dh = douts[p]
        if f > 1:
            dh = _conv_relu_back(dh, f"path{p}.up", cache, grads)
            dh = L.upsample_backward(dh, cache[f"path{p}.upsample"])
        dh = _conv_relu_back(dh, f"path{p}.conv_out", cache, grads)
        for j in reversed(range(spec.blocks)):
            name = f"path{p}.res{j}"
            d_skip, d_branch = L.add_backward(dh, None)
            d_branch = _conv_relu_back(d_branch, f"{name}.conv2", cache, grads)
            d_branch = _conv_relu_back(d_branch, f"{name}.conv1", cache, grads)
            dh = d_skip + d_branch
        dh = _conv_relu_back(dh, f"path{p}.conv_in", cache, grads)
        dh = L.maxpool_backward(dh, cache[f"path{p}.pool"])
        dx = dh if dx is None else dx + dh
    return grads, dx


def loss_and_grad(params: dict, spec: ModelSpec, batch) -> tuple[float, dict]:
    """Masked MSE over a batch of ``(input, target, mask)`` samples and its gradient.

    The loss is the mean over every supervised pixel and channel of the batch.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    dt = np.dtype(spec.dtype)
    total = sum(int(np.sum(m)) for _, _, m in batch) * spec.output_channels
    if total == 0:
        raise ValueError("no supervised pixels")
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    loss = 0.0
    for x, target, mask in batch:
        if not np.any(mask):
            continue
        y, cache = forward(params, spec, x, return_cache=True)
        sample_loss, mcache = L.mse_forward(y, np.asarray(target, dtype=dt), mask)
        n = mcache[1]
        loss += sample_loss * n / total
        dy = L.mse_backward(mcache, scale=n / total).astype(dt)
        backward(dy, spec, cache, grads)
    return float(loss), grads
