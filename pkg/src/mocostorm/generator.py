"""Motion generator: latent vector -> coarse displacement field.

Two fixed architectures, both with hand-written reverse mode:

``conv`` (default), for a coarse grid of ``g`` pixels per axis (``g % 8 == 0``)::

    dense     d -> 32*(g/8)^2, tanh, reshape to (32, g/8, g/8)
    3 x [ nearest x2 upsample -> conv3x3 -> tanh ]   channels 32->32->16->8
    conv3x3   8 -> 2                                   (no nonlinearity)

``mlp``::

    dense d -> 64, tanh, dense 64 -> 64, tanh, dense 64 -> 2*g*g

Parameters live in one flat vector; :class:`Layer` records where each layer's
weights and bias sit inside it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ARCHITECTURES = ("conv", "mlp")
CONV_STAGES = ((32, 32), (32, 16), (16, 8))


@dataclass(frozen=True)
class Layer:
    kind: str                 # dense | conv3x3 | tanh | upsample2 | reshape
    in_shape: tuple
    out_shape: tuple
    offset: int = 0
    weight_shape: tuple = ()
    bias_shape: tuple = ()

    @property
    def num_params(self) -> int:
        return int(np.prod(self.weight_shape, dtype=np.int64) + np.prod(self.bias_shape, dtype=np.int64)) \
            if self.weight_shape else 0

    @property
    def fan_in(self) -> int:
        if self.kind == "dense":
            return self.weight_shape[1]
        if self.kind == "conv3x3":
            return self.weight_shape[1] * 9
        return 0


def build_layout(latent_dim: int, grid: int, arch: str = "conv") -> list[Layer]:
    if latent_dim < 1:
        raise ValueError("latent dimension must be >= 1")
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown generator architecture {arch!r}")
    specs: list[tuple] = []
    if arch == "conv":
        if grid % 8 or grid < 8:
            raise ValueError(f"conv generator needs a coarse grid divisible by 8, got {grid}")
        s = grid // 8
        c0 = CONV_STAGES[0][0]
        specs.append(("dense", (latent_dim,), (c0 * s * s,)))
        specs.append(("tanh", (c0 * s * s,), (c0 * s * s,)))
        specs.append(("reshape", (c0 * s * s,), (c0, s, s)))
        for cin, cout in CONV_STAGES:
            specs.append(("upsample2", (cin, s, s), (cin, 2 * s, 2 * s)))
            s *= 2
            specs.append(("conv3x3", (cin, s, s), (cout, s, s)))
            specs.append(("tanh", (cout, s, s), (cout, s, s)))
        specs.append(("conv3x3", (CONV_STAGES[-1][1], s, s), (2, s, s)))
    else:
        specs.append(("dense", (latent_dim,), (64,)))
        specs.append(("tanh", (64,), (64,)))
        specs.append(("dense", (64,), (64,)))
        specs.append(("tanh", (64,), (64,)))
        specs.append(("dense", (64,), (2 * grid * grid,)))
        specs.append(("reshape", (2 * grid * grid,), (2, grid, grid)))

    layout = []
    offset = 0
    for kind, ins, outs in specs:
        if kind == "dense":
            wshape, bshape = (outs[0], ins[0]), (outs[0],)
        elif kind == "conv3x3":
            wshape, bshape = (outs[0], ins[0], 3, 3), (outs[0],)
        else:
            wshape, bshape = (), ()
        layer = Layer(kind, ins, outs, offset, wshape, bshape)
        offset += layer.num_params
        layout.append(layer)
    return layout


@dataclass
class GeneratorParams:
    theta: np.ndarray
    latent_dim: int
    grid: int
    arch: str = "conv"
    layout: list[Layer] = field(default=None, repr=False)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.layout is None:
            self.layout = build_layout(self.latent_dim, self.grid, self.arch)
        n = num_params(self.layout)
        if self.theta.shape != (n,):
            raise ValueError(f"theta has shape {self.theta.shape}, layout needs ({n},)")

    def weights(self, layer: Layer, theta: np.ndarray | None = None):
        theta = self.theta if theta is None else theta
        nw = int(np.prod(layer.weight_shape))
        nb = int(np.prod(layer.bias_shape))
        w = theta[layer.offset:layer.offset + nw].reshape(layer.weight_shape)
        b = theta[layer.offset + nw:layer.offset + nw + nb]
        return w, b

    def with_theta(self, theta: np.ndarray) -> "GeneratorParams":
        return GeneratorParams(theta, self.latent_dim, self.grid, self.arch, self.layout)


def num_params(layout: list[Layer]) -> int:
    return sum(layer.num_params for layer in layout)


def init_params(
    seed: int,
    scale: float = 1.0,
    latent_dim: int = 1,
    grid: int = 16,
    arch: str = "conv",
) -> GeneratorParams:
    """Uniform weights in ``+-scale/sqrt(fan_in)``, zero biases."""
    if not scale > 0:
        raise ValueError("init scale must be positive")
    layout = build_layout(latent_dim, grid, arch)
    theta = np.zeros(num_params(layout))
    rng = np.random.default_rng(seed)
    for layer in layout:
        if not layer.weight_shape:
            continue
        nw = int(np.prod(layer.weight_shape))
        bound = scale / np.sqrt(layer.fan_in)
        theta[layer.offset:layer.offset + nw] = rng.uniform(-bound, bound, nw)
    return GeneratorParams(theta, latent_dim, grid, arch, layout)


# -- layer kernels ----------------------------------------------------------

def _conv_cols(x):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(xp, (3, 3), axis=(2, 3))     # (B, C, S, S, 3, 3)


def conv3x3_forward(x, w, b):
    """Zero-padded 'same' cross-correlation; ``x`` is ``(B, Cin, S, S)``."""
    cols = _conv_cols(x)
    y = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))   # (B, S, S, Cout)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)) + b[None, :, None, None]


def conv3x3_backward(x, w, dy):
    cols = _conv_cols(x)
    dw = np.tensordot(dy, cols, axes=([0, 2, 3], [0, 2, 3]))   # (Cout, Cin, 3, 3)
    db = dy.sum(axis=(0, 2, 3))
    S1, S2 = x.shape[2:]
    dxp = np.zeros(x.shape[:2] + (S1 + 2, S2 + 2))
    for k in range(3):
        for l in range(3):
            dxp[:, :, k:k + S1, l:l + S2] += np.einsum("bohw,oc->bchw", dy, w[:, :, k, l])
    return dxp[:, :, 1:-1, 1:-1], dw, db


def upsample2_forward(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(dy):
    B, C, S1, S2 = dy.shape
    return dy.reshape(B, C, S1 // 2, 2, S2 // 2, 2).sum(axis=(3, 5))


def _run(params: GeneratorParams, z: np.ndarray):
    x = z
    cache = []
    for layer in params.layout:
        cache.append(x)
        if layer.kind == "dense":
            w, b = params.weights(layer)
            x = x @ w.T + b
        elif layer.kind == "conv3x3":
            w, b = params.weights(layer)
            x = conv3x3_forward(x, w, b)
        elif layer.kind == "tanh":
            x = np.tanh(x)
        elif layer.kind == "upsample2":
            x = upsample2_forward(x)
        elif layer.kind == "reshape":
            x = x.reshape((x.shape[0],) + layer.out_shape)
    return x, cache


def _as_batch(params: GeneratorParams, z):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None] if single else z
    if zb.ndim != 2 or zb.shape[1] != params.latent_dim:
        raise ValueError(f"latent has shape {z.shape}, generator expects length {params.latent_dim}")
    return zb, single


def generator_forward(params: GeneratorParams, z: np.ndarray) -> np.ndarray:
    """Motion field(s) on the coarse grid.

    ``z`` of shape ``(d,)`` gives ``(2, g, g)``; ``(B, d)`` gives ``(B, 2, g, g)``.
    """
    zb, single = _as_batch(params, z)
    out, _ = _run(params, zb)
    return out[0] if single else out


def generator_backward(params: GeneratorParams, z: np.ndarray, upstream: np.ndarray):
    """Reverse-mode gradients of ``<upstream, G(z)>``.

    Returns ``(grad_theta, grad_z)``; ``grad_theta`` is summed over the batch.
    """
    zb, single = _as_batch(params, z)
    out, cache = _run(params, zb)
    dy = np.asarray(upstream, dtype=np.float64)
    if single:
        dy = dy[None]
    if dy.shape != out.shape:
        raise ValueError(f"upstream shape {np.shape(upstream)} does not match output {out.shape[int(single):]}")

    grad = np.zeros_like(params.theta)
    for layer, x in zip(reversed(params.layout), reversed(cache)):
        if layer.kind == "dense":
            w, _ = params.weights(layer)
            gw, gb = params.weights(layer, grad)
            gw += dy.T @ x
            gb += dy.sum(axis=0)
            dy = dy @ w
        elif layer.kind == "conv3x3":
            w, _ = params.weights(layer)
            gw, gb = params.weights(layer, grad)
            dy, dw, db = conv3x3_backward(x, w, dy)
            gw += dw
            gb += db
        elif layer.kind == "tanh":
            dy = dy * (1.0 - np.tanh(x) ** 2)
        elif layer.kind == "upsample2":
            dy = upsample2_backward(dy)
        elif layer.kind == "reshape":
            dy = dy.reshape(x.shape)
    grad_z = dy[0] if single else dy
    return grad, grad_z
