"""Numerical self-checks: adjoint dot-product tests and gradient checks."""

from __future__ import annotations

import numpy as np

from .benchmark import preset
from .engine import Problem, ReconConfig, init_state, loss_and_gradients
from .nudft import NUDFT
from .warp import warp_adjoint_image, warp_forward


def _crandn(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def nudft_adjoint_errors(trials: int = 50, seed: int = 0) -> np.ndarray:
    """Relative dot-product mismatch of the NUDFT on random instances.

    Grids 8 to 32, 1 to 4 coils, 5 to 64 k-points.
    """
    rng = np.random.default_rng(seed)
    errs = np.empty(trials)
    for i in range(trials):
        n = int(rng.integers(8, 33))
        c = int(rng.integers(1, 5))
        p = int(rng.integers(5, 65))
        op = NUDFT(rng.uniform(-0.5, 0.5, (p, 2)), _crandn(rng, (c, n, n)))
        x, y = _crandn(rng, (n, n)), _crandn(rng, (c, p))
        ax = op.forward(x)
        errs[i] = abs(np.vdot(y, ax) - np.vdot(op.adjoint(y), x)) / (np.linalg.norm(ax) * np.linalg.norm(y))
    return errs


def warp_adjoint_errors(trials: int = 50, seed: int = 0) -> np.ndarray:
    """Relative dot-product mismatch of the warp for random fields up to 4 px."""
    rng = np.random.default_rng(seed)
    errs = np.empty(trials)
    for i in range(trials):
        n = int(rng.integers(8, 33))
        phi = rng.uniform(-4, 4, (2, n, n))
        x, y = _crandn(rng, (n, n)), _crandn(rng, (n, n))
        wx = warp_forward(x, phi)
        errs[i] = abs(np.vdot(y, wx) - np.vdot(warp_adjoint_image(y, phi), x)) / (
            np.linalg.norm(wx) * np.linalg.norm(y))
    return errs


def random_state(dataset, config: ReconConfig, seed: int = 0):
    """Generic point for gradient checks: nonzero template, weights and latents."""
    rng = np.random.default_rng(seed)
    state = init_state(dataset.shape, dataset.num_frames, config)
    state.f = _crandn(rng, dataset.shape)
    theta = state.gen.theta + 0.1 * rng.standard_normal(state.gen.theta.shape)
    state.gen = state.gen.with_theta(theta)
    state.Z = rng.standard_normal(state.Z.shape)
    return state


def gradient_errors(directions: int = 10, seed: int = 0, h: float = 1e-6, lambda_smooth: float = 1.0):
    """Relative error of directional derivatives against central differences.

    Uses the 16x16, 4-frame preset. Each direction perturbs ``f``, the
    generator weights and the latents at once.
    """
    _, _, dataset = preset("tiny", seed)
    # 16 px grid: a factor of 2 gives the 8x8 coarse motion grid the conv generator needs
    config = ReconConfig(lambda_smooth=lambda_smooth, seed=seed, motion_grid_factor=2)
    problem = Problem(dataset)
    state = random_state(dataset, config, seed)
    batch = list(range(dataset.num_frames))
    _, gf, gth, gz = loss_and_gradients(state, batch, problem, lambda_smooth)
    rng = np.random.default_rng([seed, 99])

    def loss_at(df, dth, dz, s):
        st = state.copy()
        st.f = state.f + s * df
        st.gen = state.gen.with_theta(state.gen.theta + s * dth)
        st.Z = state.Z + s * dz
        return loss_and_gradients(st, batch, problem, lambda_smooth)[0]

    errs = np.empty(directions)
    for i in range(directions):
        df = _crandn(rng, gf.shape)
        dth = rng.standard_normal(gth.shape)
        dz = rng.standard_normal(gz.shape)
        analytic = np.vdot(gf, df).real + gth @ dth + np.sum(gz * dz)
        fd = (loss_at(df, dth, dz, h) - loss_at(df, dth, dz, -h)) / (2 * h)
        errs[i] = abs(analytic - fd) / max(abs(fd), abs(analytic), 1e-300)
    return errs
