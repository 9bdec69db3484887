"""Bilinear backward warping ``out(x) = f(x - phi(x))`` and its derivatives.

A motion field has shape ``(2, H, W)``: component 0 displaces along axis 0
(rows), component 1 along axis 1 (columns), both in pixels. Sample locations
falling outside the grid are clamped to the edge; the derivative with respect
to a clamped coordinate is zero.
"""

from __future__ import annotations

import numpy as np


class _Stencil:
    """Bilinear sampling stencil of a motion field (indices, weights, masks)."""

    def __init__(self, phi: np.ndarray):
        phi = np.asarray(phi, dtype=np.float64)
        if phi.ndim != 3 or phi.shape[0] != 2:
            raise ValueError(f"motion field must have shape (2, H, W), got {phi.shape}")
        if not np.all(np.isfinite(phi)):
            raise ValueError("motion field contains non-finite displacements")
        H, W = phi.shape[1:]
        if H < 2 or W < 2:
            raise ValueError("warping needs at least a 2x2 grid")
        ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        uy = ii - phi[0]
        ux = jj - phi[1]
        self.live_y = (uy >= 0) & (uy <= H - 1)
        self.live_x = (ux >= 0) & (ux <= W - 1)
        uy = np.clip(uy, 0, H - 1)
        ux = np.clip(ux, 0, W - 1)
        i0 = np.minimum(np.floor(uy).astype(np.int64), H - 2)
        j0 = np.minimum(np.floor(ux).astype(np.int64), W - 2)
        self.a = uy - i0
        self.b = ux - j0
        self.i0, self.j0 = i0, j0
        self.shape = (H, W)

    def corners(self, f):
        i0, j0 = self.i0, self.j0
        return f[i0, j0], f[i0, j0 + 1], f[i0 + 1, j0], f[i0 + 1, j0 + 1]


def _check_image(f, shape):
    f = np.asarray(f)
    if f.shape != shape:
        raise ValueError(f"image shape {f.shape} does not match motion field grid {shape}")
    return f


def warp_forward(f: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Deform ``f`` by ``phi`` with bilinear interpolation."""
    st = _Stencil(phi)
    f = _check_image(f, st.shape)
    f00, f01, f10, f11 = st.corners(f)
    a, b = st.a, st.b
    return (1 - a) * ((1 - b) * f00 + b * f01) + a * ((1 - b) * f10 + b * f11)


def warp_adjoint_image(g: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Transpose of ``f -> warp_forward(f, phi)`` applied to ``g``."""
    st = _Stencil(phi)
    g = _check_image(g, st.shape)
    H, W = st.shape
    a, b = st.a, st.b
    base = st.i0 * W + st.j0
    idx = np.concatenate([base, base + 1, base + W, base + W + 1], axis=None)
    w = np.concatenate([(1 - a) * (1 - b), (1 - a) * b, a * (1 - b), a * b], axis=None)
    gw = np.tile(g.ravel(), 4) * w
    if np.iscomplexobj(gw):
        out = np.bincount(idx, gw.real, H * W) + 1j * np.bincount(idx, gw.imag, H * W)
    else:
        out = np.bincount(idx, gw, H * W)
    return out.reshape(H, W)


def warp_grad_motion(g: np.ndarray, f: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Gradient of ``Re<g, warp_forward(f, phi)>`` with respect to ``phi``.

    Returns a real ``(2, H, W)`` array.
    """
    st = _Stencil(phi)
    g = _check_image(g, st.shape)
    f = _check_image(f, st.shape)
    f00, f01, f10, f11 = st.corners(f)
    a, b = st.a, st.b
    d_uy = (1 - b) * (f10 - f00) + b * (f11 - f01)
    d_ux = (1 - a) * (f01 - f00) + a * (f11 - f10)
    gc = np.conj(g)
    # u = x - phi, hence the minus sign
    grad = np.empty((2,) + st.shape)
    grad[0] = -np.real(gc * d_uy) * st.live_y
    grad[1] = -np.real(gc * d_ux) * st.live_x
    return grad


def _upsample_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Corner-aligned linear interpolation matrix of shape ``(n_out, n_in)``."""
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] += 1 - frac
    m[rows, lo + 1] += frac
    return m


def _upsample_operators(coarse_shape, target):
    h, w = coarse_shape
    H, W = target
    if H < h or W < w:
        raise ValueError(f"upsample_motion cannot downsample {coarse_shape} -> {tuple(target)}")
    return _upsample_matrix(H, h), _upsample_matrix(W, w), H / h


def upsample_motion(phi_coarse: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Resample a coarse motion field to ``target`` and rescale its values.

    Displacements are multiplied by ``H / h`` so that they are expressed in
    target-grid pixels.
    """
    phi_coarse = np.asarray(phi_coarse, dtype=np.float64)
    uy, ux, scale = _upsample_operators(phi_coarse.shape[-2:], target)
    return scale * np.einsum("Hh,...hw,Ww->...HW", uy, phi_coarse, ux)


def upsample_motion_adjoint(g_fine: np.ndarray, coarse_shape: tuple[int, int]) -> np.ndarray:
    g_fine = np.asarray(g_fine, dtype=np.float64)
    uy, ux, scale = _upsample_operators(coarse_shape, g_fine.shape[-2:])
    return scale * np.einsum("Hh,...HW,Ww->...hw", uy, g_fine, ux)
