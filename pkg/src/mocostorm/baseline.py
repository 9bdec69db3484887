"""Motion-resolved baseline: self-gating, amplitude binning, TV recon per bin."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter1d

from .data import Dataset
from .metrics import dominant_period
from .nudft import NUDFT, operator_norm_sq

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class GatingSignal:
    values: np.ndarray
    filter_cutoff: float          # cycles/spoke of the moving-average window
    coils_used: tuple = ()
    window: int = 1


@dataclass
class PhaseBin:
    phase_index: int
    spoke_indices: np.ndarray
    recon: np.ndarray | None = None


@dataclass
class BaselineConfig:
    num_phases: int = 4
    mu: float = 1000.0
    tv_eps: float = 1e-6
    max_iter: int = 300
    tol: float = 1e-7
    step: float | None = None      # None: 1 / Lipschitz bound of the objective
    divergence_window: int = 20
    extra: dict = field(default_factory=dict)


def _centre_samples(dataset: Dataset) -> np.ndarray:
    """Magnitude of the centremost sample of every spoke, shape ``(C, S)``."""
    tol = 1.0 / dataset.samples_per_spoke
    out = []
    for coords, samples in dataset.spokes():
        r = np.hypot(coords[:, 0], coords[:, 1])
        k = int(np.argmin(r))
        if r[k] > tol:
            raise ValueError(f"spoke has no sample within {tol:g} cycles/pixel of k=0")
        out.append(np.abs(samples[:, k]))
    return np.array(out).T


def _zscore(x):
    # a constant series can show a rounding-level spread; treat it as flat
    sd = x.std()
    flat = sd <= 1e-12 * np.abs(x).max() or sd == 0
    return np.zeros_like(x) if flat else (x - x.mean()) / sd


def _largest_positive_group(corr: np.ndarray) -> tuple:
    n = corr.shape[0]
    if n > 12:
        # greedy fallback for large arrays
        group = [int(np.argmax(corr.sum(axis=1)))]
        for c in np.argsort(-corr.sum(axis=1)):
            if c not in group and all(corr[c, g] > 0 for g in group):
                group.append(int(c))
        return tuple(sorted(group))
    for size in range(n, 0, -1):
        for group in itertools.combinations(range(n), size):
            if all(corr[a, b] > 0 for a, b in itertools.combinations(group, 2)):
                return group
    return (0,)


def extract_gating(dataset: Dataset) -> GatingSignal:
    """Respiratory signal per spoke from the k-space centre of every coil."""
    series = np.array([_zscore(s) for s in _centre_samples(dataset)])
    live = [c for c in range(len(series)) if np.any(series[c])]
    if not live:
        return GatingSignal(np.zeros(series.shape[1]), 0.0, (), 1)

    corr = np.corrcoef(series[live]) if len(live) > 1 else np.ones((1, 1))
    ref = int(np.argmax(np.abs(corr).sum(axis=1)))
    signs = np.where(corr[ref] < 0, -1.0, 1.0)
    aligned = series[live] * signs[:, None]
    corr = corr * np.outer(signs, signs)
    group = _largest_positive_group(corr)
    combined = aligned[list(group)].mean(axis=0)

    period = dominant_period(combined)
    window = max(1, int(round(period / 8))) if np.isfinite(period) else 1
    window += 1 - window % 2           # odd window keeps the filter zero-phase
    values = uniform_filter1d(combined, window, mode="reflect")
    return GatingSignal(values, 1.0 / window, tuple(live[g] for g in group), window)


def bin_spokes(g: GatingSignal, num_phases: int) -> list[PhaseBin]:
    """Equal-count amplitude bins; ties are broken by spoke index."""
    values = np.asarray(g.values if isinstance(g, GatingSignal) else g)
    if num_phases < 2:
        raise ValueError("need at least two phases")
    if num_phases > len(values):
        raise ValueError(f"{num_phases} phases for only {len(values)} spokes")
    order = np.argsort(values, kind="stable")
    return [PhaseBin(p, np.sort(idx)) for p, idx in enumerate(np.array_split(order, num_phases))]


def gather_spokes(dataset: Dataset, spoke_indices) -> tuple[np.ndarray, np.ndarray]:
    spokes = list(dataset.spokes())
    coords = np.concatenate([spokes[i][0] for i in spoke_indices])
    samples = np.concatenate([spokes[i][1] for i in spoke_indices], axis=1)
    return coords, samples


def _grad2(x):
    gy = np.zeros_like(x)
    gx = np.zeros_like(x)
    gy[:-1] = x[1:] - x[:-1]
    gx[:, :-1] = x[:, 1:] - x[:, :-1]
    return gy, gx


def _grad2_adjoint(gy, gx):
    out = np.zeros_like(gy)
    out[:-1] -= gy[:-1]
    out[1:] += gy[:-1]
    out[:, :-1] -= gx[:, :-1]
    out[:, 1:] += gx[:, :-1]
    return out


def total_variation(x: np.ndarray, eps: float = 0.0) -> float:
    """Isotropic TV, smoothed as ``sum sqrt(|grad x|^2 + eps)``."""
    gy, gx = _grad2(x)
    return float(np.sum(np.sqrt(np.abs(gy) ** 2 + np.abs(gx) ** 2 + eps)))


def tv_gradient(x: np.ndarray, eps: float) -> np.ndarray:
    gy, gx = _grad2(x)
    norm = np.sqrt(np.abs(gy) ** 2 + np.abs(gx) ** 2 + eps)
    return _grad2_adjoint(gy / norm, gx / norm)


def ramp_initializer(op: NUDFT, samples: np.ndarray) -> np.ndarray:
    """Density-compensated adjoint, scaled to best fit the data."""
    ramp = np.hypot(op.coords[:, 0], op.coords[:, 1])
    ramp = np.maximum(ramp, 0.25 / op.shape[0])
    x0 = op.adjoint(samples * ramp)
    ax = op.forward(x0)
    denom = np.vdot(ax, ax).real
    return x0 * (np.vdot(ax, samples) / denom) if denom > 0 else x0


def solve_tv(op: NUDFT, samples: np.ndarray, config: BaselineConfig, x0=None):
    """Gradient descent on ``||Ax - b||^2 + mu * TV_eps(x)``.

    Returns ``(x, objective_history)``.
    """
    mu, eps = config.mu, config.tv_eps
    x = ramp_initializer(op, samples) if x0 is None else np.array(x0, dtype=np.complex128)
    if not np.any(samples):
        return np.zeros(op.shape, dtype=np.complex128), [0.0]
    step = config.step
    if step is None:
        lip = 2 * operator_norm_sq(op) + (mu * 8 / np.sqrt(eps) if mu > 0 else 0.0)
        step = 1.0 / lip

    def objective(x):
        r = op.forward(x) - samples
        return float(np.vdot(r, r).real) + (mu * total_variation(x, eps) if mu > 0 else 0.0), r

    obj, r = objective(x)
    history = [obj]
    rises = 0
    for _ in range(config.max_iter):
        grad = 2 * op.adjoint(r)
        if mu > 0:
            grad += mu * tv_gradient(x, eps)
        x = x - step * grad
        obj, r = objective(x)
        rises = rises + 1 if obj > history[-1] else 0
        history.append(obj)
        if rises >= config.divergence_window:
            raise DivergenceError(f"objective increased for {rises} consecutive iterations")
        if abs(history[-2] - obj) <= config.tol * max(abs(history[-2]), 1e-300):
            break
    return x, history


def recon_phase(bin: PhaseBin, dataset: Dataset, config: BaselineConfig) -> np.ndarray:
    if len(bin.spoke_indices) == 0:
        raise ValueError(f"phase {bin.phase_index} has no spokes")
    coords, samples = gather_spokes(dataset, bin.spoke_indices)
    op = NUDFT(coords, dataset.coil_maps)
    x, _ = solve_tv(op, samples, config)
    bin.recon = x
    return x


def xdgrasp(dataset: Dataset, config: BaselineConfig | None = None):
    """Full pipeline; returns ``(gating, bins)`` with ``bin.recon`` filled."""
    config = config or BaselineConfig()
    gating = extract_gating(dataset)
    bins = bin_spokes(gating, config.num_phases)
    for b in bins:
        recon_phase(b, dataset, config)
    return gating, bins
