"""Scoring a reconstruction against simulated ground truth.

The template recovered by a motion-compensated fit lives in an arbitrary
reference frame: any deformation can be moved between the template and the
motion fields without changing the fit. Before scoring, the estimate is
re-expressed in the reference frame of the ground truth (the frame where the
true motion vanishes): with estimated fields ``phi_t`` and reference frame
``ref``, the motion relative to ``ref`` solves

    psi_t(x) = phi_t(x) - phi_ref(x - psi_t(x))

and the template becomes ``D(f, phi_ref)``. :func:`rereference` does this by
fixed-point iteration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .phantom import lung_mask
from .warp import warp_forward

log = logging.getLogger(__name__)

PSNR_CAP = 99.0


@dataclass
class Estimate:
    template: np.ndarray     # (H, W) complex
    motion: np.ndarray       # (M, 2, H, W)
    latent: np.ndarray       # (M, d)
    runtime: float = float("nan")


@dataclass
class Metrics:
    psnr_template: float
    motion_epe: float
    latent_corr: float
    period_error: float
    runtime: float

    def to_dict(self) -> dict:
        return asdict(self)


def _unit_max(img):
    mag = np.abs(img)
    peak = mag.max()
    return mag / peak if peak > 0 else mag


def psnr(a: np.ndarray, b: np.ndarray, max_shift: int = 4, mask=None) -> float:
    """PSNR of magnitudes after unit-max normalization and translation search.

    The best integer circular shift of ``b`` within ``+-max_shift`` pixels is
    used, which keeps the measure symmetric in its arguments.
    """
    a, b = _unit_max(a), _unit_max(b)
    best = math.inf
    for di in range(-max_shift, max_shift + 1):
        for dj in range(-max_shift, max_shift + 1):
            d = a - np.roll(b, (di, dj), axis=(0, 1))
            mse = float(np.mean(d[mask] ** 2) if mask is not None else np.mean(d ** 2))
            best = min(best, mse)
    if best <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return min(PSNR_CAP, -10 * math.log10(best))


def endpoint_error(est: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> float:
    """Mean Euclidean distance between ``(2, H, W)`` fields over ``mask``."""
    d = np.sqrt(((np.asarray(est) - np.asarray(truth)) ** 2).sum(axis=0))
    return float(d[mask].mean())


def leading_component(Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        return Z
    if Z.shape[1] == 1:
        return Z[:, 0]
    Zc = Z - Z.mean(axis=0)
    _, _, vt = np.linalg.svd(Zc, full_matrices=False)
    return Zc @ vt[0]


def latent_correlation(Z: np.ndarray, signal: np.ndarray) -> float:
    """Pearson correlation, sign-aligned (absolute value).

    Returns 0.0 when either series is constant, where correlation is undefined.
    """
    z = leading_component(Z)
    s = np.asarray(signal, dtype=np.float64)
    zc, sc = z - z.mean(), s - s.mean()
    denom = np.linalg.norm(zc) * np.linalg.norm(sc)
    if denom == 0 or not np.isfinite(denom):
        log.warning("latent correlation undefined for a constant series; reporting 0")
        return 0.0
    return float(min(1.0, abs(zc @ sc) / denom))


def dominant_period(series: np.ndarray, pad: int = 16) -> float:
    """Period (in samples) of the strongest non-DC spectral peak."""
    x = np.asarray(series, dtype=np.float64)
    x = x - x.mean()
    n = len(x) * pad
    spec = np.abs(np.fft.rfft(x, n))
    freqs = np.fft.rfftfreq(n)
    # ignore the leakage skirt of DC
    spec[freqs < 1.0 / len(x)] = 0.0
    k = int(np.argmax(spec))
    if spec[k] == 0:
        return math.inf
    return 1.0 / freqs[k]


def rereference(template, motion, ref: int, iters: int = 50):
    """Express ``(template, motion)`` relative to frame ``ref``.

    Returns ``(template_ref, motion_ref)`` with ``motion_ref[ref] == 0``.
    """
    motion = np.asarray(motion, dtype=np.float64)
    phi_ref = motion[ref]
    template_ref = warp_forward(template, phi_ref)
    out = np.empty_like(motion)
    for t in range(motion.shape[0]):
        psi = motion[t] - phi_ref
        for _ in range(iters):
            pulled = np.stack([warp_forward(phi_ref[c], psi) for c in range(2)])
            new = motion[t] - pulled
            if np.max(np.abs(new - psi)) < 1e-10:
                psi = new
                break
            psi = new
        out[t] = psi
    out[ref] = 0.0
    return template_ref, out


def compute_metrics(estimate: Estimate, truth, mask=None) -> Metrics:
    """Compare an estimate with a :class:`GroundTruth`.

    ``mask`` defaults to the phantom's lung region for the truth's grid.
    """
    if truth is None or truth.template is None or truth.motion is None or truth.respiratory_signal is None:
        raise ValueError("ground-truth sections (template, motion, respiratory signal) are required")
    resp = np.asarray(truth.respiratory_signal)
    ref = int(np.argmin(resp))
    peak = int(np.argmax(resp))
    if mask is None:
        mask = lung_mask(truth.template.shape[0])
    template, motion = rereference(estimate.template, estimate.motion, ref)
    truth_motion = truth.motion - truth.motion[ref] if np.any(truth.motion[ref]) else truth.motion
    z = leading_component(estimate.latent)
    p_est, p_true = dominant_period(z), dominant_period(resp)
    return Metrics(
        psnr_template=psnr(template, truth.template),
        motion_epe=endpoint_error(motion[peak], truth_motion[peak], mask),
        latent_corr=latent_correlation(estimate.latent, resp),
        period_error=abs(p_est - p_true) / p_true if math.isfinite(p_est) else math.inf,
        runtime=float(estimate.runtime),
    )


def phase_truth_frame(spoke_indices, truth, spokes_per_frame: int) -> int:
    """Ground-truth frame whose breathing amplitude is closest to the bin's mean."""
    resp = np.asarray(truth.respiratory_signal)
    frames = np.asarray(spoke_indices) // spokes_per_frame
    target = resp[frames].mean()
    return int(np.argmin(np.abs(resp - target)))


def best_phase_psnr(phases, spoke_bins, truth, spokes_per_frame: int):
    """Best PSNR of any phase image against its matching true frame.

    Returns ``(psnr, phase_index, frame_index)``.
    """
    best = (-math.inf, -1, -1)
    for k, (img, spokes) in enumerate(zip(phases, spoke_bins)):
        t = phase_truth_frame(spokes, truth, spokes_per_frame)
        frame = warp_forward(truth.template, truth.motion[t])
        best = max(best, (psnr(img, frame), k, t))
    return best
