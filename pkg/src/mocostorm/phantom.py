"""Synthetic free-breathing acquisition with known ground truth.

Geometry is defined on normalized coordinates ``u = (j - N/2) / (N/2)``
(left-right) and ``v = (i - N/2) / (N/2)`` (superior-inferior, increasing
downwards), so every structure scales with the grid size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nudft
from .warp import warp_forward

TORSO = dict(cu=0.0, cv=0.0, au=0.86, av=0.78)
LUNGS = (
    dict(cu=-0.38, cv=-0.12, au=0.27, av=0.46),
    dict(cu=0.38, cv=-0.12, au=0.27, av=0.46),
)
DIAPHRAGM_LEVEL = 0.36        # v of the lung bases
TISSUE, LUNG, LIVER, VESSEL = 0.6, 0.1, 1.0, 0.9
EDGE_WIDTH = 2.0              # pixels
COIL_RADIUS = 1.25            # coil centres sit just outside the FOV


@dataclass(frozen=True)
class PhantomSpec:
    grid_size: int = 64
    num_frames: int = 40
    spokes_per_frame: int = 12
    samples_per_spoke: int = 64
    num_coils: int = 4
    breathing_period: float = 10.0
    breathing_amplitude: float = 4.0
    noise_sigma: float = 0.0
    seed: int = 0
    num_vessels: int = 6

    def validate(self) -> "PhantomSpec":
        n = self.grid_size
        problems = []
        if n < 8 or n & (n - 1):
            problems.append(f"grid_size={n} must be a power of two >= 8")
        if self.num_frames < 2:
            problems.append(f"num_frames={self.num_frames} must be >= 2")
        if self.spokes_per_frame < 1:
            problems.append("spokes_per_frame must be >= 1")
        if self.samples_per_spoke < 1:
            problems.append("samples_per_spoke must be >= 1")
        if self.num_coils < 1:
            problems.append("num_coils must be >= 1")
        if self.breathing_period <= 0:
            problems.append("breathing_period must be positive")
        if not 0 <= self.breathing_amplitude < n / 4:
            problems.append(f"breathing_amplitude must lie in [0, {n / 4})")
        if self.noise_sigma < 0:
            problems.append("noise_sigma must be >= 0")
        if self.num_vessels < 3:
            problems.append("num_vessels must be >= 3")
        if problems:
            raise ValueError("invalid PhantomSpec: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruth:
    template: np.ndarray            # (N, N) complex
    motion: np.ndarray              # (M, 2, N, N)
    respiratory_signal: np.ndarray  # (M,)
    coil_maps: np.ndarray           # (C, N, N) complex


def normalized_grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(n) - n // 2
    v, u = np.meshgrid(c / (n / 2), c / (n / 2), indexing="ij")
    return u, v


def _ellipse(u, v, cu, cv, au, av):
    return ((u - cu) / au) ** 2 + ((v - cv) / av) ** 2


def torso_mask(n: int) -> np.ndarray:
    u, v = normalized_grid(n)
    return _ellipse(u, v, **TORSO) <= 1.0


def lung_mask(n: int) -> np.ndarray:
    """Lung region of interest (both lungs, above the diaphragm)."""
    u, v = normalized_grid(n)
    inside = np.zeros((n, n), dtype=bool)
    for lung in LUNGS:
        inside |= _ellipse(u, v, **lung) <= 1.0
    return inside & (v < _dome(u)) & torso_mask(n)


def _dome(u):
    return DIAPHRAGM_LEVEL - 0.18 * np.cos(np.pi * np.clip(np.abs(u) - 0.38, -0.5, 0.5))


def _vessel_centres(spec: PhantomSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    n = spec.grid_size
    lungs = lung_mask(n)
    radius = max(1.5, n / 40)
    # keep vessels clear of lung borders so they stay inside while moving
    clear = lungs.copy()
    r = int(np.ceil(radius)) + 1
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            clear &= np.roll(lungs, (di, dj), axis=(0, 1))
    candidates = np.argwhere(clear)
    if len(candidates) < spec.num_vessels:
        candidates = np.argwhere(lungs)
    pick = rng.choice(len(candidates), size=spec.num_vessels, replace=False)
    return candidates[np.sort(pick)].astype(float), radius


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _soft_ellipse(u, v, n, cu, cv, au, av, width):
    """1 deep inside, 0 outside, C1 ramp over ``width`` pixels at the edge."""
    depth = (1.0 - np.sqrt(_ellipse(u, v, cu, cv, au, av))) * min(au, av) * n / 2
    return _smoothstep(depth / width)


def make_template(spec: PhantomSpec) -> np.ndarray:
    """Real nonnegative breathing phantom stored as a complex image.

    Edges are C1 ramps of ``EDGE_WIDTH`` pixels lying inside each structure,
    so the image is effectively band-limited and exactly zero off the torso.
    """
    spec.validate()
    n = spec.grid_size
    u, v = normalized_grid(n)
    w = EDGE_WIDTH
    torso = _soft_ellipse(u, v, n, width=w, **TORSO)
    # liver below the diaphragm dome, ramped across the dome
    liver = _smoothstep((v - _dome(u)) * n / 2 / w + 0.5)
    lungs = np.maximum.reduce([_soft_ellipse(u, v, n, width=w, **lung) for lung in LUNGS])
    lungs = lungs * _smoothstep((_dome(u) - v) * n / 2 / w + 0.5)
    img = TISSUE + (LIVER - TISSUE) * liver
    img = img + (LUNG - img) * lungs
    centres, radius = _vessel_centres(spec)
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    for ci, cj in centres:
        d = radius + 0.5 * w - np.hypot(ii - ci, jj - cj)
        img = img + (VESSEL - img) * _smoothstep(d / w)
    img = torso * img
    return (img / img.max()).astype(np.complex128)


def motion_basis(n: int) -> np.ndarray:
    """Unit-peak spatial displacement pattern of shape ``(2, n, n)``.

    Concentrated at the diaphragm, vanishing at the torso wall, mostly along
    the superior-inferior axis (component 0).
    """
    u, v = normalized_grid(n)
    rho2 = _ellipse(u, v, **TORSO)
    wall = np.clip(1.0 - rho2, 0.0, None) ** 2
    band = np.exp(-(((v - DIAPHRAGM_LEVEL) / 0.45) ** 2))
    si = band * wall
    lr = 0.15 * u * band * wall
    basis = np.stack([si, lr])
    return basis / np.sqrt((basis ** 2).sum(axis=0)).max()


def respiratory_waveform(spec: PhantomSpec, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return spec.breathing_amplitude * (1.0 - np.cos(2 * np.pi * t / spec.breathing_period)) / 2.0


def make_motion(spec: PhantomSpec, t: int) -> tuple[np.ndarray, float]:
    """Ground-truth motion field at frame ``t`` and the waveform value ``r(t)``."""
    spec.validate()
    if not 0 <= t < spec.num_frames:
        raise ValueError(f"frame index {t} outside [0, {spec.num_frames})")
    r = float(respiratory_waveform(spec, t))
    return r * motion_basis(spec.grid_size), r


def make_coil_maps(spec: PhantomSpec) -> np.ndarray:
    """Gaussian surface-coil sensitivities with linear phase, shape ``(C, N, N)``.

    Normalized so the root-sum-of-squares is 1 at the grid centre; the width is
    chosen so no map exceeds unit magnitude anywhere.
    """
    spec.validate()
    n, nc = spec.grid_size, spec.num_coils
    u, v = normalized_grid(n)
    if nc == 1:
        centres, width = [(0.0, 0.0)], 1.2
    else:
        angles = 2 * np.pi * np.arange(nc) / nc
        centres = [(COIL_RADIUS * np.cos(a), COIL_RADIUS * np.sin(a)) for a in angles]
        width = COIL_RADIUS / np.sqrt(np.log(nc))
    maps = []
    for k, (cu, cv) in enumerate(centres):
        mag = np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * width ** 2))
        phase = np.pi * 0.25 * (u * np.cos(k) + v * np.sin(k)) + 2 * np.pi * k / max(nc, 1)
        maps.append(mag * np.exp(1j * phase))
    maps = np.array(maps)
    c = n // 2
    return maps / np.sqrt((np.abs(maps[:, c, c]) ** 2).sum())


def make_ground_truth(spec: PhantomSpec) -> GroundTruth:
    spec.validate()
    motion = np.empty((spec.num_frames, 2, spec.grid_size, spec.grid_size))
    resp = np.empty(spec.num_frames)
    for t in range(spec.num_frames):
        motion[t], resp[t] = make_motion(spec, t)
    return GroundTruth(make_template(spec), motion, resp, make_coil_maps(spec))


def make_spec_trajectory(spec: PhantomSpec, ordering="golden_angle") -> nudft.Trajectory:
    total = spec.num_frames * spec.spokes_per_frame
    return nudft.make_trajectory(total, spec.samples_per_spoke, spec.spokes_per_frame, ordering)


def clean_frames(gt: GroundTruth, trajectory) -> list[np.ndarray]:
    """Noiseless multicoil samples per frame."""
    frames = trajectory.frames if hasattr(trajectory, "frames") else trajectory
    if len(frames) != gt.motion.shape[0]:
        raise ValueError(f"trajectory has {len(frames)} frames, ground truth has {gt.motion.shape[0]}")
    if gt.motion.shape[-2:] != gt.template.shape or gt.coil_maps.shape[-2:] != gt.template.shape:
        raise ValueError("template, motion and coil maps must share one grid")
    out = []
    for t, frame in enumerate(frames):
        ft = warp_forward(gt.template, gt.motion[t])
        out.append(nudft.nudft_forward(ft, gt.coil_maps, frame.coords))
    return out


def simulate_kspace(spec: PhantomSpec, gt: GroundTruth, trajectory) -> list[nudft.SpokeFrame]:
    """Warp, coil-weight, sample and add circular complex Gaussian noise.

    ``noise_sigma`` is the complex standard deviation (``E|n|^2 = sigma^2``).
    """
    spec.validate()
    frames = trajectory.frames if hasattr(trajectory, "frames") else trajectory
    if gt.template.shape != (spec.grid_size, spec.grid_size):
        raise ValueError(f"template shape {gt.template.shape} does not match grid_size {spec.grid_size}")
    clean = clean_frames(gt, frames)
    rng = np.random.default_rng([spec.seed, 1])
    out = []
    for t, (frame, y) in enumerate(zip(frames, clean)):
        if spec.noise_sigma > 0:
            noise = rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
            y = y + spec.noise_sigma / np.sqrt(2) * noise
        out.append(nudft.SpokeFrame(coords=frame.coords, samples=y, frame_index=t))
    return out


def noise_sigma_for_snr(gt: GroundTruth, trajectory, snr_db: float) -> float:
    """Complex noise std giving ``snr_db`` relative to the RMS clean sample."""
    clean = clean_frames(gt, trajectory)
    rms = np.sqrt(np.mean(np.concatenate([np.abs(y).ravel() ** 2 for y in clean])))
    return float(rms / 10 ** (snr_db / 20))
