"""Named synthetic acquisitions used by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import replace

from .data import Dataset
from .phantom import (
    GroundTruth,
    PhantomSpec,
    make_ground_truth,
    make_spec_trajectory,
    noise_sigma_for_snr,
    simulate_kspace,
)

PRESETS = {
    # 64^2, 40 frames of 12 spokes, 4 coils, 4 px breathing, period 10 frames
    "desk": dict(spec=PhantomSpec(64, 40, 12, 64, 4, 10.0, 4.0), snr_db=30.0),
    "small": dict(spec=PhantomSpec(32, 24, 8, 32, 2, 8.0, 2.0), snr_db=30.0),
    "tiny": dict(spec=PhantomSpec(16, 4, 4, 16, 1, 4.0, 1.0), snr_db=40.0),
}


def simulate(spec: PhantomSpec, snr_db: float | None = None, ordering="golden_angle"):
    """Ground truth plus dataset; ``snr_db`` overrides ``spec.noise_sigma``."""
    gt = make_ground_truth(spec)
    traj = make_spec_trajectory(spec, ordering)
    if snr_db is not None:
        spec = replace(spec, noise_sigma=noise_sigma_for_snr(gt, traj, snr_db))
    frames = simulate_kspace(spec, gt, traj)
    return spec, gt, Dataset(frames, gt.coil_maps, spec.spokes_per_frame, spec.samples_per_spoke)


def preset(name: str, seed: int = 0) -> tuple[PhantomSpec, GroundTruth, Dataset]:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    return simulate(replace(p["spec"], seed=seed), p["snr_db"])
