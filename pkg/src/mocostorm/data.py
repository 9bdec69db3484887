"""In-memory k-t dataset shared by the reconstruction and baseline pipelines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nudft import SpokeFrame, radial_positions


@dataclass
class Dataset:
    frames: list[SpokeFrame]
    coil_maps: np.ndarray          # (C, H, W) complex
    spokes_per_frame: int
    samples_per_spoke: int

    def __post_init__(self):
        self.coil_maps = np.asarray(self.coil_maps, dtype=np.complex128)
        if self.coil_maps.ndim != 3:
            raise ValueError(f"coil_maps must be (C, H, W), got {self.coil_maps.shape}")
        if not self.frames:
            raise ValueError("dataset has no frames")
        for fr in self.frames:
            if fr.samples is None:
                raise ValueError(f"frame {fr.frame_index} carries no samples")
            if fr.num_points == 0:
                raise ValueError(f"frame {fr.frame_index} has no spokes")
            if fr.samples.shape[0] != self.num_coils:
                raise ValueError(
                    f"frame {fr.frame_index} has {fr.samples.shape[0]} coils, maps have {self.num_coils}"
                )

    @property
    def shape(self) -> tuple[int, int]:
        return self.coil_maps.shape[1:]

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def num_coils(self) -> int:
        return self.coil_maps.shape[0]

    def spokes(self):
        """Yield ``(coords, samples)`` per spoke in acquisition order."""
        n = self.samples_per_spoke
        for fr in self.frames:
            for s in range(fr.num_points // n):
                sl = slice(s * n, (s + 1) * n)
                yield fr.coords[sl], fr.samples[:, sl]

    @property
    def total_spokes(self) -> int:
        return sum(fr.num_points // self.samples_per_spoke for fr in self.frames)


def restrict_central(dataset: Dataset, fraction: float = 0.5) -> Dataset:
    """Low-resolution problem from the central k-space samples.

    Keeps samples with ``|k| <= fraction / 2`` (cycles/pixel of the full grid),
    rescales their coordinates by ``1 / fraction`` so they are expressed on the
    coarse grid, and subsamples the coil maps onto that grid. Samples are
    divided by the pixel-area ratio so the coarse image keeps the intensity
    scale of the full-resolution one.
    """
    step = int(round(1 / fraction))
    if step < 1 or abs(step * fraction - 1) > 1e-12:
        raise ValueError(f"fraction must be 1/integer, got {fraction}")
    H, W = dataset.shape
    if H % step or W % step:
        raise ValueError(f"grid {dataset.shape} not divisible by {step}")
    cutoff = fraction / 2
    frames = []
    for fr in dataset.frames:
        keep = np.hypot(fr.coords[:, 0], fr.coords[:, 1]) <= cutoff + 1e-12
        coords = np.clip(fr.coords[keep] * step, -0.5, 0.5)
        frames.append(SpokeFrame(coords, fr.samples[:, keep] / step ** 2, fr.frame_index))
    # coarse pixel i' sits at the same position as fine pixel step * i'
    maps = dataset.coil_maps[:, ::step, ::step]
    per_spoke = int(np.sum(np.abs(radial_positions(dataset.samples_per_spoke)) <= cutoff + 1e-12))
    return Dataset(frames, maps, dataset.spokes_per_frame, per_spoke)
