"""Exact non-uniform DFT on radial trajectories.

Conventions used throughout the package:

* images are ``(H, W)`` complex arrays, axis 0 is ``y`` (superior-inferior),
  axis 1 is ``x``;
* the spatial origin is the pixel ``(H // 2, W // 2)``, so pixel ``(i, j)``
  sits at ``y = i - H // 2``, ``x = j - W // 2``;
* k-space coordinates are ``(kx, ky)`` pairs in cycles/pixel, ``|k| <= 0.5``.

The forward model for coil ``c`` is ``sum_x s_c(x) f(x) exp(-2i pi k.x)``. The
exponential is separable in ``x`` and ``y``, which keeps the exact sum at
``O(P * H * W)`` per coil without storing a ``P x HW`` matrix.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

GOLDEN_RATIO_CONJUGATE = (math.sqrt(5.0) - 1.0) / 2.0


class Ordering(str, enum.Enum):
    BIT_REVERSED = "bit_reversed"
    GOLDEN_ANGLE = "golden_angle"
    UNIFORM = "uniform"


@dataclass
class SpokeFrame:
    """One time frame: radial sample locations and multicoil samples.

    ``coords`` has shape ``(P, 2)`` holding ``(kx, ky)``; ``samples`` has shape
    ``(num_coils, P)``. A frame holding only geometry has ``samples=None``.
    """

    coords: np.ndarray
    samples: np.ndarray | None = None
    frame_index: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError(f"coords must have shape (P, 2), got {self.coords.shape}")
        if np.any(np.abs(self.coords) > 0.5 + 1e-12):
            raise ValueError("k-space coordinates must satisfy |kx|, |ky| <= 0.5")
        if self.samples is not None:
            self.samples = np.asarray(self.samples, dtype=np.complex128)
            if self.samples.ndim != 2 or self.samples.shape[1] != self.coords.shape[0]:
                raise ValueError(
                    f"samples shape {self.samples.shape} does not match "
                    f"{self.coords.shape[0]} coordinates"
                )

    @property
    def num_points(self) -> int:
        return self.coords.shape[0]


@dataclass
class Trajectory:
    frames: list[SpokeFrame]
    ordering: Ordering
    total_spokes: int
    samples_per_spoke: int
    spokes_per_frame: int
    angles: np.ndarray = field(repr=False, default=None)

    @property
    def num_frames(self) -> int:
        return len(self.frames)


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def bit_reversed_order(n: int) -> np.ndarray:
    """Bit-reversal permutation of ``0..n-1``; ``n`` must be a power of two."""
    n = int(n)
    if not _is_power_of_two(n):
        raise ValueError(f"bit-reversed ordering needs a power of two, got {n}")
    nbits = n.bit_length() - 1
    idx = np.arange(n)
    out = np.zeros(n, dtype=np.int64)
    for b in range(nbits):
        out |= ((idx >> b) & 1) << (nbits - 1 - b)
    return out


def spoke_angles(total_spokes: int, ordering: Ordering | str) -> np.ndarray:
    ordering = Ordering(ordering)
    i = np.arange(total_spokes)
    if ordering is Ordering.BIT_REVERSED:
        return np.pi * bit_reversed_order(total_spokes) / total_spokes
    if ordering is Ordering.GOLDEN_ANGLE:
        return np.mod(i * np.pi * GOLDEN_RATIO_CONJUGATE, np.pi)
    return np.pi * i / total_spokes


def radial_positions(samples_per_spoke: int) -> np.ndarray:
    """Signed radii of one spoke: ``(j - n // 2) / n``, which always contains 0."""
    n = int(samples_per_spoke)
    return (np.arange(n) - n // 2) / n


def make_trajectory(
    total_spokes: int,
    samples_per_spoke: int,
    spokes_per_frame: int,
    ordering: Ordering | str = Ordering.BIT_REVERSED,
) -> Trajectory:
    """Radial trajectory chunked into frames in acquisition order."""
    ordering = Ordering(ordering)
    if total_spokes < 1 or spokes_per_frame < 1 or samples_per_spoke < 1:
        raise ValueError("spoke and sample counts must be positive")
    if total_spokes % spokes_per_frame:
        raise ValueError(
            f"total_spokes={total_spokes} is not divisible by spokes_per_frame={spokes_per_frame}"
        )
    if ordering is Ordering.BIT_REVERSED and not _is_power_of_two(total_spokes):
        raise ValueError(f"bit-reversed ordering needs total_spokes a power of two, got {total_spokes}")

    angles = spoke_angles(total_spokes, ordering)
    radii = radial_positions(samples_per_spoke)
    # (spoke, sample, [kx, ky])
    pts = np.stack(
        [radii[None, :] * np.cos(angles)[:, None], radii[None, :] * np.sin(angles)[:, None]],
        axis=-1,
    )
    frames = []
    for t in range(total_spokes // spokes_per_frame):
        chunk = pts[t * spokes_per_frame:(t + 1) * spokes_per_frame].reshape(-1, 2)
        frames.append(SpokeFrame(coords=chunk, frame_index=t))
    return Trajectory(
        frames=frames,
        ordering=ordering,
        total_spokes=total_spokes,
        samples_per_spoke=samples_per_spoke,
        spokes_per_frame=spokes_per_frame,
        angles=angles,
    )


def _phase_factors(coords: np.ndarray, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    H, W = shape
    coords = np.asarray(coords, dtype=np.float64)
    y = np.arange(H) - H // 2
    x = np.arange(W) - W // 2
    ey = np.exp(-2j * np.pi * np.outer(coords[:, 1], y))
    ex = np.exp(-2j * np.pi * np.outer(coords[:, 0], x))
    return ey, ex


class NUDFT:
    """Forward/adjoint pair for one fixed coordinate set and coil stack.

    Precomputes the separable phase factors, so repeated applications (the
    reconstruction loop) only pay for the matrix products.
    """

    def __init__(self, coords: np.ndarray, coil_maps: np.ndarray):
        coil_maps = np.asarray(coil_maps, dtype=np.complex128)
        if coil_maps.ndim == 2:
            coil_maps = coil_maps[None]
        if coil_maps.ndim != 3:
            raise ValueError(f"coil_maps must have shape (C, H, W), got {coil_maps.shape}")
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coords must have shape (P, 2), got {coords.shape}")
        self.coil_maps = coil_maps
        self.coords = coords
        self.shape = coil_maps.shape[1:]
        self._ey, self._ex = _phase_factors(coords, self.shape)
        self._ey_h = np.ascontiguousarray(self._ey.conj().T)
        self._ex_c = self._ex.conj()

    @property
    def num_coils(self) -> int:
        return self.coil_maps.shape[0]

    @property
    def num_points(self) -> int:
        return self.coords.shape[0]

    def forward(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image)
        if image.shape != self.shape:
            raise ValueError(f"image shape {image.shape} does not match coil maps {self.shape}")
        weighted = self.coil_maps * image           # (C, H, W)
        rows = np.matmul(self._ey, weighted)        # (C, P, W)
        return np.einsum("cpw,pw->cp", rows, self._ex)

    def adjoint(self, samples: np.ndarray) -> np.ndarray:
        samples = np.asarray(samples)
        if samples.shape != (self.num_coils, self.num_points):
            raise ValueError(
                f"samples shape {samples.shape} != ({self.num_coils}, {self.num_points})"
            )
        spread = samples[:, :, None] * self._ex_c   # (C, P, W)
        coil_images = np.matmul(self._ey_h, spread)  # (C, H, W)
        return np.einsum("chw,chw->hw", self.coil_maps.conj(), coil_images)

    def normal(self, image: np.ndarray) -> np.ndarray:
        return self.adjoint(self.forward(image))


def nudft_forward(image: np.ndarray, coil_maps, coords: np.ndarray) -> np.ndarray:
    """Multicoil type-2 NUDFT; returns samples of shape ``(num_coils, P)``."""
    return NUDFT(coords, np.asarray(coil_maps)).forward(image)


def nudft_adjoint(samples: np.ndarray, coil_maps, coords: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`nudft_forward`."""
    return NUDFT(coords, np.asarray(coil_maps)).adjoint(samples)


def operator_norm_sq(op: NUDFT, iters: int = 30, seed: int = 0) -> float:
    """Power-iteration estimate of ``||A||^2``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.shape) + 1j * rng.standard_normal(op.shape)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = op.normal(x)
        lam = float(np.linalg.norm(y))
        if lam == 0.0:
            return 0.0
        x = y / lam
    return lam
