"""Joint estimation of template, generator weights and latent trajectory.

The cost for a batch of frames is::

    sum_t ||A_t D(f, U G(z_t)) - b_t||^2 + lambda * (|batch| / M) * sum_t ||z_{t+1} - z_t||^2

with ``A_t`` the multicoil NUDFT of frame ``t``, ``D`` the bilinear warp,
``U`` the motion upsampler and ``G`` the generator. Gradients are assembled
by chaining the adjoints of each stage; all variables are updated jointly by
Adam.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, restrict_central
from .generator import GeneratorParams, generator_backward, generator_forward, init_params
from .nudft import NUDFT
from .warp import (
    upsample_motion,
    upsample_motion_adjoint,
    warp_adjoint_image,
    warp_forward,
    warp_grad_motion,
)

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, frame, message=None):
        self.frame = frame
        super().__init__(message or f"non-finite loss at frame {frame}")


@dataclass
class ReconConfig:
    lambda_smooth: float = 1.0
    lr_f: float = 1e-1
    lr_theta: float = 1e-3
    lr_z: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs_coarse: int = 40
    epochs_fine: int = 100
    coarse_fraction: float = 0.5
    batch_frames: int = 8
    seed: int = 0
    latent_dim: int = 1
    arch: str = "conv"
    motion_grid_factor: int = 4
    init_scale: float = 1.0

    def validate(self) -> "ReconConfig":
        problems = []
        for name in ("lr_f", "lr_theta", "lr_z"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            problems.append("beta1, beta2 must lie in (0, 1)")
        if self.eps <= 0:
            problems.append("eps must be > 0")
        if self.lambda_smooth < 0:
            problems.append("lambda_smooth must be >= 0")
        if self.epochs_coarse < 0 or self.epochs_fine < 1:
            problems.append("need epochs_coarse >= 0 and epochs_fine >= 1")
        if not 0 < self.coarse_fraction <= 1:
            problems.append("coarse_fraction must lie in (0, 1]")
        if self.batch_frames < 1:
            problems.append("batch_frames must be >= 1")
        if problems:
            raise ValueError("invalid ReconConfig: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, x):
        x = _real_view(x)
        return cls(np.zeros_like(x), np.zeros_like(x), 0)


@dataclass
class ReconState:
    f: np.ndarray
    gen: GeneratorParams
    Z: np.ndarray
    moments: dict = field(default_factory=dict)
    stage: int = 2
    epoch: int = 0
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=np.complex128)
        self.Z = np.asarray(self.Z, dtype=np.float64)
        for name, var in (("f", self.f), ("theta", self.gen.theta), ("Z", self.Z)):
            self.moments.setdefault(name, AdamMoments.zeros_like(var))

    @property
    def theta(self) -> np.ndarray:
        return self.gen.theta

    def copy(self) -> "ReconState":
        return ReconState(
            self.f.copy(),
            self.gen.with_theta(self.gen.theta.copy()),
            self.Z.copy(),
            {k: AdamMoments(m.m.copy(), m.v.copy(), m.step) for k, m in self.moments.items()},
            self.stage,
            self.epoch,
            [tuple(x) for x in self.loss_history],
        )


def _real_view(x: np.ndarray) -> np.ndarray:
    return x.view(np.float64) if np.iscomplexobj(x) else x


def motion_grid_size(shape, factor: int = 4) -> int:
    g = shape[0] // factor
    if shape[0] != shape[1] or g < 1:
        raise ValueError(f"need a square grid divisible by {factor}, got {shape}")
    return g


def init_state(shape, num_frames: int, config: ReconConfig, grid: int | None = None) -> ReconState:
    """Zero template, zero latents, random generator weights."""
    g = grid if grid is not None else motion_grid_size(shape, config.motion_grid_factor)
    gen = init_params(config.seed, config.init_scale, config.latent_dim, g, config.arch)
    return ReconState(
        f=np.zeros(shape, dtype=np.complex128),
        gen=gen,
        Z=np.zeros((num_frames, config.latent_dim)),
    )


class Problem:
    """Dataset with per-frame NUDFT operators prepared for repeated use."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.shape = dataset.shape
        self.ops = [NUDFT(fr.coords, dataset.coil_maps) for fr in dataset.frames]
        self.data = [fr.samples for fr in dataset.frames]

    @property
    def num_frames(self) -> int:
        return len(self.ops)


def frame_motion(state: ReconState, t: int, shape) -> np.ndarray:
    return upsample_motion(generator_forward(state.gen, state.Z[t]), shape)


def frame_forward(state: ReconState, t: int, frame, coil_maps=None):
    """Residual, deformed image and motion field of frame ``t``.

    ``frame`` is a :class:`SpokeFrame` (with ``coil_maps``) or a prepared
    :class:`NUDFT` paired with its samples as ``(op, samples)``.
    """
    if isinstance(frame, tuple):
        op, samples = frame
    else:
        op, samples = NUDFT(frame.coords, coil_maps), frame.samples
    if state.f.shape != op.shape:
        raise ValueError(f"template shape {state.f.shape} does not match data grid {op.shape}")
    phi = frame_motion(state, t, op.shape)
    ft = warp_forward(state.f, phi)
    return op.forward(ft) - samples, ft, phi


def smoothness(Z: np.ndarray) -> tuple[float, np.ndarray]:
    """``sum_t ||z_{t+1} - z_t||^2`` and its gradient."""
    d = np.diff(Z, axis=0)
    grad = np.zeros_like(Z)
    grad[:-1] -= 2 * d
    grad[1:] += 2 * d
    return float(np.sum(d * d)), grad


def loss_and_gradients(state: ReconState, batch, problem: Problem, lambda_smooth: float):
    """Batch cost and its gradients ``(loss, grad_f, grad_theta, grad_Z)``.

    ``grad_f`` is complex and packs ``dL/dRe f + 1j * dL/dIm f``.
    """
    batch = [int(t) for t in batch]
    if not batch:
        raise ValueError("empty frame batch")
    f = state.f
    shape = problem.shape
    g = state.gen.grid
    zb = state.Z[batch]
    coarse = generator_forward(state.gen, zb)
    grad_f = np.zeros_like(f)
    grad_coarse = np.empty_like(coarse)
    loss = 0.0
    for b, t in enumerate(batch):
        phi = upsample_motion(coarse[b], shape)
        ft = warp_forward(f, phi)
        op = problem.ops[t]
        r = op.forward(ft) - problem.data[t]
        frame_loss = float(np.vdot(r, r).real)
        if not math.isfinite(frame_loss):
            raise NonFiniteLossError(t)
        loss += frame_loss
        g_ft = 2.0 * op.adjoint(r)
        grad_f += warp_adjoint_image(g_ft, phi)
        grad_coarse[b] = upsample_motion_adjoint(warp_grad_motion(g_ft, f, phi), (g, g))
    grad_theta, grad_zb = generator_backward(state.gen, zb, grad_coarse)
    grad_Z = np.zeros_like(state.Z)
    grad_Z[batch] += grad_zb

    weight = lambda_smooth * len(batch) / state.Z.shape[0]
    if weight > 0:
        s, gs = smoothness(state.Z)
        loss += weight * s
        grad_Z += weight * gs
    return loss, grad_f, grad_theta, grad_Z


def full_loss(state: ReconState, problem: Problem, lambda_smooth: float) -> float:
    """Cost over all frames (data term plus full smoothness term)."""
    total = 0.0
    for t in range(problem.num_frames):
        r, _, _ = frame_forward(state, t, (problem.ops[t], problem.data[t]))
        total += float(np.vdot(r, r).real)
    return total + lambda_smooth * smoothness(state.Z)[0]


def adam_update(x, grad, mom: AdamMoments, lr, beta1, beta2, eps):
    """In-place Adam step on ``x`` (complex arrays act on their real view)."""
    xr, gr = _real_view(x), _real_view(np.asarray(grad, dtype=x.dtype))
    mom.step += 1
    mom.m *= beta1
    mom.m += (1 - beta1) * gr
    mom.v *= beta2
    mom.v += (1 - beta2) * gr * gr
    mhat = mom.m / (1 - beta1 ** mom.step)
    vhat = mom.v / (1 - beta2 ** mom.step)
    xr -= lr * mhat / (np.sqrt(vhat) + eps)


def adam_step(state: ReconState, grads, config: ReconConfig) -> ReconState:
    grad_f, grad_theta, grad_Z = grads
    b1, b2, eps = config.beta1, config.beta2, config.eps
    adam_update(state.f, grad_f, state.moments["f"], config.lr_f, b1, b2, eps)
    adam_update(state.gen.theta, grad_theta, state.moments["theta"], config.lr_theta, b1, b2, eps)
    adam_update(state.Z, grad_Z, state.moments["Z"], config.lr_z, b1, b2, eps)
    return state


def epoch_batches(num_frames: int, config: ReconConfig, stage: int, epoch: int):
    rng = np.random.default_rng([config.seed, stage, epoch])
    order = rng.permutation(num_frames)
    nb = -(-num_frames // config.batch_frames)
    return np.array_split(order, nb)


def run_epoch(state: ReconState, problem: Problem, config: ReconConfig) -> float:
    total = 0.0
    for batch in epoch_batches(problem.num_frames, config, state.stage, state.epoch):
        loss, *grads = loss_and_gradients(state, batch, problem, config.lambda_smooth)
        adam_step(state, grads, config)
        total += loss
    state.epoch += 1
    state.loss_history.append((state.stage, total))
    return total


def _check_monotone(history, window=10):
    fine = [loss for stage, loss in history if stage == 2]
    if len(fine) > window and fine[-1] > fine[-1 - window]:
        log.warning(
            "stage-2 loss rose over the last %d epochs: %.6g -> %.6g",
            window, fine[-1 - window], fine[-1],
        )
        return False
    return True


def start_fine_stage(state: ReconState, shape) -> ReconState:
    """Carry generator and latents over; restart the template at full size."""
    state.f = np.zeros(shape, dtype=np.complex128)
    state.moments["f"] = AdamMoments.zeros_like(state.f)
    state.stage = 2
    state.epoch = 0
    return state


def progressive_solve(
    dataset: Dataset,
    config: ReconConfig,
    state: ReconState | None = None,
    callback=None,
    dump_path=None,
) -> ReconState:
    """Coarse-to-fine solve; resumes from ``state`` when one is given.

    Stage 1 runs on the central k-space samples at ``coarse_fraction`` of the
    grid; stage 2 inherits generator and latents, restarts the template at full
    resolution and uses all samples. ``callback(state)`` runs after every
    epoch (checkpointing hooks in here). If the loss turns non-finite and
    ``dump_path`` is given, the current state is written there as a
    checkpoint before the error propagates.
    """
    config.validate()
    H, W = dataset.shape
    if H & (H - 1) or W & (W - 1):
        raise ValueError(f"grid {dataset.shape} must be a power of two")
    g = motion_grid_size(dataset.shape, config.motion_grid_factor)
    M = dataset.num_frames

    if state is None:
        if config.epochs_coarse > 0:
            coarse_shape = (int(H * config.coarse_fraction), int(W * config.coarse_fraction))
            state = init_state(coarse_shape, M, config, grid=g)
            state.stage = 1
        else:
            state = init_state(dataset.shape, M, config, grid=g)
            state.stage = 2

    if state.stage == 1:
        problem = Problem(restrict_central(dataset, config.coarse_fraction))
        while state.epoch < config.epochs_coarse:
            _guarded_epoch(state, problem, config, dump_path)
            if callback:
                callback(state)
        start_fine_stage(state, dataset.shape)
        if callback:
            callback(state)

    problem = Problem(dataset)
    while state.epoch < config.epochs_fine:
        _guarded_epoch(state, problem, config, dump_path)
        _check_monotone(state.loss_history)
        if callback:
            callback(state)
    return state


def _guarded_epoch(state, problem, config, dump_path=None):
    try:
        return run_epoch(state, problem, config)
    except NonFiniteLossError as err:
        if dump_path is not None:
            from .io import save_checkpoint

            save_checkpoint(dump_path, state, config)
        raise NonFiniteLossError(
            err.frame,
            f"non-finite loss at frame {err.frame} (stage {state.stage}, epoch {state.epoch})",
        ) from err


def estimate_motion(state: ReconState, shape) -> np.ndarray:
    """Full-resolution motion fields for every frame, shape ``(M, 2, H, W)``."""
    coarse = generator_forward(state.gen, state.Z)
    return upsample_motion(coarse, shape)


def timed_solve(dataset, config, **kwargs):
    t0 = time.perf_counter()
    state = progressive_solve(dataset, config, **kwargs)
    return state, time.perf_counter() - t0
