import logging
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import map_coordinates

from mocostorm.benchmark import simulate
from mocostorm.checks import gradient_errors, random_state
from mocostorm.data import Dataset, restrict_central
from mocostorm.engine import (
    AdamMoments,
    NonFiniteLossError,
    Problem,
    ReconConfig,
    _check_monotone,
    adam_step,
    adam_update,
    frame_forward,
    full_loss,
    init_state,
    loss_and_gradients,
    progressive_solve,
    run_epoch,
    smoothness,
)
from mocostorm.generator import generator_forward
from mocostorm.nudft import SpokeFrame, make_trajectory
from mocostorm.phantom import PhantomSpec, make_ground_truth
from mocostorm.warp import upsample_motion

TINY = PhantomSpec(grid_size=16, num_frames=4, spokes_per_frame=4, samples_per_spoke=16,
                   num_coils=1, breathing_period=4.0, breathing_amplitude=1.0)
CFG16 = ReconConfig(motion_grid_factor=2)


@pytest.fixture(scope="module")
def tiny():
    spec, gt, ds = simulate(TINY)          # noiseless
    return gt, ds


def zero_motion_state(f, ds, config=CFG16):
    state = init_state(ds.shape, ds.num_frames, config)
    state.f = np.array(f, dtype=complex)
    state.gen = state.gen.with_theta(np.zeros_like(state.gen.theta))
    return state


# -- frame model --------------------------------------------------------------

def test_exact_model_gives_zero_residual(tiny):
    gt, ds = tiny
    assert gt.respiratory_signal[0] == 0
    state = zero_motion_state(gt.template, ds)
    r, ft, phi = frame_forward(state, 0, ds.frames[0], ds.coil_maps)
    assert not phi.any()
    assert np.array_equal(ft, state.f)
    assert np.linalg.norm(r) <= 1e-12 * np.linalg.norm(ds.frames[0].samples)


def test_zero_template_gives_negated_data(tiny):
    _, ds = tiny
    state = random_state(ds, CFG16)
    state.f[:] = 0
    for t in range(ds.num_frames):
        r, _, _ = frame_forward(state, t, ds.frames[t], ds.coil_maps)
        assert np.array_equal(r, -ds.frames[t].samples)


def test_residual_matches_composed_oracles(tiny):
    """Generator -> upsample -> scipy bilinear warp -> dense DFT matrix."""
    _, ds = tiny
    state = random_state(ds, CFG16, seed=3)
    t = 2
    frame = ds.frames[t]
    r, _, _ = frame_forward(state, t, frame, ds.coil_maps)

    phi = upsample_motion(generator_forward(state.gen, state.Z[t]), ds.shape)
    n = ds.shape[0]
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    src = [ii - phi[0], jj - phi[1]]
    warped = (map_coordinates(state.f.real, src, order=1, mode="nearest")
              + 1j * map_coordinates(state.f.imag, src, order=1, mode="nearest"))
    y, x = (ii - n // 2).ravel(), (jj - n // 2).ravel()
    kx, ky = frame.coords.T
    E = np.exp(-2j * np.pi * (np.outer(kx, x) + np.outer(ky, y)))
    pred = np.stack([E @ (s * warped).ravel() for s in ds.coil_maps])
    ref = np.linalg.norm(pred - frame.samples) ** 2
    assert float(np.vdot(r, r).real) == pytest.approx(ref, rel=1e-10)


def test_template_grid_mismatch_rejected(tiny):
    _, ds = tiny
    state = init_state((8, 8), ds.num_frames, CFG16, grid=8)
    with pytest.raises(ValueError):
        frame_forward(state, 0, ds.frames[0], ds.coil_maps)


# -- loss and gradients ---------------------------------------------------------

def test_zero_residual_gives_zero_gradients(tiny):
    gt, ds = tiny
    state = zero_motion_state(gt.template, ds)
    loss, gf, gth, gz = loss_and_gradients(state, [0], Problem(ds), 0.0)
    scale = np.linalg.norm(ds.frames[0].samples)
    assert loss <= 1e-20 * scale ** 2
    assert np.abs(gf).max() < 1e-9 and np.abs(gth).max() < 1e-9 and np.abs(gz).max() < 1e-9


def test_constant_latents_have_no_smoothness_cost():
    Z = np.tile([[0.7, -1.2]], (6, 1))
    s, g = smoothness(Z)
    assert s == 0 and not g.any()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-80, 80), min_size=2, max_size=12))
def test_smoothness_nonnegative_and_zero_only_when_constant(values):
    # eighths keep squared differences exact (no underflow)
    Z = np.array(values)[:, None] / 8.0
    s, _ = smoothness(Z)
    assert s >= 0
    assert (s == 0) == bool(np.all(Z == Z[0]))


def test_smoothness_gradient_formula():
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((7, 2))
    _, g = smoothness(Z)
    expect = np.zeros_like(Z)
    for t in range(7):
        if t > 0:
            expect[t] += 2 * (Z[t] - Z[t - 1])
        if t < 6:
            expect[t] -= 2 * (Z[t + 1] - Z[t])
    assert np.allclose(g, expect)


def test_smoothness_scaled_by_batch_fraction(tiny):
    _, ds = tiny
    problem = Problem(ds)
    state = random_state(ds, CFG16)
    lam = 3.0
    data_only = loss_and_gradients(state, [1, 3], problem, 0.0)
    with_smooth = loss_and_gradients(state, [1, 3], problem, lam)
    s, gs = smoothness(state.Z)
    assert with_smooth[0] - data_only[0] == pytest.approx(lam * 2 / 4 * s)
    assert np.allclose(with_smooth[3] - data_only[3], lam * 2 / 4 * gs)


@pytest.mark.parametrize("seed,lam", [(0, 1.0), (1, 0.0), (2, 10.0)])
def test_end_to_end_gradient_matches_finite_differences(seed, lam):
    errs = gradient_errors(directions=10, seed=seed, lambda_smooth=lam)
    assert errs.max() < 1e-4


def test_batch_gradient_matches_finite_differences(tiny):
    _, ds = tiny
    problem = Problem(ds)
    state = random_state(ds, CFG16, seed=5)
    batch = [3, 0]
    loss, gf, gth, gz = loss_and_gradients(state, batch, problem, 0.5)
    rng = np.random.default_rng(1)
    df = rng.standard_normal(gf.shape) + 1j * rng.standard_normal(gf.shape)
    dth, dz = rng.standard_normal(gth.shape), rng.standard_normal(gz.shape)
    h = 1e-6

    def at(s):
        st_ = state.copy()
        st_.f = state.f + s * df
        st_.gen = state.gen.with_theta(state.gen.theta + s * dth)
        st_.Z = state.Z + s * dz
        return loss_and_gradients(st_, batch, problem, 0.5)[0]

    fd = (at(h) - at(-h)) / (2 * h)
    an = np.vdot(gf, df).real + gth @ dth + np.sum(gz * dz)
    assert abs(fd - an) / abs(fd) < 1e-4


def test_empty_batch_rejected(tiny):
    _, ds = tiny
    with pytest.raises(ValueError):
        loss_and_gradients(random_state(ds, CFG16), [], Problem(ds), 1.0)


def test_nonfinite_loss_names_frame(tiny):
    _, ds = tiny
    problem = Problem(ds)
    problem.data[2] = problem.data[2].copy()
    problem.data[2][0, 0] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        loss_and_gradients(random_state(ds, CFG16), [0, 2], problem, 1.0)
    assert info.value.frame == 2
    assert "frame 2" in str(info.value)


def test_sign_flip_invariance_mlp(tiny):
    _, ds = tiny
    config = replace(CFG16, arch="mlp")
    state = random_state(ds, config, seed=4)
    problem = Problem(ds)
    flipped = state.copy()
    first = flipped.gen.layout[0]
    w, _ = flipped.gen.weights(first)
    w *= -1                      # view into theta
    flipped.Z = -flipped.Z
    a = full_loss(state, problem, 0.0)
    b = full_loss(flipped, problem, 0.0)
    assert a == b


# -- Adam -------------------------------------------------------------------

def reference_adam(x, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar textbook Adam, one coordinate at a time."""
    x = list(map(float, x))
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    for step, g in enumerate(grads, start=1):
        for i, gi in enumerate(g):
            m[i] = b1 * m[i] + (1 - b1) * gi
            v[i] = b2 * v[i] + (1 - b2) * gi * gi
            mh = m[i] / (1 - b1 ** step)
            vh = v[i] / (1 - b2 ** step)
            x[i] -= lr * mh / (math.sqrt(vh) + eps)
    return np.array(x)


def test_adam_matches_textbook_reference():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(4)
    grads = rng.standard_normal((30, 4)) * np.array([1e-3, 1, 10, 1e4])
    x = x0.copy()
    mom = AdamMoments.zeros_like(x)
    for g in grads:
        adam_update(x, g, mom, 0.05, 0.9, 0.999, 1e-8)
    assert np.allclose(x, reference_adam(x0, grads, 0.05), rtol=1e-13, atol=1e-15)


def test_adam_zero_gradient_is_fixed_point():
    x = np.array([1.0, -2.0, 3.0])
    mom = AdamMoments.zeros_like(x)
    for _ in range(5):
        adam_update(x, np.zeros(3), mom, 0.1, 0.9, 0.999, 1e-8)
    assert np.array_equal(x, [1.0, -2.0, 3.0])


@pytest.mark.parametrize("scale", [1e-4, 1.0, 1e6])
def test_adam_first_step_is_lr_times_sign(scale):
    g = scale * np.array([1.0, -2.0, 0.5])
    x = np.zeros(3)
    adam_update(x, g, AdamMoments.zeros_like(x), 0.01, 0.9, 0.999, 1e-8)
    assert np.allclose(x, -0.01 * np.sign(g), rtol=1e-3)


def test_adam_converges_on_quadratic():
    c = np.array([0.5, -0.5])
    curv = np.array([1.0, 10.0])
    x = np.zeros(2)
    mom = AdamMoments.zeros_like(x)
    for _ in range(100):
        adam_update(x, 2 * curv * (x - c), mom, 0.02, 0.9, 0.999, 1e-8)
    assert np.abs(x - c).max() < 1e-3


def test_adam_treats_real_and_imaginary_parts_independently(tiny):
    _, ds = tiny
    state = random_state(ds, CFG16)
    f0 = state.f.copy()
    grads = (np.ones_like(state.f), np.zeros_like(state.theta), np.zeros_like(state.Z))
    adam_step(state, grads, CFG16)
    assert np.allclose(state.f.real, f0.real - CFG16.lr_f)
    assert np.array_equal(state.f.imag, f0.imag)
    assert state.moments["f"].m.shape == (16, 32)


# -- schedule -------------------------------------------------------------------

def test_config_validation():
    for bad in (dict(lr_f=0), dict(beta1=1.0), dict(epochs_fine=0), dict(coarse_fraction=0),
                dict(batch_frames=0), dict(lambda_smooth=-1)):
        with pytest.raises(ValueError):
            ReconConfig(**bad).validate()


def test_coarse_restriction_geometry(tiny):
    _, ds = tiny
    coarse = restrict_central(ds, 0.5)
    assert coarse.shape == (8, 8)
    for full, fr in zip(ds.frames, coarse.frames):
        assert np.all(np.abs(fr.coords) <= 0.5)
        r_full = np.hypot(*full.coords.T)
        assert fr.num_points == np.sum(r_full <= 0.25 + 1e-12)
        assert np.allclose(np.sort(np.hypot(*fr.coords.T)), 2 * np.sort(r_full[r_full <= 0.25 + 1e-12]))


def test_loss_history_and_moments(tiny):
    _, ds = tiny
    config = replace(CFG16, epochs_coarse=2, epochs_fine=3, batch_frames=2)
    state = progressive_solve(ds, config)
    stages = [s for s, _ in state.loss_history]
    assert stages == [1, 1, 2, 2, 2]
    assert state.f.shape == ds.shape and state.epoch == 3
    for name, var in (("f", state.f.view(float)), ("theta", state.theta), ("Z", state.Z)):
        assert state.moments[name].m.shape == var.shape


def test_stage_two_restarts_template_keeps_motion(tiny, monkeypatch):
    from mocostorm import engine

    _, ds = tiny
    config = replace(CFG16, epochs_coarse=2, epochs_fine=1)
    seen = {}

    def spy(state, shape):
        seen["theta"] = state.theta.copy()
        seen["Z"] = state.Z.copy()
        seen["theta_moments"] = state.moments["theta"].step
        return original(state, shape)

    original = engine.start_fine_stage
    monkeypatch.setattr(engine, "start_fine_stage", spy)
    snapshots = []
    progressive_solve(ds, config, callback=lambda s: snapshots.append(s.copy()))
    handoff = snapshots[2]           # after start_fine_stage, before stage-2 epochs
    assert handoff.stage == 2 and handoff.epoch == 0
    assert not handoff.f.any() and handoff.f.shape == ds.shape
    assert np.array_equal(handoff.theta, seen["theta"])
    assert np.array_equal(handoff.Z, seen["Z"])
    assert handoff.moments["theta"].step == seen["theta_moments"] > 0
    assert handoff.moments["f"].step == 0


def test_skipping_coarse_stage_equals_direct_solve(tiny):
    _, ds = tiny
    config = replace(CFG16, epochs_coarse=0, epochs_fine=4, batch_frames=3)
    a = progressive_solve(ds, config)
    b = init_state(ds.shape, ds.num_frames, config)
    assert not b.f.any() and not b.Z.any()
    problem = Problem(ds)
    for _ in range(4):
        run_epoch(b, problem, config)
    assert np.array_equal(a.f, b.f)
    assert np.array_equal(a.theta, b.theta)
    assert np.array_equal(a.Z, b.Z)


def test_monotone_check_warns(caplog):
    rising = [(2, 10.0 - i) for i in range(11)] + [(2, 20.0)]
    with caplog.at_level(logging.WARNING):
        assert _check_monotone(rising) is False
    assert "rose" in caplog.text
    assert _check_monotone([(2, 10.0 - i) for i in range(12)])


def test_nonfinite_loss_dumps_checkpoint(tiny, tmp_path):
    from mocostorm.io import load_checkpoint

    _, ds = tiny
    frames = [SpokeFrame(fr.coords, fr.samples.copy(), fr.frame_index) for fr in ds.frames]
    frames[1].samples[0, 0] = np.inf
    bad = Dataset(frames, ds.coil_maps, ds.spokes_per_frame, ds.samples_per_spoke)
    dump = tmp_path / "crash.mcck"
    with pytest.raises(NonFiniteLossError):
        progressive_solve(bad, replace(CFG16, epochs_coarse=0, epochs_fine=2), dump_path=dump)
    state, _ = load_checkpoint(dump)
    assert state.f.shape == ds.shape


def test_non_power_of_two_grid_rejected():
    traj = make_trajectory(8, 12, 8, "uniform")
    frame = SpokeFrame(traj.frames[0].coords, np.zeros((1, 96), complex), 0)
    ds = Dataset([frame, SpokeFrame(frame.coords, frame.samples, 1)], np.ones((1, 12, 12)), 8, 12)
    with pytest.raises(ValueError):
        progressive_solve(ds, CFG16)


def test_static_problem_is_solved():
    """One frame, no smoothness, spokes >= grid size: plain reconstruction."""
    n = 16
    spec = replace(TINY, num_frames=2, spokes_per_frame=32, breathing_amplitude=0.0)
    gt = make_ground_truth(spec)
    traj = make_trajectory(32, 16, 32, "bit_reversed")
    from mocostorm.phantom import clean_frames

    y = clean_frames(replace(gt, motion=gt.motion[:1]), traj)[0]
    ds = Dataset([SpokeFrame(traj.frames[0].coords, y, 0)], gt.coil_maps, 32, 16)
    config = replace(CFG16, lambda_smooth=0.0, epochs_coarse=0, epochs_fine=600, lr_f=0.02, batch_frames=1)
    state = progressive_solve(ds, config)
    r, _, _ = frame_forward(state, 0, ds.frames[0], ds.coil_maps)
    assert state.f.shape == (n, n)
    assert np.linalg.norm(r) / np.linalg.norm(y) < 1e-2
