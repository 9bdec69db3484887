import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mocostorm.nudft import (
    NUDFT,
    Ordering,
    bit_reversed_order,
    make_trajectory,
    nudft_adjoint,
    nudft_forward,
)


def brute_force_nudft(image, coil_maps, coords):
    """Triple loop over coils, k-points and pixels."""
    H, W = image.shape
    out = np.zeros((len(coil_maps), len(coords)), dtype=complex)
    for c, s in enumerate(coil_maps):
        for p, (kx, ky) in enumerate(coords):
            acc = 0j
            for i in range(H):
                for j in range(W):
                    y, x = i - H // 2, j - W // 2
                    acc += s[i, j] * image[i, j] * np.exp(-2j * np.pi * (kx * x + ky * y))
            out[c, p] = acc
    return out


def random_instance(rng, n, coils, points):
    f = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    maps = rng.standard_normal((coils, n, n)) + 1j * rng.standard_normal((coils, n, n))
    coords = rng.uniform(-0.5, 0.5, (points, 2))
    return f, maps, coords


def test_bit_reversal_small_cases():
    assert list(bit_reversed_order(1)) == [0]
    assert list(bit_reversed_order(2)) == [0, 1]
    # 3-bit reversal by hand: 001->100, 010->010, 011->110, ...
    assert list(bit_reversed_order(8)) == [0, 4, 2, 6, 1, 5, 3, 7]


@pytest.mark.parametrize("n", [16, 64, 1024, 4096])
def test_bit_reversal_is_an_involutive_bijection(n):
    perm = bit_reversed_order(n)
    assert sorted(perm) == list(range(n))
    assert np.array_equal(perm[perm], np.arange(n))


@pytest.mark.parametrize("n", [0, 3, 12, 100])
def test_bit_reversal_rejects_non_powers_of_two(n):
    with pytest.raises(ValueError):
        bit_reversed_order(n)


def test_uniform_trajectory_angles():
    traj = make_trajectory(4, 8, 1, "uniform")
    assert np.allclose(traj.angles, [0, np.pi / 4, np.pi / 2, 3 * np.pi / 4])


def test_bit_reversed_first_frame():
    traj = make_trajectory(8, 8, 2, Ordering.BIT_REVERSED)
    assert np.allclose(traj.angles[:2], [0, np.pi / 2])
    spoke0, spoke1 = traj.frames[0].coords.reshape(2, 8, 2)
    assert np.allclose(spoke0[:, 1], 0)          # angle 0: along kx
    assert np.allclose(spoke1[:, 0], 0, atol=1e-15)   # angle pi/2: along ky


@pytest.mark.parametrize("ordering", list(Ordering))
@pytest.mark.parametrize("sps", [7, 8, 64])
def test_trajectory_geometry(ordering, sps):
    traj = make_trajectory(16, sps, 4, ordering)
    assert traj.num_frames == 4
    assert np.all((traj.angles >= 0) & (traj.angles < np.pi))
    for fr in traj.frames:
        assert np.all(np.abs(fr.coords) <= 0.5)
        for spoke in fr.coords.reshape(4, sps, 2):
            assert np.hypot(*spoke.T).min() <= 0.5 / sps
            # collinear through the origin
            d = spoke[-1] - spoke[0]
            assert np.allclose(spoke[:, 0] * d[1] - spoke[:, 1] * d[0], 0, atol=1e-14)


def test_trajectory_frames_partition_spokes():
    traj = make_trajectory(32, 8, 4, "bit_reversed")
    all_pts = np.concatenate([fr.coords for fr in traj.frames])
    assert all_pts.shape == (32 * 8, 2)
    # every angle appears exactly once for bit-reversed on a power of two
    assert len(np.unique(np.round(traj.angles, 12))) == 32


def test_trajectory_rejections():
    with pytest.raises(ValueError):
        make_trajectory(10, 8, 3, "uniform")
    with pytest.raises(ValueError):
        make_trajectory(12, 8, 4, "bit_reversed")


def test_centered_delta_has_flat_spectrum():
    f = np.zeros((8, 8), complex)
    f[4, 4] = 1
    coords = np.random.default_rng(0).uniform(-0.5, 0.5, (9, 2))
    y = nudft_forward(f, np.ones((1, 8, 8)), coords)
    assert np.allclose(y, 1 + 0j, atol=1e-15)


def test_dc_sample_is_weighted_sum():
    rng = np.random.default_rng(1)
    f, maps, _ = random_instance(rng, 8, 2, 1)
    y = nudft_forward(f, maps, np.zeros((1, 2)))
    assert np.allclose(y[:, 0], (maps * f).sum(axis=(1, 2)), rtol=1e-13)


def test_forward_matches_brute_force():
    rng = np.random.default_rng(2)
    f, maps, coords = random_instance(rng, 8, 1, 5)
    ours = nudft_forward(f, maps, coords)
    ref = brute_force_nudft(f, maps, coords)
    assert np.linalg.norm(ours - ref) / np.linalg.norm(ref) < 1e-12


def test_forward_is_linear():
    rng = np.random.default_rng(3)
    f, maps, coords = random_instance(rng, 8, 2, 11)
    g = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    a, b = 0.3 - 1.2j, 2.1
    lhs = nudft_forward(a * f + b * g, maps, coords)
    rhs = a * nudft_forward(f, maps, coords) + b * nudft_forward(g, maps, coords)
    assert np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs) < 1e-12


def test_adjoint_of_zero_is_zero():
    maps = np.ones((2, 8, 8))
    out = nudft_adjoint(np.zeros((2, 4)), maps, np.zeros((4, 2)))
    assert np.array_equal(out, np.zeros((8, 8)))


def test_adjoint_at_dc_is_constant():
    f = np.zeros((8, 8), complex)
    f[4, 4] = 1
    coords = np.zeros((1, 2))
    maps = np.ones((1, 8, 8))
    out = nudft_adjoint(nudft_forward(f, maps, coords), maps, coords)
    assert np.allclose(out, 1.0)


def dot_test(rng, n, coils, points):
    f, maps, coords = random_instance(rng, n, coils, points)
    y = rng.standard_normal((coils, points)) + 1j * rng.standard_normal((coils, points))
    op = NUDFT(coords, maps)
    ax = op.forward(f)
    return abs(np.vdot(y, ax) - np.vdot(op.adjoint(y), f)) / (np.linalg.norm(ax) * np.linalg.norm(y))


def test_adjoint_dot_product():
    assert dot_test(np.random.default_rng(4), 8, 3, 17) < 1e-12


@settings(max_examples=25, deadline=None)
@given(
    n=st.sampled_from([4, 6, 8, 16]),
    coils=st.integers(1, 4),
    points=st.integers(1, 40),
    seed=st.integers(0, 2**32 - 1),
)
def test_adjoint_identity_property(n, coils, points, seed):
    assert dot_test(np.random.default_rng(seed), n, coils, points) < 1e-12


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        nudft_forward(np.zeros((8, 8)), np.ones((1, 4, 4)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        nudft_adjoint(np.zeros((1, 5)), np.ones((1, 4, 4)), np.zeros((3, 2)))
