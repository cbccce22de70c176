import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from deepcascade.kspace import (
    REFERENCE_PIXELS,
    NoiseSpec,
    SamplingMask,
    dft2,
    from_channels,
    generate_mask,
    idft2,
    to_channels,
    undersample,
    variable_density,
    zero_filled,
)


def rand_seq(rng, shape=(8, 8, 3)):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_dft_of_constant_is_centred_spike():
    s = dft2(np.ones((4, 4, 1)))
    assert s[2, 2, 0] == pytest.approx(4.0)
    s[2, 2, 0] = 0
    assert np.abs(s).max() < 1e-12


def test_dft_delta_is_flat():
    x = np.zeros((4, 4, 1), complex)
    x[2, 2, 0] = 1
    np.testing.assert_allclose(np.abs(dft2(x)), 0.25 * np.ones((4, 4, 1)), atol=1e-15)


def test_dft_is_framewise():
    rng = np.random.default_rng(0)
    x = rand_seq(rng, (6, 4, 3))
    s = dft2(x)
    for t in range(3):
        np.testing.assert_allclose(s[..., t], dft2(x[..., t : t + 1])[..., 0], atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(4, 4, 1), (8, 6, 3), (5, 7, 2)]))
def test_unitary_roundtrip(seed, shape):
    x = rand_seq(np.random.default_rng(seed), shape)
    s = dft2(x)
    assert np.linalg.norm(s) == pytest.approx(np.linalg.norm(x), rel=1e-12)
    np.testing.assert_allclose(idft2(s), x, atol=1e-12)


def test_channels_roundtrip():
    x = rand_seq(np.random.default_rng(1), (2, 4, 4, 3))
    c = to_channels(x)
    assert c.shape == (2, 2, 4, 4, 3)
    np.testing.assert_array_equal(from_channels(c), x)


# -- masks ----------------------------------------------------------------------


def test_variable_density_floor_and_peak():
    d = variable_density(256)
    assert d.shape == (128,)
    assert d.min() / d.max() == pytest.approx(0.1)
    assert np.argmax(d) in (63, 64)
    # unimodal around the k_y = 0 pair
    peak = np.argmax(d)
    assert np.all(np.diff(d[: peak + 1]) > 0) and np.all(np.diff(d[peak:]) < 0)


@pytest.mark.parametrize("acc", [2, 3, 4, 6, 9])
def test_mask_rules(acc):
    for seed in range(50):
        m = generate_mask(64, 5, acc, seed, n_central=8) if 64 / 8 >= acc else None
        if m is None:
            continue
        lines = m.lines
        assert lines[28:36].all()
        pairs = lines.reshape(32, 2, 5)
        central_pairs = np.zeros(32, bool)
        central_pairs[14:18] = True
        assert np.all(pairs[~central_pairs, 0] == pairs[~central_pairs, 1])


def test_mask_line_count():
    m = generate_mask(256, 10, 4, seed=3)
    np.testing.assert_array_equal(m.lines.sum(axis=0), 64)
    m = generate_mask(256, 10, 6, seed=3)  # ceil(42.67) = 43, 35 extra -> 36
    np.testing.assert_array_equal(m.lines.sum(axis=0), 44)


def test_mask_deterministic_and_seed_sensitive():
    a = generate_mask(64, 4, 4, seed=7)
    b = generate_mask(64, 4, 4, seed=7)
    c = generate_mask(64, 4, 4, seed=8)
    assert np.array_equal(a.lines, b.lines)
    assert not np.array_equal(a.lines, c.lines)


def test_mask_prefers_low_frequencies():
    hits = sum(generate_mask(64, 1, 4, seed=s).lines[:, 0] for s in range(400))
    centre_pairs = hits[20:28].mean()
    edge_pairs = np.r_[hits[:4], hits[-4:]].mean()
    assert centre_pairs > 2 * edge_pairs


def test_mask_errors():
    with pytest.raises(ValueError):
        generate_mask(63, 4, 4)
    with pytest.raises(ValueError):
        generate_mask(64, 4, 9)  # more than n_y / n_central
    with pytest.raises(ValueError):
        generate_mask(64, 4, 1)
    with pytest.raises(ValueError):
        SamplingMask(np.zeros(4, bool))


def test_sampling_mask_is_immutable():
    m = generate_mask(32, 2, 2, 0)
    with pytest.raises(ValueError):
        m.lines[0, 0] = False
    assert m.omega(4).shape == (4, 32, 2)
    assert m.fraction().shape == (2,)


# -- acquisition ----------------------------------------------------------------


def test_undersample_zeroes_unacquired():
    rng = np.random.default_rng(2)
    x = rand_seq(rng, (8, 16, 2))
    m = SamplingMask(rng.random((16, 2)) < 0.5)
    s0 = undersample(x, m)
    om = m.omega(8)
    assert np.all(s0[~om] == 0)
    np.testing.assert_allclose(s0[om], dft2(x)[om], atol=1e-14)


def test_parseval_energy_split():
    rng = np.random.default_rng(4)
    for _ in range(20):
        x = rand_seq(rng, (8, 16, 3))
        m = SamplingMask(rng.random((16, 3)) < 0.4)
        xu = zero_filled(undersample(x, m))
        unacq = np.where(m.omega(8), 0, dft2(x))
        assert np.sum(np.abs(xu - x) ** 2) == pytest.approx(np.sum(np.abs(unacq) ** 2), rel=1e-10)
        assert np.sum(np.abs(x) ** 2) == pytest.approx(np.sum(np.abs(xu) ** 2) + np.sum(np.abs(unacq) ** 2), rel=1e-10)


def test_noise_statistics_chi2():
    # |e|^2 / (power/2) summed over both components is chi-square
    x = np.zeros((64, 64, 4), complex)
    m = SamplingMask(np.ones((64, 4), bool))
    noise = NoiseSpec(1e-6, seed=11, reference_pixels=1)
    e = undersample(x, m, noise)
    z = np.concatenate([e.real.ravel(), e.imag.ravel()]) / np.sqrt(noise.kspace_power / 2)
    stat = np.sum(z**2)
    p = stats.chi2.sf(stat, z.size)
    assert 0.001 < p < 0.999
    assert stats.normaltest(z).pvalue > 1e-3


def test_noise_only_on_acquired_and_deterministic():
    x = np.zeros((16, 16, 2), complex)
    m = generate_mask(16, 2, 2, 0)
    a = undersample(x, m, NoiseSpec(1e-3, seed=5))
    b = undersample(x, m, NoiseSpec(1e-3, seed=5))
    assert np.array_equal(a, b)
    assert np.all(a[~m.omega(16)] == 0)
    assert np.all(a[m.omega(16)] != 0)


def test_noise_reference_scaling():
    assert NoiseSpec(1e-9).kspace_power == pytest.approx(1e-9 * REFERENCE_PIXELS)
    assert NoiseSpec(1e-9, reference_pixels=1).kspace_power == pytest.approx(1e-9)
    with pytest.raises(ValueError):
        NoiseSpec(-1.0)


def test_full_sampling_psnr_unit_reference():
    # with the unitary convention the image noise power equals sigma2 at any size
    x = np.zeros((128, 128, 2), complex)
    m = SamplingMask(np.ones((128, 2), bool))
    e = zero_filled(undersample(x, m, NoiseSpec(1e-4, seed=0, reference_pixels=1)))
    assert np.mean(np.abs(e) ** 2) == pytest.approx(1e-4, rel=0.02)
