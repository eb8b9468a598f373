import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from foam import spectral as S
from foam import tensor as T
from foam.gradcheck import gradcheck
from foam.spectral import ComplexSpectrum
from foam.tensor import Tensor

from oracles import dft2_matrix

sizes = st.sampled_from([1, 2, 4, 8, 16])


def spectrum_of(z):
    return ComplexSpectrum(Tensor(z.real.copy()), Tensor(z.imag.copy()))


def test_dc_only_and_impulse():
    s = S.fft2(Tensor(np.full((1, 4, 4), 2.5))).to_complex()
    assert s[0, 0, 0] == pytest.approx(16 * 2.5)
    s[0, 0, 0] = 0
    assert np.abs(s).max() < 1e-12
    imp = np.zeros((4, 4))
    imp[0, 0] = 1
    np.testing.assert_allclose(S.fft2(Tensor(imp)).to_complex(), np.ones((4, 4)), atol=1e-15)


def test_inverse_of_dc_spike_is_ones():
    z = np.zeros((8, 8), dtype=complex)
    z[0, 0] = 64
    out = S.ifft2(spectrum_of(z), real=True).data
    np.testing.assert_allclose(out, np.ones((8, 8)), atol=1e-12)


@pytest.mark.parametrize("h,w", [(8, 8), (4, 16), (6, 5), (3, 8), (1, 7)])
def test_forward_and_inverse_match_matrix_oracle(h, w):
    rng = np.random.default_rng(h * 31 + w)
    x = rng.standard_normal((2, h, w))
    assert np.abs(S.fft2(Tensor(x)).to_complex() - dft2_matrix(x)).max() < 1e-10
    z = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
    assert np.abs(S.ifft2(spectrum_of(z)).to_complex() - dft2_matrix(z, inverse=True)).max() < 1e-10
    assert np.abs(S.dft2_naive(x).to_complex() - dft2_matrix(x)).max() < 1e-10
    assert np.abs(S.idft2_naive(z).to_complex() - dft2_matrix(z, inverse=True)).max() < 1e-10


def test_radix2_matches_numpy_fft():
    x = np.random.default_rng(1).standard_normal((3, 32)) + 0j
    np.testing.assert_allclose(S.fft_radix2(x), np.fft.fft(x, axis=-1), atol=1e-12)
    with pytest.raises(ValueError):
        S.fft_radix2(np.zeros(6, dtype=complex))


def test_fallback_logs_a_notice(caplog):
    with caplog.at_level(logging.INFO, logger="foam.spectral"):
        S.fft2(Tensor(np.ones((3, 5))))
    assert any("power-of-two" in r.message for r in caplog.records)


def test_fft_rejects_1d():
    with pytest.raises(ValueError):
        S.fft2(Tensor(np.ones(4)))


@given(sizes, sizes, st.integers(0, 10_000))
def test_roundtrip_float64(h, w, seed):
    x = np.random.default_rng(seed).standard_normal((2, h, w))
    back = S.ifft2(S.fft2(Tensor(x)), real=True).data
    assert np.abs(back - x).max() < 1e-10


@given(st.integers(0, 10_000))
def test_roundtrip_float32(seed):
    x = np.random.default_rng(seed).standard_normal((3, 8, 16)).astype(np.float32)
    back = S.ifft2(S.fft2(Tensor(x)), real=True)
    assert back.dtype == np.float32
    assert np.abs(back.data - x).max() < 1e-5


@given(sizes, sizes, st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(h, w, seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((h, w)), rng.standard_normal((h, w))
    lhs = S.fft2(Tensor(a * x + b * y)).to_complex()
    rhs = a * S.fft2(Tensor(x)).to_complex() + b * S.fft2(Tensor(y)).to_complex()
    assert np.abs(lhs - rhs).max() <= 1e-6 * max(1.0, np.abs(rhs).max())


@given(sizes, sizes, st.integers(0, 10_000))
def test_parseval(h, w, seed):
    x = np.random.default_rng(seed).standard_normal((h, w))
    m = S.magnitude(S.fft2(Tensor(x))).data
    assert (m**2).sum() / (h * w) == pytest.approx((x**2).sum(), rel=1e-5)


@given(sizes, sizes, st.integers(0, 10_000))
def test_conjugate_symmetry(h, w, seed):
    x = np.random.default_rng(seed).standard_normal((h, w))
    f = S.fft2(Tensor(x)).to_complex()
    mirrored = np.conj(f[(-np.arange(h)) % h][:, (-np.arange(w)) % w])
    assert np.abs(f - mirrored).max() <= 1e-5 * max(1.0, np.abs(f).max())


def test_magnitude_and_phase_examples():
    s = ComplexSpectrum(Tensor([3.0, 1.0, 0.0, 0.0]), Tensor([4.0, 0.0, 1.0, 0.0]))
    np.testing.assert_allclose(S.magnitude(s).data, [5.0, 1.0, 1.0, 0.0])
    np.testing.assert_allclose(S.phase(s).data, [math.atan2(4, 3), 0.0, math.pi / 2, 0.0])


def test_constant_image_magnitude_has_single_dc_bin():
    m = S.magnitude(S.fft2(Tensor(np.full((8, 8), 0.7)))).data
    assert m[0, 0] == pytest.approx(64 * 0.7)
    assert np.count_nonzero(m > 1e-9) == 1


@given(st.integers(0, 10_000), st.integers(0, 7), st.integers(0, 7))
def test_circular_shift_keeps_magnitude_changes_phase(seed, dy, dx):
    x = np.random.default_rng(seed).standard_normal((2, 8, 8))
    s0 = S.fft2(Tensor(x))
    s1 = S.fft2(Tensor(np.roll(x, (dy, dx), axis=(-2, -1))))
    assert np.abs(S.magnitude(s0).data - S.magnitude(s1).data).max() < 1e-5 * max(1.0, np.abs(x).sum())
    if (dy, dx) != (0, 0):
        assert np.abs(np.exp(1j * S.phase(s0).data) - np.exp(1j * S.phase(s1).data)).max() > 1e-3


@given(st.integers(0, 10_000))
def test_polar_recombine_identity(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((3, 8, 8)) + 1j * rng.standard_normal((3, 8, 8))
    s = spectrum_of(z)
    back = S.polar_recombine(S.magnitude(s), S.phase(s)).to_complex()
    assert np.abs(back - z).max() < 1e-6


def test_fftshift_moves_dc_to_center():
    s = S.fft2(Tensor(np.ones((1, 8, 8))))
    shifted = S.fftshift(s).real.data
    assert shifted[0, 4, 4] == pytest.approx(64)
    np.testing.assert_array_equal(shifted[0], np.fft.fftshift(s.real.data[0]))


def test_spectral_gradients():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 4, 8)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 4, 8)))
    assert gradcheck(lambda: T.tsum(S.fft2(x).imag * w) + T.tsum(S.fft2(x).real ** 2) * 0.01, [x]).passed
    re = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    im = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    s = lambda: ComplexSpectrum(re, im)
    assert gradcheck(lambda: T.tsum(S.ifft2(s(), real=True) * w[0, :, :4]), [re, im]).passed
    # random complex spectrum keeps the probes clear of the R = I = 0 point and the phase branch cut
    assert gradcheck(lambda: T.tsum(S.magnitude(s()) * w[0, :, :4] + T.sin(S.phase(s())) * w[1, :, :4]), [re, im]).passed
    m = Tensor(np.abs(rng.standard_normal((4, 4))), requires_grad=True)
    p = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    assert gradcheck(lambda: T.tsum(S.polar_recombine(m, p).imag * w[0, :, :4]), [m, p]).passed
    # non-power-of-two sizes use the literal sum in both directions
    y = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    v = Tensor(rng.standard_normal((3, 5)))
    assert gradcheck(lambda: T.tsum(S.fft2(y).real * v + S.fft2(y).imag ** 2), [y]).passed


# -- band energy -------------------------------------------------------------------------
def test_band_energy_constant_image():
    rep = S.band_energy(S.fft2(Tensor(np.full((16, 16), 0.3))))
    assert rep.fractions[0] == pytest.approx(1.0)
    assert rep.fractions[1] == pytest.approx(0.0, abs=1e-12)
    assert rep.fractions[2] == pytest.approx(0.0, abs=1e-12)


@given(st.integers(0, 10_000))
def test_band_fractions_sum_to_one(seed):
    x = np.random.default_rng(seed).standard_normal((2, 16, 16))
    rep = S.band_energy(S.fft2(Tensor(x)))
    assert sum(rep.fractions) == pytest.approx(1.0, abs=1e-6)
    assert all(0 <= f <= 1 for f in rep.fractions)


def test_band_energy_validates_edges():
    s = S.fft2(Tensor(np.ones((4, 4))))
    for bad in ([0.3, 0.2], [0.0, 0.2], [0.1, 0.8]):
        with pytest.raises(ValueError):
            S.band_energy(s, bad)


def test_white_noise_energy_follows_band_area():
    h = w = 32
    r = np.sort(S.radial_frequency(h, w).ravel())
    # three bands holding (as near as the grid allows) equal numbers of bins
    edges = [float((r[len(r) // 3 - 1] + r[len(r) // 3]) / 2), float((r[2 * len(r) // 3 - 1] + r[2 * len(r) // 3]) / 2)]
    areas = np.bincount(np.digitize(S.radial_frequency(h, w), edges).ravel(), minlength=3) / (h * w)
    fr = np.mean(
        [S.band_energy(S.fft2(Tensor(np.random.default_rng(s).standard_normal((h, w)))), edges).fractions
         for s in range(100)],
        axis=0,
    )
    np.testing.assert_allclose(fr, areas, rtol=0.2)


def test_blur_lowers_top_band_fraction():
    from foam.hdc import gaussian_blur

    for seed in range(20):
        x = np.random.default_rng(seed).uniform(size=(16, 16))
        before = S.band_energy(S.fft2(Tensor(x))).fractions[-1]
        after = S.band_energy(S.fft2(Tensor(gaussian_blur(x, 3, 5.0)))).fractions[-1]
        assert after < before
