import numpy as np
import pytest

from src.errors import DomainError, ShapeError
from src.fringe import (
    BScan, CoherenceSpec, Fringe, LOG, MeanFilterSpec, UNIT, WindowSpec, apply_spectral_window,
    centered_window, coherence_length, effective_coherence_length, fwhm, gausswin, log_compress,
    mean_filter_vertical, reconstruct, window_mask,
)


def single_reflector(n_k: int, freq: float, width: int = 1) -> Fringe:
    k = np.arange(n_k)[:, None]
    return Fringe(np.cos(2 * np.pi * freq * k / n_k) * np.ones((1, width)))


@pytest.mark.parametrize("n", [1, 3, 64, 1024])
@pytest.mark.parametrize("alpha", [2.0, 4.0, 8.0])
def test_gausswin_matches_closed_form(n, alpha):
    half = (n - 1) / 2.0
    idx = np.arange(n) - half
    expected = np.ones(1) if n == 1 else np.exp(-0.5 * (alpha * idx / half) ** 2)
    np.testing.assert_allclose(gausswin(n, alpha), expected, rtol=0, atol=1e-12)


def test_gausswin_rejects_bad_arguments():
    with pytest.raises(DomainError):
        gausswin(0, 8.0)
    with pytest.raises(DomainError):
        gausswin(16, 0.0)


def test_centered_mask_equals_gausswin():
    for n_k in (64, 65, 512):
        np.testing.assert_allclose(window_mask(centered_window(n_k, 8.0)), gausswin(n_k, 8.0), atol=1e-12)


def test_window_spec_sigma_and_validation():
    assert WindowSpec(alpha=8.0, center=32, n_k=65).sigma_k == pytest.approx(4.0)
    with pytest.raises(DomainError):
        WindowSpec(alpha=8.0, center=65, n_k=65)
    with pytest.raises(DomainError):
        WindowSpec(alpha=-1.0, center=0, n_k=65)


def test_apply_window_length_mismatch():
    with pytest.raises(ShapeError):
        apply_spectral_window(single_reflector(64, 10), centered_window(32, 8.0))


def test_apply_window_tags_and_scales_columns():
    fringe = single_reflector(64, 10, width=3)
    windowed = apply_spectral_window(fringe, centered_window(64, 8.0))
    assert windowed.meta == "windowed"
    np.testing.assert_allclose(windowed.samples[:, 1], fringe.samples[:, 1] * gausswin(64, 8.0))


def test_fringe_and_bscan_validation():
    with pytest.raises(DomainError):
        Fringe(np.ones((1, 4)))
    with pytest.raises(DomainError):
        Fringe(np.array([[0.0], [np.nan]]))
    with pytest.raises(DomainError):
        BScan(np.full((2, 2), 1.5), value_domain=UNIT)
    assert Fringe(np.arange(8.0)).samples.shape == (8, 1)


def test_reconstruct_keeps_positive_depths():
    image = reconstruct(single_reflector(128, 20, width=4))
    assert image.pixels.shape == (64, 4)
    assert np.all(np.argmax(image.pixels, axis=0) == 20)


def test_reconstruct_parseval():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(256, 3))
    half = reconstruct(Fringe(x)).pixels
    nyquist = np.abs(np.sum(x * (-1.0) ** np.arange(256)[:, None], axis=0))
    spectrum_energy = 2 * np.sum(half ** 2, axis=0) - half[0] ** 2 + nyquist ** 2
    np.testing.assert_allclose(spectrum_energy, 256 * np.sum(x ** 2, axis=0), rtol=1e-9)


def test_reconstruct_log_variant():
    fringe = single_reflector(64, 5)
    linear = reconstruct(fringe).pixels
    logged = reconstruct(fringe, log=True)
    assert logged.value_domain == LOG
    np.testing.assert_allclose(logged.pixels, log_compress(linear))
    np.testing.assert_allclose(log_compress(np.array([1.0])), [20 * np.log10(1 + 1e-12)])


def test_centered_window_keeps_peak_location():
    fringe = single_reflector(256, 40)
    windowed = apply_spectral_window(fringe, centered_window(256, 8.0))
    assert np.argmax(reconstruct(fringe).pixels[:, 0]) == 40
    assert np.argmax(reconstruct(windowed).pixels[:, 0]) == 40


def test_fwhm_doubles_with_alpha():
    fringe = single_reflector(1024, 200)
    widths = []
    for alpha in (8.0, 16.0):
        profile = reconstruct(apply_spectral_window(fringe, centered_window(1024, alpha))).pixels[:, 0]
        widths.append(fwhm(profile))
    assert widths[0] >= 4
    assert widths[1] / widths[0] == pytest.approx(2.0, rel=0.15)


def test_windowing_broadens_the_peak():
    fringe = single_reflector(256, 40)
    sharp = fwhm(reconstruct(fringe).pixels[:, 0])
    broad = fwhm(reconstruct(apply_spectral_window(fringe, centered_window(256, 8.0))).pixels[:, 0])
    assert broad > sharp


def test_fwhm_of_triangle():
    profile = np.array([0.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0, 1.0, 0.0])
    assert fwhm(profile) == pytest.approx(4.0)


def test_mean_filter_identity_and_smoothing():
    img = BScan(np.array([[0.0], [0.0], [3.0], [0.0], [0.0]]))
    same = mean_filter_vertical(img, MeanFilterSpec(1))
    assert np.array_equal(same.pixels, img.pixels)
    smoothed = mean_filter_vertical(img, MeanFilterSpec(3))
    np.testing.assert_allclose(smoothed.pixels[:, 0], [0.0, 1.0, 1.0, 1.0, 0.0])


def test_mean_filter_only_touches_depth_axis():
    img = BScan(np.tile(np.arange(5.0), (7, 1)))
    np.testing.assert_allclose(mean_filter_vertical(img, MeanFilterSpec(5)).pixels, img.pixels)


def test_mean_filter_domain_errors():
    with pytest.raises(DomainError):
        MeanFilterSpec(4)
    with pytest.raises(DomainError):
        mean_filter_vertical(BScan(np.zeros((5, 2))), MeanFilterSpec(7))


def test_coherence_lengths():
    spec = CoherenceSpec(1060.0, 100.0)
    assert coherence_length(spec) == pytest.approx(11236.0)
    sigma = (511 / 2.0) / 8.0
    fwhm_samples = 2 * np.sqrt(2 * np.log(2)) * sigma
    expected = 1060.0 ** 2 / (100.0 * fwhm_samples / 512)
    assert effective_coherence_length(spec, 512, 8.0) == pytest.approx(expected)
    assert effective_coherence_length(spec, 512, 8.0) > coherence_length(spec)
    with pytest.raises(DomainError):
        CoherenceSpec(1060.0, 0.0)
