"""
OCT spectral-domain physics.

A fringe is the real-valued spectral interferogram of a B-scan, laid out as
[n_k wavenumber samples x W A-scans]. Its per-column Fourier magnitude is the
depth profile (A-scan). Narrowing the spectral bandwidth is simulated by
multiplying the fringe with a Gaussian window (MATLAB `gausswin` convention),
which broadens the axial point-spread function of every reflector.

The spatial-domain counterpart of that degradation is a vertical 1xn mean filter
applied to the reconstructed B-scan.
"""

from dataclasses import dataclass

import numpy as np
from scipy.fft import fft
from scipy.ndimage import uniform_filter1d
from scipy.signal.windows import gaussian

from src.errors import DomainError, ShapeError

# Fringe provenance tags
GROUND_TRUTH = "ground-truth"
WINDOWED = "windowed"
GENERATED = "generated"
FRINGE_TAGS = (GROUND_TRUTH, WINDOWED, GENERATED)

# BScan value domains
LINEAR = "linear-magnitude"
LOG = "log-compressed"
UNIT = "unit-normalized"
TRAIN = "train-normalized"
VALUE_DOMAINS = (LINEAR, LOG, UNIT, TRAIN)

LOG_EPS = 1e-12
RANGE_TOL = 1e-9


def _as_float_2d(array, name: str) -> np.ndarray:
    array = np.asarray(array)
    if not np.issubdtype(array.dtype, np.floating):
        array = array.astype(np.float64)
    if array.ndim == 1:
        array = array[:, None]
    if array.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise DomainError(f"{name} contains non-finite values")
    return array


@dataclass
class Fringe:
    """Spectral interferogram [n_k x W]; 1-D input is treated as a single A-scan."""
    samples: np.ndarray
    meta: str = GROUND_TRUTH

    def __post_init__(self):
        self.samples = _as_float_2d(self.samples, "Fringe samples")
        if self.samples.shape[0] < 2:
            raise DomainError(f"Fringe needs n_k >= 2, got {self.samples.shape[0]}")
        if self.meta not in FRINGE_TAGS:
            raise DomainError(f"Unknown fringe tag: {self.meta}")

    @property
    def n_k(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]


@dataclass
class BScan:
    """Spatial image [H depth x W lateral]."""
    pixels: np.ndarray
    value_domain: str = LINEAR

    def __post_init__(self):
        self.pixels = _as_float_2d(self.pixels, "BScan pixels")
        if self.value_domain not in VALUE_DOMAINS:
            raise DomainError(f"Unknown value domain: {self.value_domain}")
        low, high = {UNIT: (0.0, 1.0), TRAIN: (-1.0, 1.0)}.get(self.value_domain, (None, None))
        if low is not None and self.pixels.size:
            if self.pixels.min() < low - RANGE_TOL or self.pixels.max() > high + RANGE_TOL:
                raise DomainError(f"{self.value_domain} pixels must lie in [{low}, {high}]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class WindowSpec:
    """Gaussian spectral window. `center` is a real sample index so that the
    centered window of an even-length fringe, (n_k - 1) / 2, is representable."""
    alpha: float
    center: float
    n_k: int

    def __post_init__(self):
        if not self.alpha > 0:
            raise DomainError(f"Window alpha must be > 0, got {self.alpha}")
        if self.n_k < 2:
            raise DomainError(f"Window length must be >= 2, got {self.n_k}")
        if not 0 <= self.center < self.n_k:
            raise DomainError(f"Window center {self.center} outside [0, {self.n_k})")

    @property
    def sigma_k(self) -> float:
        return ((self.n_k - 1) / 2.0) / self.alpha


@dataclass(frozen=True)
class MeanFilterSpec:
    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1 or self.n % 2 == 0:
            raise DomainError(f"Mean filter length must be an odd positive integer, got {self.n}")


@dataclass(frozen=True)
class CoherenceSpec:
    lambda0: float
    delta_lambda: float

    def __post_init__(self):
        if not (self.lambda0 > 0 and self.delta_lambda > 0):
            raise DomainError("Central wavelength and bandwidth must both be > 0")


def centered_window(n_k: int, alpha: float) -> WindowSpec:
    return WindowSpec(alpha=alpha, center=(n_k - 1) / 2.0, n_k=n_k)


def coherence_length(spec: CoherenceSpec) -> float:
    """Axial resolution l_c = lambda0^2 / delta_lambda, in the units of lambda0."""
    if not (spec.lambda0 > 0 and spec.delta_lambda > 0):
        raise DomainError("Central wavelength and bandwidth must both be > 0")
    return spec.lambda0 ** 2 / spec.delta_lambda


def effective_coherence_length(spec: CoherenceSpec, n_k: int, alpha: float) -> float:
    """
    Coherence length after Gaussian windowing with `alpha`.

    The full bandwidth is taken to span the n_k samples; the windowed spectrum's
    FWHM (capped at the full band) is the effective bandwidth.
    """
    window = centered_window(n_k, alpha)
    fwhm_samples = min(2.0 * np.sqrt(2.0 * np.log(2.0)) * window.sigma_k, float(n_k))
    narrowed = CoherenceSpec(spec.lambda0, spec.delta_lambda * fwhm_samples / n_k)
    return coherence_length(narrowed)


def gausswin(n_k: int, alpha: float) -> np.ndarray:
    """MATLAB gausswin: w(n) = exp(-1/2 (alpha n / ((n_k - 1) / 2))^2), |n| <= (n_k - 1) / 2."""
    if n_k < 1:
        raise DomainError(f"Window length must be >= 1, got {n_k}")
    if not alpha > 0:
        raise DomainError(f"Window alpha must be > 0, got {alpha}")
    if n_k == 1:
        return np.ones(1)
    return gaussian(n_k, std=(n_k - 1) / (2.0 * alpha), sym=True)


def window_mask(spec: WindowSpec) -> np.ndarray:
    k = np.arange(spec.n_k, dtype=np.float64)
    return np.exp(-0.5 * ((k - spec.center) / spec.sigma_k) ** 2)


def apply_spectral_window(f: Fringe, w: WindowSpec) -> Fringe:
    if w.n_k != f.n_k:
        raise ShapeError(f"Window length {w.n_k} does not match fringe length {f.n_k}")
    return Fringe(f.samples * window_mask(w)[:, None], meta=WINDOWED)


def log_compress(magnitude: np.ndarray, eps: float = LOG_EPS) -> np.ndarray:
    return 20.0 * np.log10(magnitude + eps)


def reconstruct(f: Fringe, log: bool = False) -> BScan:
    """Per-column DFT magnitude, positive depths only (first n_k // 2 bins)."""
    magnitude = np.abs(fft(f.samples, axis=0))[: f.n_k // 2]
    if log:
        return BScan(log_compress(magnitude), value_domain=LOG)
    return BScan(magnitude, value_domain=LINEAR)


def mean_filter_vertical(img: BScan, spec: MeanFilterSpec) -> BScan:
    """1xn vertical mean filter with replicate padding; lateral direction untouched."""
    if spec.n > img.height:
        raise DomainError(f"Filter length {spec.n} exceeds image height {img.height}")
    if spec.n == 1:
        return BScan(img.pixels.copy(), value_domain=img.value_domain)
    smoothed = uniform_filter1d(img.pixels.astype(np.float64), size=spec.n, axis=0, mode="nearest")
    return BScan(smoothed, value_domain=img.value_domain)


def fwhm(profile: np.ndarray) -> float:
    """
    Full width at half maximum of the highest peak, in samples.

    Crossings are located by linear interpolation on either side of the argmax;
    a side that never drops below half max is measured to the array edge.
    """
    profile = np.asarray(profile, dtype=np.float64)
    peak = int(np.argmax(profile))
    half = profile[peak] / 2.0

    left = 0.0
    for i in range(peak, 0, -1):
        if profile[i - 1] < half:
            left = (i - 1) + (half - profile[i - 1]) / (profile[i] - profile[i - 1])
            break

    right = float(len(profile) - 1)
    for i in range(peak, len(profile) - 1):
        if profile[i + 1] < half:
            right = i + (profile[i] - half) / (profile[i] - profile[i + 1])
            break

    return right - left
