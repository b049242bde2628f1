"""
Synthetic layered-retina phantoms and the data-pipeline rules applied to them:
patient-disjoint splits, every-kth B-scan sampling, axial cropping, A-scan
strips, normalization and augmentation.
"""

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from src.errors import DomainError, ShapeError
from src.fringe import (
    BScan, Fringe, TRAIN, UNIT, WindowSpec, apply_spectral_window, gausswin,
)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class PhantomSpec:
    n_layers: int = 1
    layer_depths: Tuple[float, ...] = (0.25,)
    layer_reflectivities: Tuple[float, ...] = (1.0,)
    speckle_density: int = 0
    noise_sigma: float = 0.0
    n_k: int = 256
    width: int = 8
    n_bscans_per_eye: int = 4
    seed: int = 0
    envelope_alpha: float = 1.0
    speckle_reflectivity: float = 0.15
    layer_tilt: float = 0.0

    def __post_init__(self):
        depths = tuple(self.layer_depths)
        refl = tuple(self.layer_reflectivities)
        if self.n_layers != len(depths) or self.n_layers != len(refl):
            raise DomainError(
                f"n_layers={self.n_layers} but got {len(depths)} depths and {len(refl)} reflectivities")
        if any(not 0 < d < 1 for d in depths):
            raise DomainError("Layer depths must lie in (0, 1)")
        if any(b <= a for a, b in zip(depths, depths[1:])):
            raise DomainError("Layer depths must be strictly increasing")
        if any(r <= 0 for r in refl):
            raise DomainError("Layer reflectivities must be > 0")
        if self.n_k < 2 or self.n_k & (self.n_k - 1):
            raise DomainError(f"n_k must be a power of two, got {self.n_k}")
        if self.width < 1 or self.n_bscans_per_eye < 1:
            raise DomainError("width and n_bscans_per_eye must be >= 1")
        if self.speckle_density < 0 or self.noise_sigma < 0 or self.envelope_alpha < 0:
            raise DomainError("speckle_density, noise_sigma and envelope_alpha must be >= 0")
        if self.speckle_density and self.speckle_reflectivity <= 0:
            raise DomainError("speckle_reflectivity must be > 0 when speckle is enabled")


@dataclass
class EyeRecord:
    patient_id: str
    eye_id: str
    volume: List[Fringe] = field(default_factory=list)

    def __post_init__(self):
        shapes = {f.samples.shape for f in self.volume}
        if len(shapes) > 1:
            raise ShapeError(f"Eye {self.eye_id} mixes fringe shapes {sorted(shapes)}")

    def as_array(self) -> np.ndarray:
        """Volume as [n_bscans, n_k, W]."""
        return np.stack([f.samples for f in self.volume])


@dataclass(frozen=True)
class SplitAssignment:
    train: frozenset
    val: frozenset
    test: frozenset
    ratios: Tuple[float, float, float] = (0.6, 0.2, 0.2)

    def split_of(self, eye_id: str) -> str:
        for name in SPLITS:
            if eye_id in getattr(self, name):
                return name
        raise KeyError(eye_id)


@dataclass(frozen=True)
class AugmentSpec:
    h_flip: bool = True
    v_flip: bool = True
    window_center_jitter: float = 0.0
    window_alpha_range: Tuple[float, float] = (8.0, 8.0)

    def __post_init__(self):
        low, high = self.window_alpha_range
        if not 0 < low <= high:
            raise DomainError(f"Invalid alpha range {self.window_alpha_range}")
        if self.window_center_jitter < 0:
            raise DomainError("Center jitter must be >= 0")


@dataclass(frozen=True)
class NormParams:
    low: float
    high: float
    mode: str
    degenerate: bool = False


def eye_rng(seed: int, eye_id: str, stream: int = 0) -> np.random.Generator:
    """Independent stream per (eye, purpose), so results do not depend on worker count."""
    return np.random.default_rng([seed, zlib.crc32(eye_id.encode("utf-8")), stream])


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------

def _reflectors(spec: PhantomSpec, rng: np.random.Generator, tilt_phase: float, scan_index: int):
    """Per-A-scan reflector depths (fractions), amplitudes and phases, each [n_refl, W]."""
    lateral = np.arange(spec.width) / spec.width
    depths, amps = [], []

    if spec.n_layers:
        drift = spec.layer_tilt * np.sin(2 * np.pi * lateral + tilt_phase + 0.05 * scan_index)
        for depth, refl in zip(spec.layer_depths, spec.layer_reflectivities):
            depths.append(np.clip(depth + drift, 1e-3, 1 - 1e-3))
            amps.append(np.full(spec.width, float(refl)))

    if spec.speckle_density:
        if spec.n_layers:
            low = max(0.02, spec.layer_depths[0] - 0.05)
            high = min(0.98, spec.layer_depths[-1] + 0.10)
        else:
            low, high = 0.05, 0.95
        shape = (spec.speckle_density, spec.width)
        depths.extend(rng.uniform(low, high, size=shape))
        amps.extend(rng.exponential(spec.speckle_reflectivity, size=shape))

    if not depths:
        empty = np.zeros((0, spec.width))
        return empty, empty, empty
    depths = np.vstack(depths)
    amps = np.vstack(amps)
    phases = rng.uniform(0, 2 * np.pi, size=depths.shape)
    return depths, amps, phases


def generate_eye(spec: PhantomSpec, patient_id: str, eye_id: str) -> EyeRecord:
    """
    Synthesize one eye volume.

    Each A-scan fringe is a sum of cosines, one per reflector at frequency
    depth * n_k / 2, times a broad source envelope, plus Gaussian detector noise.
    Deterministic for a fixed (spec.seed, eye_id).
    """
    rng = eye_rng(spec.seed, eye_id)
    k = np.arange(spec.n_k, dtype=np.float64)
    envelope = gausswin(spec.n_k, spec.envelope_alpha) if spec.envelope_alpha > 0 else np.ones(spec.n_k)
    tilt_phase = rng.uniform(0, 2 * np.pi)

    volume = []
    for b in range(spec.n_bscans_per_eye):
        depths, amps, phases = _reflectors(spec, rng, tilt_phase, b)
        freqs = depths * spec.n_k / 2.0
        arg = 2 * np.pi * k[:, None, None] * freqs[None] / spec.n_k + phases[None]
        samples = np.einsum("krw,rw->kw", np.cos(arg), amps) if len(depths) else np.zeros((spec.n_k, spec.width))
        samples = samples * envelope[:, None]
        if spec.noise_sigma > 0:
            samples = samples + rng.normal(0.0, spec.noise_sigma, size=samples.shape)
        volume.append(Fringe(samples))
    return EyeRecord(patient_id=patient_id, eye_id=eye_id, volume=volume)


def patient_layout(n_eyes: int, n_patients: int) -> List[Tuple[str, str]]:
    """(patient_id, eye_id) pairs: every patient gets one eye, the first
    n_eyes - n_patients patients get a second one."""
    if not 1 <= n_patients <= n_eyes <= 2 * n_patients:
        raise DomainError(f"Cannot lay out {n_eyes} eyes over {n_patients} patients (1 or 2 eyes each)")
    layout = []
    for p in range(n_patients):
        patient = f"P{p:03d}"
        layout.append((patient, f"{patient}_OD"))
        if p < n_eyes - n_patients:
            layout.append((patient, f"{patient}_OS"))
    return layout


def generate_dataset(spec: PhantomSpec, n_eyes: int, n_patients: int, num_workers: int = 4) -> List[EyeRecord]:
    layout = patient_layout(n_eyes, n_patients)
    eyes: List[Optional[EyeRecord]] = [None] * len(layout)

    with ThreadPoolExecutor(max_workers=max(1, num_workers)) as executor:
        futures = {executor.submit(generate_eye, spec, patient, eye): i for i, (patient, eye) in enumerate(layout)}
        with tqdm(total=len(futures), desc="Generating eyes", unit="eye") as pbar:
            for future in futures:
                eyes[futures[future]] = future.result()
                pbar.update(1)
    return eyes


# ---------------------------------------------------------------------------
# Splits and sampling
# ---------------------------------------------------------------------------

def _largest_remainder(total: int, ratios: Sequence[float]) -> List[int]:
    quotas = [r * total for r in ratios]
    counts = [int(np.floor(q + 1e-9)) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    # Ties go to the earlier split.
    order = sorted(range(len(ratios)), key=lambda i: (-remainders[i], i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _split_counts(sizes: Sequence[int], targets: Sequence[int], active: Sequence[bool]) -> List[int]:
    """
    Split index for each patient group (in the order given) such that every
    active split is non-empty, inactive splits stay empty, and the per-split eye
    counts are as close as possible to `targets` in L1 distance.

    Exact search over reachable (train, val, occupied-splits) states; among equally
    close assignments the one found first in group order wins.
    """
    full = sum(1 << i for i in range(3) if active[i])
    layers: List[Dict[Tuple[int, int, int], Optional[Tuple[Tuple[int, int, int], int]]]] = [{(0, 0, 0): None}]
    for size in sizes:
        reached = {}
        for a, b, mask in layers[-1]:
            for split in range(3):
                if not active[split]:
                    continue
                key = (a + size * (split == 0), b + size * (split == 1), mask | (1 << split))
                if key not in reached:
                    reached[key] = ((a, b, mask), split)
        layers.append(reached)

    total = sum(sizes)
    finals = [key for key in layers[-1] if key[2] == full]
    best = min(finals, key=lambda key: abs(key[0] - targets[0]) + abs(key[1] - targets[1])
               + abs(total - key[0] - key[1] - targets[2]))

    choices = [0] * len(sizes)
    key = best
    for depth in range(len(sizes), 0, -1):
        key, choices[depth - 1] = layers[depth][key]
    return choices


def split_by_patient(eyes: Sequence[EyeRecord], ratios=(0.6, 0.2, 0.2), seed: int = 0) -> SplitAssignment:
    """
    Patient-disjoint train/val/test partition.

    Target eye counts come from largest-remainder rounding of the ratios. Patient
    groups are shuffled with `seed` and assigned whole, so that every split with a
    positive ratio gets at least one patient and the eye counts land as close to the
    targets as the group sizes allow.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DomainError(f"Split ratios must be three non-negative values summing to 1, got {ratios}")

    groups: Dict[str, List[str]] = {}
    for eye in eyes:
        groups.setdefault(eye.patient_id, []).append(eye.eye_id)
    active = [r > 0 for r in ratios]
    if len(groups) < sum(active):
        raise DomainError(f"{len(groups)} patients cannot fill {sum(active)} splits")

    targets = _largest_remainder(len(eyes), ratios)

    patients = sorted(groups)
    rng = np.random.default_rng(seed)
    shuffled = [patients[i] for i in rng.permutation(len(patients))]
    choices = _split_counts([len(groups[p]) for p in shuffled], targets, active)

    assigned: List[List[str]] = [[], [], []]
    for patient, split in zip(shuffled, choices):
        assigned[split].extend(groups[patient])

    return SplitAssignment(
        train=frozenset(assigned[0]), val=frozenset(assigned[1]), test=frozenset(assigned[2]), ratios=ratios,
    )


def select_every_kth(volume: Sequence, k: int = 8) -> list:
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    return list(volume[::k])


# ---------------------------------------------------------------------------
# Image transforms
# ---------------------------------------------------------------------------

def crop_axial(img: BScan, top: int, height: int) -> BScan:
    if top < 0 or height < 1 or top + height > img.height:
        raise ShapeError(f"Crop rows [{top}, {top + height}) outside image height {img.height}")
    return BScan(img.pixels[top:top + height], value_domain=img.value_domain)


def to_strips(img: BScan, strip_width: int = 20) -> List[BScan]:
    if strip_width < 1 or img.width % strip_width:
        raise DomainError(f"Width {img.width} is not divisible by strip width {strip_width}")
    return [
        BScan(img.pixels[:, j:j + strip_width], value_domain=img.value_domain)
        for j in range(0, img.width, strip_width)
    ]


def concat_strips(strips: Sequence[BScan]) -> BScan:
    if not strips:
        raise DomainError("No strips to concatenate")
    return BScan(np.concatenate([s.pixels for s in strips], axis=1), value_domain=strips[0].value_domain)


def _pixels(img) -> np.ndarray:
    if isinstance(img, BScan):
        return img.pixels
    if isinstance(img, Fringe):
        return img.samples
    return np.asarray(img, dtype=np.float64)


def normalize(img, mode: str = "train") -> Tuple[BScan, NormParams]:
    """
    Affine map of [min, max] onto [-1, 1] (train) or [0, 1] (eval).

    Accepts a BScan, a Fringe or a bare array. A constant or non-finite input
    maps to all zeros and is flagged degenerate.
    """
    if mode not in ("train", "eval"):
        raise DomainError(f"Unknown normalization mode: {mode}")
    pixels = _pixels(img)
    value_domain = TRAIN if mode == "train" else UNIT
    low, high = float(np.min(pixels)), float(np.max(pixels))

    if not (np.isfinite(low) and np.isfinite(high) and high > low):
        return BScan(np.zeros_like(pixels, dtype=np.float64), value_domain), NormParams(low, high, mode, True)

    unit = (pixels - low) / (high - low)
    out = 2.0 * unit - 1.0 if mode == "train" else unit
    return BScan(out, value_domain), NormParams(low, high, mode)


def denormalize(img, params: NormParams) -> np.ndarray:
    """Inverse of `normalize`; degenerate inputs come back as their constant value."""
    pixels = _pixels(img)
    if params.degenerate:
        return np.full_like(pixels, params.low, dtype=np.float64)
    unit = (pixels + 1.0) / 2.0 if params.mode == "train" else pixels
    return unit * (params.high - params.low) + params.low


def flip(array: np.ndarray, horizontal: bool = False, vertical: bool = False) -> np.ndarray:
    """Flip the last two axes of an image array (lateral = last, depth = second to last)."""
    if horizontal:
        array = np.flip(array, axis=-1)
    if vertical:
        array = np.flip(array, axis=-2)
    return np.ascontiguousarray(array)


def augment(sample: Union[Fringe, Sequence], spec: AugmentSpec, rng: np.random.Generator):
    """
    Preprocessing-time augmentation.

    Spectral mode (a Fringe): draws a center offset in [-jitter, jitter] and an alpha in
    the configured range and returns (windowed fringe, WindowSpec).
    Spatial mode (a sequence of paired images): independent 50% horizontal and
    vertical flips applied identically to every image of the pair.
    """
    if isinstance(sample, Fringe):
        half = (sample.n_k - 1) / 2.0
        if spec.window_center_jitter > half:
            raise DomainError(f"Center jitter {spec.window_center_jitter} leaves the fringe of length {sample.n_k}")
        offset = rng.uniform(-spec.window_center_jitter, spec.window_center_jitter)
        alpha = rng.uniform(*spec.window_alpha_range)
        window = WindowSpec(alpha=float(alpha), center=min(half + offset, sample.n_k - 1), n_k=sample.n_k)
        return apply_spectral_window(sample, window), window

    do_h = spec.h_flip and rng.random() < 0.5
    do_v = spec.v_flip and rng.random() < 0.5
    flipped = []
    for item in sample:
        if isinstance(item, BScan):
            flipped.append(BScan(flip(item.pixels, do_h, do_v), value_domain=item.value_domain))
        else:
            flipped.append(flip(np.asarray(item), do_h, do_v))
    return flipped
