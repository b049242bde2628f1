import os
from typing import List, Optional, Tuple

import numpy as np

from src.config import CONFIG_NAME, MANIFEST_NAME, RunConfig, worker_threads
from src.errors import DomainError, ShapeError
from src.fileio import read_oct1, write_oct1
from src.fringe import (
    BScan, Fringe, LINEAR, MeanFilterSpec, WindowSpec, apply_spectral_window, centered_window, fwhm,
    mean_filter_vertical, reconstruct,
)
from src.manifest import ManifestRow, write_manifest
from src.phantom import PhantomSpec, generate_dataset, split_by_patient

EYES_DIR = "eyes"
DEGRADE_MODES = ("spectral", "spatial")


def phantom_spec(config: RunConfig) -> PhantomSpec:
    depths = config["phantom.layer_depths"]
    return PhantomSpec(
        n_layers=len(depths),
        layer_depths=depths,
        layer_reflectivities=config["phantom.layer_reflectivities"],
        speckle_density=config["phantom.speckle_density"],
        noise_sigma=config["phantom.noise_sigma"],
        n_k=config["phantom.n_k"],
        width=config["phantom.width"],
        n_bscans_per_eye=config["phantom.n_bscans_per_eye"],
        seed=config.require_seed(),
        envelope_alpha=config["phantom.envelope_alpha"],
        speckle_reflectivity=config["phantom.speckle_reflectivity"],
        layer_tilt=config["phantom.layer_tilt"],
    )


def write_phantom(config: RunConfig, out_dir: Optional[str] = None) -> List[ManifestRow]:
    """
    Generate the phantom eyes, split them by patient and write
    `eyes/<eye_id>.oct1` ([n_bscans, n_k, W] float32), `manifest.tsv` and
    `config.txt` under out_dir.
    """
    out_dir = out_dir or config["phantom.out_dir"]
    spec = phantom_spec(config)
    config.set("phantom.out_dir", out_dir)

    eyes = generate_dataset(spec, config["phantom.n_eyes"], config["phantom.n_patients"],
                            num_workers=worker_threads())
    assignment = split_by_patient(eyes, config["phantom.split_ratios"], seed=spec.seed)

    os.makedirs(os.path.join(out_dir, EYES_DIR), exist_ok=True)
    rows = []
    for eye in eyes:
        rel_path = os.path.join(EYES_DIR, f"{eye.eye_id}.oct1")
        write_oct1(os.path.join(out_dir, rel_path), eye.as_array())
        rows.append(ManifestRow(eye.patient_id, eye.eye_id, assignment.split_of(eye.eye_id), rel_path))
    write_manifest(os.path.join(out_dir, MANIFEST_NAME), rows)
    config.save(os.path.join(out_dir, CONFIG_NAME))

    print("=" * 60)
    print(f"Phantom dataset: {out_dir}")
    print(f"Eyes: {len(eyes)} from {config['phantom.n_patients']} patients, "
          f"{spec.n_bscans_per_eye} B-scans of {spec.n_k} x {spec.width} each")
    for split in ("train", "val", "test"):
        print(f"  {split:<6}{len(getattr(assignment, split)):>4} eyes")
    print("=" * 60)
    return rows


def mean_peak_fwhm(fringes: np.ndarray) -> float:
    """Mean FWHM (depth pixels) of the brightest reflector over every A-scan of [..., n_k, W] fringes."""
    widths = []
    for fringe in fringes.reshape(-1, *fringes.shape[-2:]):
        magnitude = reconstruct(Fringe(fringe)).pixels
        # Skip the DC bin so the envelope's offset is never taken for a reflector.
        widths.extend(fwhm(magnitude[1:, j]) for j in range(magnitude.shape[1]))
    return float(np.mean(widths))


def degrade_array(array: np.ndarray, mode: str, config: RunConfig,
                  center: Optional[float] = None) -> np.ndarray:
    """
    Apply one degradation operator to a single image or a stack of them.

    spectral: Gaussian window (signal.alpha, optional center) on [n_k, W] fringes.
    spatial: 1 x n vertical mean filter (signal.mean_filter_n) on [H, W] B-scans.
    """
    if mode not in DEGRADE_MODES:
        raise DomainError(f"Degradation mode must be one of {DEGRADE_MODES}, got {mode!r}")
    array = np.asarray(array, dtype=np.float64)
    if array.ndim not in (2, 3):
        raise ShapeError(f"Expected a 2-D image or a 3-D stack, got shape {array.shape}")
    stack = array.reshape(-1, *array.shape[-2:])

    out = []
    for image in stack:
        if mode == "spectral":
            n_k = image.shape[0]
            window = (centered_window(n_k, config["signal.alpha"]) if center is None
                      else WindowSpec(alpha=config["signal.alpha"], center=center, n_k=n_k))
            out.append(apply_spectral_window(Fringe(image), window).samples)
        else:
            spec = MeanFilterSpec(config["signal.mean_filter_n"])
            out.append(mean_filter_vertical(BScan(image, LINEAR), spec).pixels)
    return np.stack(out).reshape(array.shape)


def degrade_file(in_path: str, out_path: str, mode: str, config: RunConfig,
                 center: Optional[float] = None) -> Optional[Tuple[float, float]]:
    """Degrade an OCT1 file; spectral mode returns (GT, degraded) mean peak FWHM."""
    array = read_oct1(in_path)
    degraded = degrade_array(array, mode, config, center)
    write_oct1(out_path, degraded)
    print(f"Wrote {mode}-degraded {degraded.shape} array to {out_path}")
    if mode == "spectral":
        return mean_peak_fwhm(array.astype(np.float64)), mean_peak_fwhm(degraded)
    return None
