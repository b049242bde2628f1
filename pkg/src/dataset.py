import os
from typing import List, Tuple

import numpy as np
import torch
from torch.utils.data import Dataset

from src.config import RunConfig
from src.errors import DomainError
from src.fileio import read_oct1
from src.fringe import (
    Fringe, MeanFilterSpec, apply_spectral_window, centered_window, mean_filter_vertical, reconstruct,
)
from src.manifest import ManifestRow, resolve_path
from src.phantom import (
    AugmentSpec, NormParams, augment, crop_axial, eye_rng, normalize, select_every_kth, to_strips,
)

DOMAINS = ("spatial", "spectral")
AUGMENT_STREAM = 1


def augment_spec(config: RunConfig) -> AugmentSpec:
    return AugmentSpec(
        h_flip=config["augment.h_flip"],
        v_flip=config["augment.v_flip"],
        window_center_jitter=config["augment.center_jitter"],
        window_alpha_range=(config["augment.alpha_min"], config["augment.alpha_max"]),
    )


class PairDataset(Dataset):
    """
    Paired (degraded, ground-truth) samples for one split, built once at
    construction time; augmentation happens here and never per step.

    Spatial samples are [1, H, W] B-scans, spectral samples are [W, n_k]
    fringes (one row per A-scan). Both halves of a pair are train-normalized
    to [-1, 1] independently; `params[i]` keeps their inverse maps.
    """

    def __init__(self, dataset_dir: str, rows: List[ManifestRow], config: RunConfig,
                 domain: str, augment_samples: bool = False):
        if domain not in DOMAINS:
            raise DomainError(f"Unknown domain: {domain}")
        self.domain = domain
        self.config = config
        self.augment_samples = augment_samples
        self.aug_spec = augment_spec(config)
        self.seed = config.require_seed()

        self.samples: List[Tuple[np.ndarray, np.ndarray]] = []
        self.params: List[Tuple[NormParams, NormParams]] = []
        self.ids: List[str] = []

        for row in rows:
            volume = read_oct1(resolve_path(dataset_dir, row))
            if volume.ndim != 3:
                raise DomainError(f"{row.path}: expected a [n_bscans, n_k, W] volume, got shape {volume.shape}")
            rng = eye_rng(self.seed, row.eye_id, stream=AUGMENT_STREAM)
            kept = select_every_kth(list(range(volume.shape[0])), config["data.select_every"])
            for b in kept:
                fringe = Fringe(volume[b].astype(np.float64))
                sample_id = f"{row.eye_id}_b{b:04d}"
                if domain == "spectral":
                    self._add_spectral(sample_id, fringe, rng)
                else:
                    self._add_spatial(sample_id, fringe, rng)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, idx):
        degraded, gt = self.samples[idx]
        return torch.from_numpy(degraded), torch.from_numpy(gt)

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        if not self.samples:
            raise DomainError("Dataset is empty")
        return self.samples[0][1].shape

    def _append(self, sample_id: str, degraded: np.ndarray, gt: np.ndarray):
        deg_img, deg_params = normalize(degraded, "train")
        gt_img, gt_params = normalize(gt, "train")
        if self.domain == "spectral":
            pair = (deg_img.pixels.T, gt_img.pixels.T)
        else:
            pair = (deg_img.pixels[None], gt_img.pixels[None])
        self.samples.append(tuple(np.ascontiguousarray(p, dtype=np.float32) for p in pair))
        self.params.append((deg_params, gt_params))
        self.ids.append(sample_id)

    def _add_spectral(self, sample_id: str, fringe: Fringe, rng: np.random.Generator):
        window = centered_window(fringe.n_k, self.config["signal.alpha"])
        self._append(sample_id, apply_spectral_window(fringe, window).samples, fringe.samples)
        if self.augment_samples:
            for copy in range(self.config["data.augment_copies"]):
                windowed, _ = augment(fringe, self.aug_spec, rng)
                self._append(f"{sample_id}_a{copy}", windowed.samples, fringe.samples)

    def _add_spatial(self, sample_id: str, fringe: Fringe, rng: np.random.Generator):
        log = self.config["signal.log_compress"]
        gt = reconstruct(fringe, log=log)
        mode = self.config["signal.degrade"]
        if mode == "window":
            window = centered_window(fringe.n_k, self.config["signal.alpha"])
            degraded = reconstruct(apply_spectral_window(fringe, window), log=log)
        elif mode == "mean":
            degraded = mean_filter_vertical(gt, MeanFilterSpec(self.config["signal.mean_filter_n"]))
        else:
            raise DomainError(f"Unknown degradation mode: {mode}")

        height = self.config["data.crop_height"]
        if height:
            top = self.config["data.crop_top"]
            gt, degraded = crop_axial(gt, top, height), crop_axial(degraded, top, height)

        strip_width = self.config["data.strip_width"]
        if strip_width:
            pairs = list(zip(to_strips(degraded, strip_width), to_strips(gt, strip_width)))
        else:
            pairs = [(degraded, gt)]

        for s, (deg, ref) in enumerate(pairs):
            pair_id = f"{sample_id}_s{s:02d}" if strip_width else sample_id
            self._append(pair_id, deg.pixels, ref.pixels)
            if self.augment_samples:
                for copy in range(self.config["data.augment_copies"]):
                    deg_aug, ref_aug = augment((deg, ref), self.aug_spec, rng)
                    self._append(f"{pair_id}_a{copy}", deg_aug.pixels, ref_aug.pixels)


def load_split(dataset_dir: str, rows: List[ManifestRow], config: RunConfig, domain: str,
               augment_samples: bool = False) -> PairDataset:
    if not rows:
        raise DomainError(f"No eyes in this split of {os.path.abspath(dataset_dir)}")
    dataset = PairDataset(dataset_dir, rows, config, domain, augment_samples)
    if not len(dataset):
        raise DomainError("Split produced no samples (check data.select_every)")
    return dataset
