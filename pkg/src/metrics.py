"""
Image-quality metrics (MSE, NRMSE, PSNR, SSIM) and the standardization applied
identically to every image before comparison.
"""

import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
import pandas as pd
from skimage.metrics import (
    mean_squared_error, normalized_root_mse, peak_signal_noise_ratio, structural_similarity,
)

from src.errors import DomainError, ShapeError
from src.fringe import BScan, UNIT

SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
METRICS = ("mse", "nrmse", "psnr", "ssim")
COMPARISONS = ("generated", "degraded")


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, BScan) else np.asarray(img, dtype=np.float64)


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"Metric inputs differ in shape: {a.shape} vs {b.shape}")


def standardize_for_eval(img, p_low: float = 1.0, p_high: float = 99.0) -> Tuple[BScan, bool]:
    """
    Clip to the [p_low, p_high] percentiles, then map affinely onto [0, 1].

    Returns (image, degenerate); a constant image comes back as zeros with
    degenerate=True.
    """
    if not 0 <= p_low < p_high <= 100:
        raise DomainError(f"Percentiles must satisfy 0 <= p_low < p_high <= 100, got {p_low}, {p_high}")
    pixels = _pixels(img)
    if not np.all(np.isfinite(pixels)):
        raise DomainError("Cannot standardize an image with non-finite pixels")

    low, high = np.percentile(pixels, [p_low, p_high])
    if high <= low:
        return BScan(np.zeros_like(pixels, dtype=np.float64), UNIT), True
    unit = (np.clip(pixels, low, high) - low) / (high - low)
    return BScan(np.clip(unit, 0.0, 1.0), UNIT), False


def mse(a, b) -> float:
    a, b = _pixels(a), _pixels(b)
    _check_pair(a, b)
    return float(mean_squared_error(b, a))


def nrmse(a, b) -> float:
    """RMSE normalized by the dynamic range of the reference `b`; NaN when that range is zero."""
    a, b = _pixels(a), _pixels(b)
    _check_pair(a, b)
    if np.max(b) <= np.min(b):
        return math.nan
    return float(normalized_root_mse(b, a, normalization="min-max"))


def psnr_from_mse(value: float, data_range: float = 1.0) -> float:
    if value == 0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / value)


def psnr(a, b, data_range: float = 1.0) -> float:
    a, b = _pixels(a), _pixels(b)
    _check_pair(a, b)
    if mse(a, b) == 0:
        return math.inf
    return float(peak_signal_noise_ratio(b, a, data_range=data_range))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean of the local SSIM map over 11x11 Gaussian windows (sigma 1.5), valid region only."""
    a, b = _pixels(a), _pixels(b)
    _check_pair(a, b)
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise DomainError(f"SSIM needs 2-D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    return float(structural_similarity(
        a, b, data_range=data_range, gaussian_weights=True, sigma=SSIM_SIGMA, use_sample_covariance=False,
    ))


@dataclass
class MetricRow:
    id: str
    comparison: str
    mse: float
    nrmse: float
    psnr: float
    ssim: float
    degenerate: bool = False


def compare(sample_id: str, comparison: str, image, reference, scale: int = 1,
            degenerate: bool = False) -> MetricRow:
    """
    All four metrics of one standardized image against its standardized reference.

    `degenerate` carries the standardization flags of either input; a constant
    reference is flagged regardless.
    """
    if scale not in (1, 255):
        raise DomainError(f"Reporting scale must be 1 or 255, got {scale}")
    a, b = _pixels(image) * scale, _pixels(reference) * scale
    value = mse(a, b)
    degenerate = bool(degenerate or np.max(b) <= np.min(b))
    return MetricRow(
        id=sample_id,
        comparison=comparison,
        mse=value,
        nrmse=nrmse(a, b),
        psnr=psnr_from_mse(value, float(scale)),
        ssim=ssim(a, b, data_range=float(scale)),
        degenerate=degenerate,
    )


@dataclass
class MetricReport:
    rows: List[MetricRow] = field(default_factory=list)
    p_low: float = 1.0
    p_high: float = 99.0
    scale: int = 1

    def frame(self) -> pd.DataFrame:
        """Per-image rows ordered by (id, comparison), so aggregates do not depend on arrival order."""
        columns = ["id", "comparison", *METRICS]
        df = pd.DataFrame([[getattr(r, c) for c in columns] for r in self.rows], columns=columns)
        return df.sort_values(["id", "comparison"], kind="mergesort").reset_index(drop=True)

    def aggregate(self) -> pd.DataFrame:
        """
        Mean and population std per (comparison, metric), plus the number of
        rows left out: infinite PSNR and undefined NRMSE.
        """
        df = self.frame()
        records = []
        for comparison in COMPARISONS:
            part = df[df["comparison"] == comparison]
            if part.empty:
                continue
            for metric in METRICS:
                values = part[metric].to_numpy(dtype=np.float64)
                finite = values[np.isfinite(values)]
                records.append({
                    "comparison": comparison,
                    "metric": metric,
                    "mean": float(np.mean(finite)) if finite.size else math.nan,
                    "std": float(np.std(finite)) if finite.size else math.nan,
                    "excluded": int(values.size - finite.size),
                })
        return pd.DataFrame.from_records(records, columns=["comparison", "metric", "mean", "std", "excluded"])

    def summary(self) -> str:
        """Table-style block: mean (std) per metric per comparison, best value starred."""
        agg = self.aggregate()
        header = (f"Standardization: percentile clip [{self.p_low:g}, {self.p_high:g}] -> [0, 1], "
                  f"reporting scale {self.scale}")
        lines = ["=" * 60, header, "=" * 60, f"{'':<12}" + "".join(f"{c:>24}" for c in COMPARISONS)]

        footnotes = []
        for metric in METRICS:
            cells = {}
            for comparison in COMPARISONS:
                hit = agg[(agg["comparison"] == comparison) & (agg["metric"] == metric)]
                cells[comparison] = hit.iloc[0] if len(hit) else None
            best = _best_comparison(metric, cells)
            row = f"{metric.upper():<12}"
            for comparison in COMPARISONS:
                cell = cells[comparison]
                if cell is None:
                    row += f"{'-':>24}"
                    continue
                text = f"{cell['mean']:.4f} ({cell['std']:.4f})" + ("*" if comparison == best else " ")
                row += f"{text:>24}"
                if cell["excluded"]:
                    footnotes.append(f"{metric}/{comparison}: {int(cell['excluded'])} non-finite value(s) excluded")
            lines.append(row)

        lines.append("-" * 60)
        lines.append("* best value; mean (population std) over test images")
        lines.extend(footnotes)
        flagged = sorted({r.id for r in self.rows if r.degenerate})
        if flagged:
            lines.append(f"degenerate standardization (constant image) in {len(flagged)} sample(s): {', '.join(flagged)}")
        lines.append("=" * 60)
        return "\n".join(lines) + "\n"


def _best_comparison(metric: str, cells) -> str:
    """Lower is better for mse/nrmse, higher for psnr/ssim."""
    scored = [(c, cell["mean"]) for c, cell in cells.items() if cell is not None and np.isfinite(cell["mean"])]
    if not scored:
        return ""
    pick = max if metric in ("psnr", "ssim") else min
    return pick(scored, key=lambda item: item[1])[0]
