import os
import re
from concurrent.futures import ThreadPoolExecutor
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from src.config import CONFIG_NAME, MANIFEST_NAME, RunConfig, worker_threads
from src.dataset import PairDataset, load_split
from src.errors import DataFormatError, UsageError
from src.fileio import export_pgm, load_checkpoint
from src.fringe import GENERATED, GROUND_TRUTH, WINDOWED, Fringe, reconstruct
from src.manifest import read_manifest, rows_for_split
from src.metrics import MetricReport, compare, ssim, standardize_for_eval
from src.models import build_models, load_model_state
from src.phantom import denormalize

CHECKPOINT_PATTERN = re.compile(r"^ckpt_(\d+)_([a-z_+]+)\.ckp1$")


class CheckpointFile(NamedTuple):
    step: int
    reasons: Tuple[str, ...]
    path: str


def list_checkpoints(run_dir: str) -> List[CheckpointFile]:
    found = []
    for name in os.listdir(run_dir):
        match = CHECKPOINT_PATTERN.match(name)
        if match:
            found.append(CheckpointFile(int(match.group(1)), tuple(match.group(2).split("+")),
                                        os.path.join(run_dir, name)))
    return sorted(found)


def select_checkpoint(run_dir: str) -> str:
    """Latest checkpoint saved for an i_mse improvement, else the latest one."""
    checkpoints = list_checkpoints(run_dir)
    if not checkpoints:
        raise DataFormatError(f"No ckpt_<step>_<reason>.ckp1 files in {run_dir}")
    by_mse = [c for c in checkpoints if "i_mse" in c.reasons]
    return (by_mse or checkpoints)[-1].path


# ---------------------------------------------------------------------------
# Model outputs as spatial images
# ---------------------------------------------------------------------------

def predict(generator: nn.Module, dataset: PairDataset, batch_size: int = 8,
            dtype: torch.dtype = torch.float32, count: Optional[int] = None) -> List[np.ndarray]:
    """Generator output for the first `count` (default: all) degraded samples, in inference mode."""
    total = len(dataset) if count is None else min(count, len(dataset))
    was_training = generator.training
    generator.eval()
    outputs = []
    try:
        with torch.no_grad():
            for start in range(0, total, batch_size):
                batch = torch.stack([dataset[i][0] for i in range(start, min(start + batch_size, total))])
                outputs.extend(generator(batch.to(dtype)).to(torch.float64).numpy())
    finally:
        generator.train(was_training)
    return outputs


def to_spatial(sample: np.ndarray, params, domain: str, log: bool, meta: str = GROUND_TRUTH) -> np.ndarray:
    """
    A train-normalized sample as a 2-D depth x lateral image.

    Spectral samples ([W, n_k]) are mapped back through `params` and
    Fourier-transformed as a fringe tagged `meta`; spatial samples ([1, H, W])
    only lose their channel axis.
    """
    sample = np.asarray(sample, dtype=np.float64)
    if domain == "spatial":
        return sample.reshape(sample.shape[-2:])
    fringe = Fringe(denormalize(sample, params).T, meta=meta)
    return reconstruct(fringe, log=log).pixels


def spatial_triplet(dataset: PairDataset, idx: int, generated: np.ndarray, log: bool):
    """(degraded, gt, generated) spatial images for one sample.

    The generated sample is mapped back with the degraded input's parameters,
    since the ground truth's are unknown at inference time.
    """
    degraded, gt = (t.numpy() for t in dataset[idx])
    deg_params, gt_params = dataset.params[idx]
    return (
        to_spatial(degraded, deg_params, dataset.domain, log, WINDOWED),
        to_spatial(gt, gt_params, dataset.domain, log, GROUND_TRUTH),
        to_spatial(generated, deg_params, dataset.domain, log, GENERATED),
    )


def mean_ssim(generator: nn.Module, dataset: PairDataset, config: RunConfig,
              dtype: torch.dtype = torch.float32) -> float:
    """Mean standardized SSIM(generated, GT); the validation score used during training."""
    outputs = predict(generator, dataset, config["train.batch_size"], dtype)
    p_low, p_high = config["eval.p_low"], config["eval.p_high"]
    log = config["signal.log_compress"]
    scores = []
    for idx, generated in enumerate(outputs):
        _, gt, gen = spatial_triplet(dataset, idx, generated, log)
        gt_std, _ = standardize_for_eval(gt, p_low, p_high)
        gen_std, _ = standardize_for_eval(gen, p_low, p_high)
        scores.append(ssim(gen_std, gt_std))
    return float(np.mean(scores))


def export_samples(dataset: PairDataset, idx: int, generated: np.ndarray, config: RunConfig, prefix: str):
    """Write `<prefix>_{degraded,gt,generated}.pgm`, each standardized for viewing."""
    images = spatial_triplet(dataset, idx, generated, config["signal.log_compress"])
    for name, image in zip(("degraded", "gt", "generated"), images):
        std, _ = standardize_for_eval(image, config["eval.p_low"], config["eval.p_high"])
        export_pgm(std.pixels, f"{prefix}_{name}.pgm")


# ---------------------------------------------------------------------------
# Test-set evaluation
# ---------------------------------------------------------------------------

class Evaluator:
    """Scores a trained generator on one split of a phantom dataset."""

    def __init__(self, run_dir: str, dataset_dir: str, domain: str,
                 config: Optional[RunConfig] = None, checkpoint: Optional[str] = None):
        config_path = os.path.join(run_dir, CONFIG_NAME)
        self.config = config or RunConfig.load(config_path)
        if self.config["train.domain"] != domain:
            raise UsageError(
                f"Run {run_dir} was trained in the {self.config['train.domain']} domain, not {domain}")
        self.run_dir = run_dir
        self.dataset_dir = dataset_dir
        self.domain = domain
        self.checkpoint = checkpoint or self.config["eval.checkpoint"] or select_checkpoint(run_dir)
        self.dtype = torch.float64 if self.config["train.dtype"] == "float64" else torch.float32
        self.generator = None

    def _load_generator(self, sample_shape: Sequence[int]):
        generator, _ = build_models(self.config, self.domain, tuple(sample_shape))
        tensors = load_checkpoint(self.checkpoint)
        load_model_state(generator, tensors, "generator")
        self.generator = generator.to(self.dtype)
        print(f"Loaded generator from {self.checkpoint}")

    def evaluate(self, split: str = "test") -> MetricReport:
        rows = rows_for_split(read_manifest(os.path.join(self.dataset_dir, MANIFEST_NAME)), split)
        dataset = load_split(self.dataset_dir, rows, self.config, self.domain)
        if self.generator is None:
            self._load_generator(dataset.sample_shape)

        outputs = predict(self.generator, dataset, self.config["train.batch_size"], self.dtype)
        p_low, p_high = self.config["eval.p_low"], self.config["eval.p_high"]
        scale = self.config["eval.scale"]
        log = self.config["signal.log_compress"]

        def score(idx: int):
            degraded, gt, generated = spatial_triplet(dataset, idx, outputs[idx], log)
            gt_std, gt_flat = standardize_for_eval(gt, p_low, p_high)
            gen_std, gen_flat = standardize_for_eval(generated, p_low, p_high)
            deg_std, deg_flat = standardize_for_eval(degraded, p_low, p_high)
            sample_id = dataset.ids[idx]
            return [
                compare(sample_id, "generated", gen_std, gt_std, scale, degenerate=gen_flat or gt_flat),
                compare(sample_id, "degraded", deg_std, gt_std, scale, degenerate=deg_flat or gt_flat),
            ]

        print(f"Evaluating {len(dataset)} {split} samples...")
        report = MetricReport(p_low=p_low, p_high=p_high, scale=scale)
        with ThreadPoolExecutor(max_workers=worker_threads()) as executor:
            for pair in tqdm(executor.map(score, range(len(dataset))), total=len(dataset), desc="Scoring"):
                report.rows.extend(pair)
        return report

    def write_report(self, report: MetricReport, out_dir: Optional[str] = None) -> Tuple[str, str]:
        out_dir = out_dir or self.run_dir
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "metrics.csv")
        summary_path = os.path.join(out_dir, "summary.txt")
        report.frame().to_csv(csv_path, index=False, na_rep="nan")
        with open(summary_path, "w", encoding="utf-8") as f:
            f.write(f"checkpoint: {os.path.basename(self.checkpoint)}\n")
            f.write(f"domain: {self.domain}\n")
            f.write(report.summary())
        return csv_path, summary_path


def evaluate_testset(run_dir: str, dataset_dir: str, domain: str, config: Optional[RunConfig] = None,
                     checkpoint: Optional[str] = None, out_dir: Optional[str] = None) -> MetricReport:
    evaluator = Evaluator(run_dir, dataset_dir, domain, config, checkpoint)
    report = evaluator.evaluate("test")
    csv_path, summary_path = evaluator.write_report(report, out_dir)
    print(report.summary(), end="")
    print(f"Per-image metrics: {csv_path}")
    print(f"Summary: {summary_path}")
    return report
