"""
Adversarial training: alternating discriminator / generator updates, the three
losses, the checkpoint-saving rule and run-directory bookkeeping.

Run directory:
    config.txt                                resolved configuration
    losses.csv                                step,epoch,i_mse,i_gt,i_generated,g_adv
    ckpt_<step>_<reason>.ckp1                 generator.* and discriminator.* tensors
    samples/step_<n>_{degraded,gt,generated}.pgm
"""

import math
import os
import random
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from torch.utils.data import DataLoader
from tqdm import tqdm

from src.autodiff import AdamState, adam_step
from src.config import CONFIG_NAME, MANIFEST_NAME, SPECTRAL_OVERFIT_EPOCH, RunConfig
from src.dataset import DOMAINS, PairDataset, load_split
from src.errors import DomainError, NumericalError, ShapeError
from src.evaluate import export_samples, mean_ssim, predict
from src.fileio import load_checkpoint, save_checkpoint
from src.manifest import read_manifest, rows_for_split
from src.models import build_models, load_model_state, model_state

BCE_EPS = 1e-7
LOSS_COLUMNS = ["step", "epoch", "i_mse", "i_gt", "i_generated", "g_adv"]
CHECKPOINT_MODES = ("epoch", "step")
# Validation evaluations without improvement before a spectral run past its overfit epoch stops
SPECTRAL_PATIENCE = 3


def bce(p: torch.Tensor, y: float, eps: float = BCE_EPS) -> torch.Tensor:
    """Binary cross-entropy against a constant 0/1 target, averaged over the batch."""
    p = torch.clamp(p, eps, 1.0 - eps)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


def content_loss(generated: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if generated.shape != gt.shape:
        raise ShapeError(f"content_loss: shapes {tuple(generated.shape)} and {tuple(gt.shape)} differ")
    return torch.mean((generated - gt) ** 2)


@dataclass
class LossReport:
    step: int
    epoch: int
    i_mse: float
    i_gt: float
    i_generated: float
    g_adv: float
    g_total: float = 0.0

    def row(self) -> List[float]:
        return [getattr(self, c) for c in LOSS_COLUMNS]

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.i_mse, self.i_gt, self.i_generated, self.g_adv, self.g_total))


@dataclass(frozen=True)
class CheckpointHistory:
    best_i_mse: float = math.inf
    best_i_gt: float = -math.inf
    best_i_generated: float = -math.inf


def checkpoint_rule(history: CheckpointHistory, new: LossReport) -> Tuple[bool, Tuple[str, ...], CheckpointHistory]:
    """
    Save when i_mse fell OR i_gt rose OR i_generated rose against their
    best-so-far values. Returns (save, reasons, updated history).
    """
    reasons = []
    best = asdict(history)
    if new.i_mse < history.best_i_mse:
        reasons.append("i_mse")
        best["best_i_mse"] = new.i_mse
    if new.i_gt > history.best_i_gt:
        reasons.append("i_gt")
        best["best_i_gt"] = new.i_gt
    if new.i_generated > history.best_i_generated:
        reasons.append("i_generated")
        best["best_i_generated"] = new.i_generated
    return bool(reasons), tuple(reasons), CheckpointHistory(**best)


def mean_report(reports: Iterable[LossReport]) -> LossReport:
    """Epoch summary: mean of every loss, tagged with the last step and epoch."""
    reports = list(reports)
    if not reports:
        raise DomainError("No loss reports to average")
    means = {name: float(np.mean([getattr(r, name) for r in reports]))
             for name in ("i_mse", "i_gt", "i_generated", "g_adv", "g_total")}
    return LossReport(step=reports[-1].step, epoch=reports[-1].epoch, **means)


def gan_step(batch: Tuple[torch.Tensor, torch.Tensor], models: Tuple[nn.Module, nn.Module],
             optimizers: Tuple[AdamState, AdamState], lambda_adv: float,
             step: int = 0, epoch: int = 0) -> LossReport:
    """
    One discriminator update followed by one generator update.

    The discriminator sees the ground-truth minibatch and the generated one in
    two separate passes; the generator minimizes i_mse + lambda_adv * g_adv.
    With lambda_adv == 0 the adversarial term is only measured, never
    differentiated, so the generator's update does not touch the discriminator.
    """
    if lambda_adv < 0:
        raise DomainError(f"lambda_adv must be >= 0, got {lambda_adv}")
    degraded, gt = batch
    generator, discriminator = models
    opt_g, opt_d = optimizers

    generated = generator(degraded)

    opt_d.zero_grad()
    i_gt = bce(discriminator(gt), 1.0)
    i_gt.backward()
    i_generated = bce(discriminator(generated.detach()), 0.0)
    i_generated.backward()
    adam_step(opt_d.params, None, opt_d)

    opt_g.zero_grad()
    i_mse = content_loss(generated, gt)
    if lambda_adv > 0:
        g_adv = bce(discriminator(generated), 1.0)
        g_total = i_mse + lambda_adv * g_adv
    else:
        with torch.no_grad():
            g_adv = bce(discriminator(generated.detach()), 1.0)
        g_total = i_mse
    g_total.backward()
    adam_step(opt_g.params, None, opt_g)
    # The generator pass may have left gradients on D; they belong to no update.
    opt_d.zero_grad()

    return LossReport(
        step=step, epoch=epoch,
        i_mse=i_mse.item(), i_gt=i_gt.item(), i_generated=i_generated.item(),
        g_adv=g_adv.item(), g_total=g_total.item(),
    )


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def make_optimizers(generator: nn.Module, discriminator: nn.Module, config: RunConfig) -> Tuple[AdamState, AdamState]:
    betas = dict(beta1=config["train.beta1"], beta2=config["train.beta2"])
    return (AdamState(generator.parameters(), lr=config["train.lr_g"], **betas),
            AdamState(discriminator.parameters(), lr=config["train.lr_d"], **betas))


def _check_train_config(config: RunConfig):
    if config["train.domain"] not in DOMAINS:
        raise DomainError(f"train.domain must be one of {DOMAINS}, got {config['train.domain']!r}")
    if config["train.epochs"] < 1:
        raise DomainError("train.epochs must be >= 1")
    if config["train.batch_size"] < 2:
        raise DomainError("train.batch_size must be >= 2 (batch normalization)")
    if config["train.lambda_adv"] < 0:
        raise DomainError("train.lambda_adv must be >= 0")
    if config["train.checkpoint_every"] not in CHECKPOINT_MODES:
        raise DomainError(f"train.checkpoint_every must be one of {CHECKPOINT_MODES}")
    if config["train.dtype"] not in ("float32", "float64"):
        raise DomainError("train.dtype must be float32 or float64")
    if config["train.eval_every"] < 1:
        raise DomainError("train.eval_every must be >= 1")


class Trainer:
    """Owns the models, optimizers and run directory of one training run."""

    def __init__(self, dataset_dir: str, config: RunConfig, run_dir: Optional[str] = None):
        _check_train_config(config)
        self.config = config
        self.dataset_dir = dataset_dir
        self.domain = config["train.domain"]
        self.seed = config.require_seed()
        self.run_dir = run_dir or config["train.save_dir"]
        config.set("train.dataset", dataset_dir)
        config.set("train.save_dir", self.run_dir)
        self.dtype = torch.float64 if config["train.dtype"] == "float64" else torch.float32

        rows = read_manifest(os.path.join(dataset_dir, MANIFEST_NAME))
        seed_everything(self.seed)

        print(f"Building {self.domain} training pairs from {dataset_dir}...")
        self.train_set: PairDataset = load_split(dataset_dir, rows_for_split(rows, "train"), config, self.domain,
                                                 augment_samples=True)
        val_rows = rows_for_split(rows, "val")
        self.val_set: Optional[PairDataset] = (
            load_split(dataset_dir, val_rows, config, self.domain) if val_rows else None)
        if len(self.train_set) < config["train.batch_size"]:
            raise DomainError(
                f"{len(self.train_set)} training samples cannot fill one batch of {config['train.batch_size']}")
        print(f"Training samples: {len(self.train_set)}, validation samples: "
              f"{len(self.val_set) if self.val_set else 0}, sample shape {self.train_set.sample_shape}")

        generator, discriminator = build_models(config, self.domain, self.train_set.sample_shape)
        self.generator = generator.to(self.dtype)
        self.discriminator = discriminator.to(self.dtype)
        if config["train.init_checkpoint"]:
            self.warm_start(config["train.init_checkpoint"])
        self.optimizers = make_optimizers(self.generator, self.discriminator, config)

        self.history = CheckpointHistory()
        self.losses: List[LossReport] = []
        self.saved: List[str] = []
        self.best_val = -math.inf
        self.stale_evals = 0

    def warm_start(self, path: str):
        tensors = load_checkpoint(path)
        load_model_state(self.generator, tensors, "generator")
        load_model_state(self.discriminator, tensors, "discriminator")
        print(f"Initialized both networks from {path}")

    def loader(self) -> DataLoader:
        shuffle_gen = torch.Generator()
        shuffle_gen.manual_seed(self.seed)
        return DataLoader(self.train_set, batch_size=self.config["train.batch_size"], shuffle=True,
                          drop_last=True, num_workers=0, generator=shuffle_gen)

    def save(self, report: LossReport, reasons: Tuple[str, ...]) -> str:
        path = os.path.join(self.run_dir, f"ckpt_{report.step}_{'+'.join(reasons)}.ckp1")
        save_checkpoint(path, model_state(self.generator, self.discriminator))
        self.saved.append(path)
        return path

    def consider_checkpoint(self, report: LossReport):
        save, reasons, self.history = checkpoint_rule(self.history, report)
        if save:
            path = self.save(report, reasons)
            tqdm.write(f"  step {report.step}: saved {os.path.basename(path)}")

    def crash(self, report: LossReport):
        path = os.path.join(self.run_dir, "crash_state.ckp1")
        save_checkpoint(path, model_state(self.generator, self.discriminator))
        self.write_losses()
        raise NumericalError(
            f"Non-finite loss at step {report.step} (epoch {report.epoch}): "
            f"i_mse={report.i_mse}, i_gt={report.i_gt}, i_generated={report.i_generated}, "
            f"g_adv={report.g_adv}. Model state dumped to {path}")

    def write_losses(self):
        frame = pd.DataFrame([r.row() for r in self.losses], columns=LOSS_COLUMNS)
        frame.to_csv(os.path.join(self.run_dir, "losses.csv"), index=False)

    def validate(self, step: int, epoch: int) -> bool:
        """Export sample images and score the validation split. Returns True to stop early."""
        samples_dir = os.path.join(self.run_dir, "samples")
        os.makedirs(samples_dir, exist_ok=True)
        preview_set = self.val_set or self.train_set
        generated = predict(self.generator, preview_set, dtype=self.dtype, count=1)[0]
        export_samples(preview_set, 0, generated, self.config, os.path.join(samples_dir, f"step_{step}"))

        if self.val_set is None:
            return False
        score = mean_ssim(self.generator, self.val_set, self.config, self.dtype)
        tqdm.write(f"  step {step}: validation SSIM {score:.4f}")
        if score > self.best_val:
            self.best_val, self.stale_evals = score, 0
            return False
        self.stale_evals += 1

        patience = self.config["train.patience"]
        if not patience and self.domain == "spectral" and epoch > SPECTRAL_OVERFIT_EPOCH:
            patience = SPECTRAL_PATIENCE
        if patience and self.stale_evals >= patience:
            tqdm.write(f"  Early stop: no validation improvement in {self.stale_evals} evaluations")
            return True
        return False

    def run(self) -> str:
        config = self.config
        os.makedirs(self.run_dir, exist_ok=True)
        config.save(os.path.join(self.run_dir, CONFIG_NAME))

        epochs, max_steps = config["train.epochs"], config["train.max_steps"]
        eval_every, lambda_adv = config["train.eval_every"], config["train.lambda_adv"]
        per_step = config["train.checkpoint_every"] == "step"
        loader = self.loader()

        print(f"Training {self.domain} models for {epochs} epochs "
              f"({len(loader)} steps/epoch, batch {config['train.batch_size']}) -> {self.run_dir}")
        self.generator.train()
        self.discriminator.train()

        step, stop, warned = 0, False, False
        for epoch in range(1, epochs + 1):
            if self.domain == "spectral" and epoch > SPECTRAL_OVERFIT_EPOCH and not warned:
                tqdm.write("=" * 60)
                tqdm.write(f"WARNING: spectral training continues past epoch {SPECTRAL_OVERFIT_EPOCH}; "
                           "expect overfitting artifacts. Validation monitoring is active.")
                tqdm.write("=" * 60)
                warned = True

            epoch_reports = []
            for degraded, gt in tqdm(loader, desc=f"Epoch {epoch}/{epochs}"):
                step += 1
                batch = (degraded.to(self.dtype), gt.to(self.dtype))
                report = gan_step(batch, (self.generator, self.discriminator), self.optimizers,
                                  lambda_adv, step=step, epoch=epoch)
                if not report.is_finite():
                    self.crash(report)
                self.losses.append(report)
                epoch_reports.append(report)

                if per_step:
                    self.consider_checkpoint(report)
                if step % eval_every == 0 and self.validate(step, epoch):
                    stop = True
                if stop or (max_steps and step >= max_steps):
                    stop = True
                    break

            if not per_step and epoch_reports:
                self.consider_checkpoint(mean_report(epoch_reports))
            if stop:
                break

        self.write_losses()
        print("=" * 60)
        print(f"Finished after {step} steps; {len(self.saved)} checkpoint(s) saved")
        if self.losses:
            last = self.losses[-1]
            print(f"Last step: i_mse={last.i_mse:.6f} i_gt={last.i_gt:.6f} "
                  f"i_generated={last.i_generated:.6f} g_adv={last.g_adv:.6f}")
        print(f"Run directory: {self.run_dir}")
        print("=" * 60)
        return self.run_dir


def train_run(dataset_dir: str, config: RunConfig, run_dir: Optional[str] = None) -> str:
    return Trainer(dataset_dir, config, run_dir).run()
