import copy
import math
import os

import numpy as np
import pandas as pd
import pytest
import torch

import src.evaluate as evaluate_module
import src.train as train_module
from src.autodiff import AdamState
from src.config import BASE_DIR, RunConfig
from src.errors import DataFormatError, DomainError, NumericalError, ShapeError, UsageError
from src.evaluate import Evaluator, evaluate_testset, list_checkpoints, select_checkpoint, to_spatial
from src.fileio import load_checkpoint
from src.fringe import GENERATED, GROUND_TRUTH, reconstruct
from src.models import Discriminator, DiscriminatorConfig, SRGANGenerator, SRGANGeneratorConfig
from src.phantom import NormParams
from src.processor import write_phantom
from src.train import (
    CheckpointHistory, LossReport, Trainer, bce, checkpoint_rule, content_loss, gan_step, mean_report, train_run,
)


def tiny_pair(seed=0, blocks=1, channels=4, side=16):
    torch.manual_seed(seed)
    gen = SRGANGenerator(SRGANGeneratorConfig(n_res_blocks=blocks, channels=channels))
    disc = Discriminator(DiscriminatorConfig(conv_blocks=((4, 1), (8, 2)), dense_units=8, input_shape=(side, side)))
    return gen, disc


def optimizers_for(gen, disc, lr=1e-4):
    return AdamState(gen.parameters(), lr=lr), AdamState(disc.parameters(), lr=lr)


def fixed_batch(seed=0, n=4, side=16):
    g = torch.Generator().manual_seed(seed)
    degraded = torch.rand(n, 1, side, side, generator=g) * 2 - 1
    gt = torch.rand(n, 1, side, side, generator=g) * 2 - 1
    return degraded, gt


def report(i_mse, i_gt, i_generated):
    return LossReport(step=0, epoch=0, i_mse=i_mse, i_gt=i_gt, i_generated=i_generated, g_adv=0.0)


def test_bce_examples():
    assert bce(torch.tensor([0.5]), 1.0).item() == pytest.approx(math.log(2), abs=1e-7)
    one = torch.tensor([1.0], dtype=torch.float64)
    assert bce(one, 1.0).item() == pytest.approx(1e-7, rel=1e-6)
    zero = torch.tensor([0.0], dtype=torch.float64)
    assert bce(zero, 1.0).item() == pytest.approx(-math.log(1e-7), rel=1e-9)
    assert bce(zero, 0.0).item() == pytest.approx(1e-7, rel=1e-6)
    assert bce(torch.tensor([0.5, 1.0 - 1e-7], dtype=torch.float64), 1.0).item() == pytest.approx(
        (math.log(2) + 1e-7) / 2, rel=1e-6)


def test_content_loss_examples():
    x = torch.rand(2, 3)
    assert content_loss(x, x).item() == 0.0
    assert content_loss(torch.zeros(2, 2), torch.ones(2, 2)).item() == 1.0
    assert content_loss(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 1.0])).item() == 0.5
    with pytest.raises(ShapeError):
        content_loss(torch.zeros(2, 2), torch.zeros(4))


def test_checkpoint_rule_single_triggers():
    history = CheckpointHistory(best_i_mse=0.5, best_i_gt=0.6, best_i_generated=0.6)
    save, reasons, updated = checkpoint_rule(history, report(0.4, 0.5, 0.5))
    assert save and reasons == ("i_mse",)
    assert updated.best_i_mse == 0.4 and updated.best_i_gt == 0.6

    save, reasons, _ = checkpoint_rule(history, report(0.7, 0.7, 0.5))
    assert save and reasons == ("i_gt",)

    save, reasons, same = checkpoint_rule(history, report(0.5, 0.6, 0.6))
    assert not save and reasons == () and same == history


def test_checkpoint_rule_scripted_sequence():
    sequence = [
        (1.0, 0.5, 0.5),
        (0.9, 0.4, 0.4),
        (0.95, 0.6, 0.3),
        (0.95, 0.6, 0.5),
        (0.95, 0.55, 0.7),
        (0.85, 0.7, 0.8),
        (0.85, 0.7, 0.8),
        (0.9, 0.65, 0.75),
        (0.8, 0.65, 0.75),
        (0.8, 0.71, 0.81),
    ]
    expected = [
        ("i_mse", "i_gt", "i_generated"),
        ("i_mse",),
        ("i_gt",),
        (),
        ("i_generated",),
        ("i_mse", "i_gt", "i_generated"),
        (),
        (),
        ("i_mse",),
        ("i_gt", "i_generated"),
    ]
    history = CheckpointHistory()
    for values, want in zip(sequence, expected):
        save, reasons, history = checkpoint_rule(history, report(*values))
        assert reasons == want
        assert save == bool(want)
    assert history == CheckpointHistory(best_i_mse=0.8, best_i_gt=0.71, best_i_generated=0.81)


def test_mean_report():
    reports = [LossReport(1, 1, 1.0, 2.0, 3.0, 4.0, 5.0), LossReport(2, 1, 3.0, 4.0, 5.0, 6.0, 7.0)]
    mean = mean_report(reports)
    assert (mean.step, mean.i_mse, mean.g_adv, mean.g_total) == (2, 2.0, 5.0, 6.0)
    with pytest.raises(DomainError):
        mean_report([])


def test_zero_adversarial_weight_reduces_to_content_loss():
    gen, disc = tiny_pair()
    result = gan_step(fixed_batch(), (gen, disc), optimizers_for(gen, disc), lambda_adv=0.0)
    assert result.g_total == result.i_mse
    assert result.is_finite()
    assert all(v >= 0 for v in (result.i_mse, result.i_gt, result.i_generated, result.g_adv))
    with pytest.raises(DomainError):
        gan_step(fixed_batch(), (gen, disc), optimizers_for(gen, disc), lambda_adv=-1.0)


def test_gan_step_is_deterministic_per_seed():
    runs = []
    for _ in range(2):
        gen, disc = tiny_pair(seed=3)
        opts = optimizers_for(gen, disc)
        runs.append([gan_step(fixed_batch(s), (gen, disc), opts, 1e-3, step=s) for s in range(5)])
    assert runs[0] == runs[1]


def test_zero_weight_generator_ignores_discriminator():
    gen_a, disc_a = tiny_pair(seed=0)
    gen_b = copy.deepcopy(gen_a)
    _, disc_b = tiny_pair(seed=1)
    opts_a, opts_b = optimizers_for(gen_a, disc_a), optimizers_for(gen_b, disc_b)
    noise = torch.Generator().manual_seed(7)

    for step in range(100):
        batch = fixed_batch(step)
        with torch.no_grad():
            for p in disc_b.parameters():
                p.add_(torch.randn(p.shape, generator=noise) * 0.1)
        gan_step(batch, (gen_a, disc_a), opts_a, lambda_adv=0.0)
        gan_step(batch, (gen_b, disc_b), opts_b, lambda_adv=0.0)

    for (name, a), (_, b) in zip(gen_a.state_dict().items(), gen_b.state_dict().items()):
        assert torch.equal(a, b), name


@pytest.mark.parametrize("seed", range(3))
def test_identity_task_reduces_content_loss(seed):
    gen, disc = tiny_pair(seed=seed, blocks=4, channels=8)
    opts = optimizers_for(gen, disc, lr=1e-4)
    _, gt = fixed_batch(seed, n=8)
    losses = [gan_step((gt, gt), (gen, disc), opts, lambda_adv=0.0).i_mse for _ in range(50)]
    assert losses[-1] < losses[0]
    falling = sum(b < a for a, b in zip(losses, losses[1:]))
    assert falling >= 0.9 * (len(losses) - 1)


def fresh(config):
    return RunConfig(dict(config.values))


def test_train_run_writes_run_directory(tmp_path, phantom_dir, tiny_config):
    run_dir = str(tmp_path / "run")
    assert train_run(phantom_dir, fresh(tiny_config), run_dir) == run_dir

    assert os.path.exists(os.path.join(run_dir, "config.txt"))
    losses = pd.read_csv(os.path.join(run_dir, "losses.csv"))
    assert list(losses.columns) == ["step", "epoch", "i_mse", "i_gt", "i_generated", "g_adv"]
    # 3 train eyes x 4 B-scans x (original + 1 flip copy) in batches of 4
    assert list(losses["step"]) == list(range(1, 7))
    assert np.all(np.isfinite(losses.drop(columns=["step", "epoch"]).to_numpy()))

    checkpoints = list_checkpoints(run_dir)
    assert len(checkpoints) >= 1
    assert checkpoints[0].reasons == ("i_mse", "i_gt", "i_generated")
    assert select_checkpoint(run_dir) == checkpoints[-1].path
    for name in ("degraded", "gt", "generated"):
        assert os.path.exists(os.path.join(run_dir, "samples", f"step_3_{name}.pgm"))

    replay = RunConfig.load(os.path.join(run_dir, "config.txt"))
    assert replay["seed"] == 0 and replay["train.save_dir"] == run_dir


def test_train_run_is_reproducible(tmp_path, phantom_dir, tiny_config):
    first = train_run(phantom_dir, fresh(tiny_config), str(tmp_path / "a"))
    second = train_run(phantom_dir, fresh(tiny_config), str(tmp_path / "b"))
    assert open(os.path.join(first, "losses.csv"), "rb").read() == open(os.path.join(second, "losses.csv"), "rb").read()
    ckpts_a, ckpts_b = list_checkpoints(first), list_checkpoints(second)
    assert [(c.step, c.reasons) for c in ckpts_a] == [(c.step, c.reasons) for c in ckpts_b]
    for a, b in zip(ckpts_a, ckpts_b):
        assert open(a.path, "rb").read() == open(b.path, "rb").read()


def test_trainer_startup_errors(tmp_path, phantom_dir, tiny_config):
    with pytest.raises(DataFormatError):
        Trainer(str(tmp_path / "nowhere"), fresh(tiny_config), str(tmp_path / "run"))
    too_big = fresh(tiny_config)
    too_big.set("train.batch_size", 64)
    with pytest.raises(DomainError):
        Trainer(phantom_dir, too_big, str(tmp_path / "run"))
    one = fresh(tiny_config)
    one.set("train.batch_size", 1)
    with pytest.raises(DomainError):
        Trainer(phantom_dir, one, str(tmp_path / "run"))


def test_spectral_run_warns_past_overfit_epoch(tmp_path, phantom_dir, tiny_config, monkeypatch, capsys):
    monkeypatch.setattr(train_module, "SPECTRAL_OVERFIT_EPOCH", 1)
    config = fresh(tiny_config)
    config.set("train.domain", "spectral")
    config.set("train.epochs", 2)
    run_dir = train_run(phantom_dir, config, str(tmp_path / "spectral"))
    out = capsys.readouterr().out
    assert "WARNING: spectral training continues past epoch 1" in out
    assert list_checkpoints(run_dir)


def test_non_finite_loss_dumps_state(tmp_path, phantom_dir, tiny_config, monkeypatch):
    def broken_step(batch, models, optimizers, lambda_adv, step=0, epoch=0):
        return LossReport(step, epoch, math.nan, 0.5, 0.5, 0.5, math.nan)

    monkeypatch.setattr(train_module, "gan_step", broken_step)
    run_dir = str(tmp_path / "crashed")
    with pytest.raises(NumericalError, match="step 1"):
        train_run(phantom_dir, fresh(tiny_config), run_dir)
    assert os.path.exists(os.path.join(run_dir, "crash_state.ckp1"))
    assert os.path.exists(os.path.join(run_dir, "losses.csv"))


def test_evaluate_testset_writes_report(tmp_path, phantom_dir, tiny_config):
    run_dir = train_run(phantom_dir, fresh(tiny_config), str(tmp_path / "run"))
    report = evaluate_testset(run_dir, phantom_dir, "spatial")

    metrics = pd.read_csv(os.path.join(run_dir, "metrics.csv"))
    assert list(metrics.columns) == ["id", "comparison", "mse", "nrmse", "psnr", "ssim"]
    # one test eye with four kept B-scans, two comparisons each
    assert len(metrics) == 8
    assert set(metrics["comparison"]) == {"generated", "degraded"}
    assert metrics["ssim"].between(-1, 1).all()

    agg = report.aggregate().set_index(["comparison", "metric"])
    generated = metrics[metrics["comparison"] == "generated"]
    assert agg.loc[("generated", "ssim"), "mean"] == pytest.approx(generated["ssim"].mean(), abs=1e-12)

    summary = open(os.path.join(run_dir, "summary.txt"), encoding="utf-8").read()
    assert summary.startswith("checkpoint: ckpt_")
    assert "domain: spatial" in summary

    with pytest.raises(UsageError):
        Evaluator(run_dir, phantom_dir, "spectral")


def test_evaluate_spectral_run(tmp_path, phantom_dir, tiny_config):
    config = fresh(tiny_config)
    config.set("train.domain", "spectral")
    run_dir = train_run(phantom_dir, config, str(tmp_path / "spectral"))
    report = evaluate_testset(run_dir, phantom_dir, "spectral")

    metrics = pd.read_csv(os.path.join(run_dir, "metrics.csv"))
    assert list(metrics.columns) == ["id", "comparison", "mse", "nrmse", "psnr", "ssim"]
    assert len(metrics) == 8
    assert metrics["ssim"].between(-1, 1).all()
    assert len(report.rows) == 8
    summary = open(os.path.join(run_dir, "summary.txt"), encoding="utf-8").read()
    assert "domain: spectral" in summary

    with pytest.raises(UsageError):
        Evaluator(run_dir, phantom_dir, "spatial")


def test_warm_start_loads_a_written_checkpoint(tmp_path, phantom_dir, tiny_config):
    first = train_run(phantom_dir, fresh(tiny_config), str(tmp_path / "first"))
    config = fresh(tiny_config)
    config.set("train.init_checkpoint", select_checkpoint(first))
    trainer = Trainer(phantom_dir, config, str(tmp_path / "second"))
    tensors = load_checkpoint(select_checkpoint(first))
    for name, value in trainer.generator.state_dict().items():
        assert torch.equal(value, tensors["generator." + name].to(value.dtype)), name
    for name, value in trainer.discriminator.state_dict().items():
        assert torch.equal(value, tensors["discriminator." + name].to(value.dtype)), name


def test_spectral_samples_are_reconstructed_with_their_tags(monkeypatch):
    seen = []

    def recording_reconstruct(fringe, log=False):
        seen.append(fringe.meta)
        return reconstruct(fringe, log=log)

    monkeypatch.setattr(evaluate_module, "reconstruct", recording_reconstruct)
    sample = np.random.default_rng(0).uniform(-1, 1, size=(4, 16))
    params = NormParams(mode="train", low=-2.0, high=2.0)
    image = to_spatial(sample, params, "spectral", False, GENERATED)
    assert image.shape == (8, 4)
    to_spatial(sample, params, "spectral", False)
    assert seen == [GENERATED, GROUND_TRUTH]
    assert to_spatial(sample[None], params, "spatial", False).shape == (4, 16)


def desk_trend(config_name, seed, tmp_path):
    config = RunConfig.load(os.path.join(BASE_DIR, "configs", config_name))
    config.set("seed", seed)
    data_dir = str(tmp_path / f"data_{seed}")
    write_phantom(config, data_dir)
    run_dir = train_run(data_dir, config, str(tmp_path / f"run_{seed}"))
    agg = evaluate_testset(run_dir, data_dir, config["train.domain"]).aggregate()
    return agg.set_index(["comparison", "metric"])["mean"]


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(3))
def test_desk_spatial_generator_beats_windowed_input(tmp_path, seed):
    means = desk_trend("desk_spatial.cfg", seed, tmp_path)
    assert means[("generated", "ssim")] > means[("degraded", "ssim")]
    assert means[("generated", "nrmse")] < means[("degraded", "nrmse")]


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(3))
def test_desk_spectral_generator_beats_windowed_input(tmp_path, seed):
    means = desk_trend("desk_spectral.cfg", seed, tmp_path)
    assert means[("generated", "ssim")] > means[("degraded", "ssim")]
