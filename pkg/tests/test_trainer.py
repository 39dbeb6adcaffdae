"""Training loop contracts: schedule derivation, joint stepping, divergence
handling, deterministic logs, and epoch-checkpoint resume."""

import math
import warnings

import numpy as np
import pytest
import torch

from conftest import tiny_model_config
from dfinet.data import SyntheticSpec, generate_synthetic
from dfinet.errors import ConfigError, TrainingDiverged
from dfinet.losses import task_loss, total_loss
from dfinet.model import build_model, load_checkpoint
from dfinet.tasks import TASKS
from dfinet.trainer import (
    GRAD_ACCUMULATION,
    TrainConfig,
    build_optimizer,
    epoch_schedule,
    normalize_image,
    overfit_smoke,
    predict_samples,
    run,
    train_step,
)


def quick_config(**kw):
    base = dict(learning_rate=1e-3, weight_decay=0.0, epochs=1,
                lr_drop_epoch=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def fresh_model(seed=0, **kw):
    torch.manual_seed(seed)
    return build_model(tiny_model_config(**kw))


def batch_from(samples, config, tasks=TASKS, index=0):
    from dfinet.data import image_tensor, target_tensor

    out = {}
    for t in tasks:
        s = samples[index]
        out[t] = (normalize_image(image_tensor(s), config), target_tensor(s, t))
    return out


# --- configuration -----------------------------------------------------------


def test_config_defaults():
    cfg = TrainConfig()
    assert cfg.learning_rate == 5e-5
    assert cfg.weight_decay == 5e-4
    assert cfg.epochs == 12
    assert cfg.lr_drop_epoch == 9
    assert cfg.lr_drop_factor == 10.0
    assert cfg.batch_size == 1
    assert cfg.grad_accumulation == GRAD_ACCUMULATION
    assert cfg.normalize_mean == (0.5, 0.5, 0.5)
    assert cfg.normalize_std == (0.5, 0.5, 0.5)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="sgd").validate()
    with pytest.raises(ConfigError):
        TrainConfig(grad_accumulation="summed").validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()


def test_learning_rate_schedule():
    cfg = TrainConfig(learning_rate=5e-5, epochs=12, lr_drop_epoch=9,
                      lr_drop_factor=10.0)
    assert cfg.learning_rate_at(0) == 5e-5
    assert cfg.learning_rate_at(8) == 5e-5
    assert cfg.learning_rate_at(9) == 5e-6
    assert cfg.learning_rate_at(10) == 5e-6
    assert cfg.learning_rate_at(11) == 5e-6


def test_normalize_image_values():
    cfg = quick_config()
    x = torch.zeros(1, 3, 2, 2)
    assert torch.all(normalize_image(x, cfg) == -1.0)
    y = torch.ones(1, 3, 2, 2)
    assert torch.all(normalize_image(y, cfg) == 1.0)


def test_optimizer_decay_groups():
    model = fresh_model()
    cfg = quick_config(weight_decay=5e-4)
    opt = build_optimizer(model, cfg)
    assert isinstance(opt, torch.optim.Adam)
    decayed, plain = opt.param_groups
    assert decayed["weight_decay"] == 5e-4
    assert plain["weight_decay"] == 0.0
    assert all(p.ndim >= 2 for p in decayed["params"])
    assert all(p.ndim < 2 for p in plain["params"])
    n_total = sum(p.numel() for p in model.parameters())
    n_groups = sum(p.numel() for g in opt.param_groups for p in g["params"])
    assert n_groups == n_total


# --- epoch schedule --------------------------------------------------------------


def test_epoch_length_covers_largest_dataset():
    steps, schedule = epoch_schedule({"saliency": 8, "edge": 4, "skeleton": 6},
                                     seed=0, epoch=0)
    assert steps == 8
    for task, idx in schedule.items():
        assert idx.shape == (8, 1)
    # the largest dataset is visited exactly once per epoch
    assert sorted(schedule["saliency"].ravel().tolist()) == list(range(8))
    # smaller ones are resampled with replacement within range
    assert set(schedule["edge"].ravel().tolist()) <= set(range(4))


def test_epoch_schedule_batches_round_up():
    steps, schedule = epoch_schedule({"edge": 10}, seed=0, epoch=0, batch_size=4)
    assert steps == math.ceil(10 / 4)
    assert schedule["edge"].shape == (3, 4)


def test_epoch_schedule_depends_only_on_seed_and_epoch():
    a = epoch_schedule({"saliency": 8, "edge": 3}, seed=7, epoch=2)
    b = epoch_schedule({"saliency": 8, "edge": 3}, seed=7, epoch=2)
    c = epoch_schedule({"saliency": 8, "edge": 3}, seed=7, epoch=3)
    for task in a[1]:
        assert np.array_equal(a[1][task], b[1][task])
    assert any(not np.array_equal(a[1][t], c[1][t]) for t in a[1])


def test_epoch_schedule_rejects_empty():
    with pytest.raises(ConfigError):
        epoch_schedule({}, seed=0, epoch=0)


# --- joint step --------------------------------------------------------------------


def test_train_step_updates_once_and_reports_losses(synth_samples):
    model = fresh_model()
    cfg = quick_config()
    opt = build_optimizer(model, cfg)
    batch = batch_from(synth_samples, cfg)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        losses = train_step(model, opt, batch)
    assert set(losses) == set(TASKS)
    assert all(v > 0 for v in losses.values())
    changed = sum(not torch.equal(before[n], p.detach())
                  for n, p in model.named_parameters())
    assert changed > 0


def test_train_step_accumulates_like_a_summed_loss(synth_samples):
    # sequential per-task backward must agree with one backward of the sum
    cfg = quick_config()
    model_a = fresh_model().double()
    model_b = fresh_model().double()
    for (na, pa), (nb, pb) in zip(model_a.named_parameters(),
                                  model_b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    batch = {
        t: (img.double(), tgt.double())
        for t, (img, tgt) in batch_from(synth_samples, cfg).items()
    }
    opt_a = build_optimizer(model_a, quick_config(learning_rate=1e-30))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        train_step(model_a, opt_a, batch)
        parts = {}
        for t in TASKS:
            image, target = batch[t]
            probs = torch.sigmoid(model_b(image, t))
            parts[t] = task_loss(t, probs, target)
        total_loss(parts).backward()
    for (na, pa), (nb, pb) in zip(model_a.named_parameters(),
                                  model_b.named_parameters()):
        ga = torch.zeros_like(pa) if pa.grad is None else pa.grad
        gb = torch.zeros_like(pb) if pb.grad is None else pb.grad
        scale = gb.abs().max().clamp(min=1.0)
        assert torch.max(torch.abs(ga - gb) / scale).item() < 1e-10, na


def test_train_step_rejects_unknown_task(synth_samples):
    model = fresh_model()
    cfg = quick_config()
    opt = build_optimizer(model, cfg)
    batch = batch_from(synth_samples, cfg)
    batch["depth"] = batch["edge"]
    with pytest.raises(ConfigError, match="unknown tasks"):
        train_step(model, opt, batch)


def test_train_step_raises_on_nonfinite_loss(synth_samples):
    model = fresh_model()
    cfg = quick_config()
    opt = build_optimizer(model, cfg)
    with torch.no_grad():
        model.heads["saliency"].weight.fill_(float("nan"))
    batch = batch_from(synth_samples, cfg)
    with pytest.raises(TrainingDiverged, match="saliency loss at step 3"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            train_step(model, opt, batch, step=3)


# --- full runs -----------------------------------------------------------------------


def two_epoch_setup(tmp_path, tag, seed=0):
    samples = generate_synthetic(SyntheticSpec(count=2, height=32, width=32, seed=9))
    datasets = {t: samples for t in TASKS}
    model = fresh_model(seed=seed)
    cfg = quick_config(epochs=2, seed=4)
    out = tmp_path / tag
    return model, cfg, datasets, out


def test_run_writes_log_and_checkpoints(tmp_path):
    model, cfg, datasets, out = two_epoch_setup(tmp_path, "a")
    state = run(model, cfg, datasets, out)
    assert (out / "epoch_000.ckpt").exists()
    assert (out / "epoch_001.ckpt").exists()
    assert state.epoch == 1
    assert state.step == 4
    assert state.checkpoint_path == str(out / "epoch_001.ckpt")
    lines = (out / "train_log.csv").read_text().splitlines()
    assert lines[0] == "step,epoch,lr,loss_saliency,loss_edge,loss_skeleton"
    assert len(lines) == 5
    first = lines[1].split(",")
    assert first[0] == "1" and first[1] == "0"
    assert first[2] == f"{cfg.learning_rate:.10e}"
    assert set(state.running_loss) == set(TASKS)


def test_same_seed_runs_are_byte_identical(tmp_path):
    model_a, cfg, datasets, out_a = two_epoch_setup(tmp_path, "a")
    run(model_a, cfg, datasets, out_a)
    model_b, _, _, out_b = two_epoch_setup(tmp_path, "b")
    run(model_b, cfg, datasets, out_b)
    assert (out_a / "train_log.csv").read_bytes() == (out_b / "train_log.csv").read_bytes()
    assert (out_a / "epoch_001.ckpt").read_bytes() == (out_b / "epoch_001.ckpt").read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path):
    model_a, cfg, datasets, out_a = two_epoch_setup(tmp_path, "full")
    run(model_a, cfg, datasets, out_a)

    model_b, _, _, out_b = two_epoch_setup(tmp_path, "split")
    first_half = quick_config(epochs=1, seed=4)
    run(model_b, first_half, datasets, out_b)
    model_c, _, _, _ = two_epoch_setup(tmp_path, "unused", seed=123)
    state = run(model_c, cfg, datasets, out_b,
                resume_from=out_b / "epoch_000.ckpt")
    assert state.epoch == 1
    assert (out_a / "epoch_001.ckpt").read_bytes() == (out_b / "epoch_001.ckpt").read_bytes()
    assert (out_a / "train_log.csv").read_bytes() == (out_b / "train_log.csv").read_bytes()


def test_run_checkpoint_carries_optimizer_state(tmp_path):
    model, cfg, datasets, out = two_epoch_setup(tmp_path, "a")
    run(model, cfg, datasets, out)
    ckpt = load_checkpoint(out / "epoch_000.ckpt")
    names = set(ckpt.arrays)
    some_param = next(n for n, _ in model.named_parameters())
    assert f"optim.{some_param}.exp_avg" in names
    assert f"optim.{some_param}.exp_avg_sq" in names
    assert float(ckpt.arrays[f"optim.{some_param}.step"]) == 2.0
    assert ckpt.meta["epoch"] == 0 and ckpt.meta["seed"] == 4


def test_run_rejects_bad_datasets(tmp_path):
    model, cfg, _, out = two_epoch_setup(tmp_path, "a")
    with pytest.raises(ConfigError):
        run(model, cfg, {}, out)
    with pytest.raises(ConfigError):
        run(model, cfg, {"edge": []}, out)


def test_run_rejects_disabled_task(tmp_path, synth_samples):
    model = fresh_model(tasks=("edge",))
    cfg = quick_config()
    with pytest.raises(ConfigError, match="not enabled"):
        run(model, cfg, {"saliency": list(synth_samples)}, tmp_path / "x")


# --- smoke training and prediction -----------------------------------------------


def test_overfit_smoke_reduces_loss(synth_samples):
    model = fresh_model()
    datasets = {t: list(synth_samples[:2]) for t in TASKS}
    cfg = quick_config(learning_rate=2e-3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        start = overfit_smoke(model, datasets, steps=0, config=cfg)
        final = overfit_smoke(model, datasets, steps=120, config=cfg)
    for task in TASKS:
        assert final[task] < start[task]


def test_overfit_smoke_rejects_large_datasets(synth_samples):
    model = fresh_model()
    datasets = {"edge": list(synth_samples) + list(synth_samples)}
    with pytest.raises(ConfigError, match="1..8 samples"):
        overfit_smoke(model, datasets, steps=1)


def test_predict_samples_shapes(synth_samples):
    model = fresh_model()
    preds = predict_samples(model, list(synth_samples[:2]), "edge", quick_config())
    assert len(preds) == 2
    for p in preds:
        assert p.shape == (32, 32)
        assert p.dtype == np.float32
        assert 0.0 <= p.min() and p.max() <= 1.0
