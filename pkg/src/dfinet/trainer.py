"""Joint training loop.

Each step draws one image-groundtruth pair per enabled task, runs the tasks
in the fixed order (saliency, edge, skeleton), backpropagates each loss as it
is computed, and takes a single optimizer step on the accumulated gradients.
An epoch is as long as the largest task dataset; smaller datasets are
resampled with replacement. The per-epoch sample schedule is derived from
(seed, epoch) alone, so a run resumed from an epoch checkpoint replays the
exact sequence the uninterrupted run would have seen.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from dfinet.data import Sample, image_tensor, target_tensor
from dfinet.errors import ConfigError, TrainingDiverged
from dfinet.losses import DEFAULT_LOSS_CONFIG, LossConfig, task_loss
from dfinet.model import MultiTaskNet, load_checkpoint, load_model_state, save_checkpoint
from dfinet.tasks import TASKS

# the only supported accumulation policy; kept in the config echo
GRAD_ACCUMULATION = "sequential per-task backward, single step"


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    weight_decay: float = 5e-4
    epochs: int = 12
    lr_drop_epoch: int = 9
    lr_drop_factor: float = 10.0
    seed: int = 0
    optimizer: str = "adam"
    grad_accumulation: str = GRAD_ACCUMULATION
    batch_size: int = 1
    normalize_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    normalize_std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def validate(self) -> "TrainConfig":
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate: must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay: must be >= 0, got {self.weight_decay}")
        if self.epochs < 1:
            raise ConfigError(f"epochs: must be >= 1, got {self.epochs}")
        if not 0 <= self.lr_drop_epoch <= self.epochs:
            raise ConfigError(
                f"lr_drop_epoch: must be within [0, {self.epochs}], got {self.lr_drop_epoch}"
            )
        if not self.lr_drop_factor > 0:
            raise ConfigError(f"lr_drop_factor: must be > 0, got {self.lr_drop_factor}")
        if self.optimizer != "adam":
            raise ConfigError(f"optimizer: only 'adam' is supported, got {self.optimizer!r}")
        if self.grad_accumulation != GRAD_ACCUMULATION:
            raise ConfigError(
                f"grad_accumulation: only {GRAD_ACCUMULATION!r} is supported"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if len(self.normalize_mean) != 3 or len(self.normalize_std) != 3:
            raise ConfigError("normalize_mean/normalize_std: need 3 channel constants")
        if any(s <= 0 for s in self.normalize_std):
            raise ConfigError(f"normalize_std: must be positive, got {self.normalize_std}")
        return self

    def learning_rate_at(self, epoch: int) -> float:
        if epoch >= self.lr_drop_epoch:
            return self.learning_rate / self.lr_drop_factor
        return self.learning_rate


@dataclass
class TrainState:
    step: int = 0
    epoch: int = -1
    seed: int = 0
    running_loss: dict[str, float] = field(default_factory=dict)
    checkpoint_path: str | None = None


def normalize_image(image: torch.Tensor, config: TrainConfig) -> torch.Tensor:
    mean = torch.tensor(config.normalize_mean, dtype=image.dtype).view(1, -1, 1, 1)
    std = torch.tensor(config.normalize_std, dtype=image.dtype).view(1, -1, 1, 1)
    return (image - mean) / std


def build_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    """Adam with weight decay on matrix-shaped weights only.

    Normalization scales and every bias are 1-D (or scalar) and stay
    decay-free; conv and linear weights have ndim >= 2 and decay.
    """
    decayed = [p for p in model.parameters() if p.ndim >= 2]
    plain = [p for p in model.parameters() if p.ndim < 2]
    groups = [
        {"params": decayed, "weight_decay": config.weight_decay},
        {"params": plain, "weight_decay": 0.0},
    ]
    return torch.optim.Adam(groups, lr=config.learning_rate)


def train_step(model: MultiTaskNet, optimizer: torch.optim.Optimizer,
               batch: dict[str, tuple[torch.Tensor, torch.Tensor]],
               step: int = 0,
               loss_config: LossConfig = DEFAULT_LOSS_CONFIG) -> dict[str, float]:
    """One joint step: per-task sequential backward, then a single update."""
    order = [t for t in TASKS if t in batch]
    if len(order) != len(batch):
        unknown = sorted(set(batch) - set(TASKS))
        raise ConfigError(f"batch contains unknown tasks: {unknown}")
    optimizer.zero_grad(set_to_none=True)
    losses = {}
    for task in order:
        image, target = batch[task]
        probs = torch.sigmoid(model(image, task))
        loss = task_loss(task, probs, target, loss_config)
        if not bool(torch.isfinite(loss)):
            raise TrainingDiverged(f"non-finite {task} loss at step {step}")
        loss.backward()
        losses[task] = float(loss.detach())
    optimizer.step()
    return losses


def epoch_schedule(sizes: dict[str, int], seed: int, epoch: int,
                   batch_size: int = 1) -> tuple[int, dict[str, np.ndarray]]:
    """Sample indices for one epoch, derived from (seed, epoch) alone.

    Epoch length covers the largest dataset once; with batch size 1 the
    largest dataset is visited as a permutation, smaller ones are resampled
    with replacement.
    """
    if not sizes:
        raise ConfigError("no task datasets given")
    largest = max(sizes.values())
    steps = math.ceil(largest / batch_size)
    rng = np.random.default_rng(np.random.SeedSequence((seed, epoch)))
    schedule = {}
    for task in [t for t in TASKS if t in sizes]:
        n = sizes[task]
        if n == largest and batch_size == 1:
            schedule[task] = rng.permutation(n).reshape(steps, 1)
        else:
            schedule[task] = rng.integers(0, n, size=(steps, batch_size))
    return steps, schedule


def _batch_tensors(samples: list[Sample], indices, task: str, config: TrainConfig):
    images = torch.cat([image_tensor(samples[i]) for i in indices])
    targets = torch.cat([target_tensor(samples[i], task) for i in indices])
    return normalize_image(images, config), targets


# --- optimizer state in checkpoints -----------------------------------------


def _optimizer_arrays(optimizer, model) -> dict[str, np.ndarray]:
    name_of = {id(p): n for n, p in model.named_parameters()}
    arrays = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = name_of[id(p)]
            arrays[f"optim.{name}.exp_avg"] = state["exp_avg"].detach().numpy()
            arrays[f"optim.{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().numpy()
            arrays[f"optim.{name}.step"] = np.float32(state["step"]).reshape(())
    return arrays


def _restore_optimizer(optimizer, model, arrays: dict[str, np.ndarray]):
    for name, p in model.named_parameters():
        key = f"optim.{name}.exp_avg"
        if key not in arrays:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(arrays[f"optim.{name}.step"])),
            "exp_avg": torch.from_numpy(arrays[key].copy()).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(arrays[f"optim.{name}.exp_avg_sq"].copy()).to(p.dtype),
        }


def _log_line(step, epoch, lr, losses, order):
    cells = [str(step), str(epoch), f"{lr:.10e}"]
    cells += [f"{losses[t]:.10e}" for t in order]
    return ",".join(cells) + "\n"


def run(model: MultiTaskNet, config: TrainConfig, datasets: dict[str, list[Sample]],
        out_dir, *, config_echo: dict | None = None,
        loss_config: LossConfig = DEFAULT_LOSS_CONFIG,
        resume_from=None) -> TrainState:
    """Train for config.epochs epochs, checkpointing after each one.

    `datasets` maps each trained task to its sample list; tasks must be
    enabled in the model. `resume_from` takes an epoch checkpoint from the
    same configuration and continues after the epoch it recorded.
    """
    config.validate()
    if not datasets:
        raise ConfigError("no task datasets given")
    for task, samples in datasets.items():
        if task not in model.config.tasks:
            raise ConfigError(f"task {task!r} is not enabled in the model")
        if not samples:
            raise ConfigError(f"dataset for task {task!r} is empty")
    order = [t for t in TASKS if t in datasets]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    optimizer = build_optimizer(model, config)
    start_epoch = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        load_model_state(model, ckpt)
        _restore_optimizer(optimizer, model, ckpt.arrays)
        start_epoch = int(ckpt.meta["epoch"]) + 1

    sizes = {t: len(s) for t, s in datasets.items()}
    log_path = out_dir / "train_log.csv"
    mode = "a" if (resume_from is not None and log_path.exists()) else "w"
    state = TrainState(seed=config.seed)
    with open(log_path, mode) as log:
        if mode == "w":
            log.write(",".join(["step", "epoch", "lr"] + [f"loss_{t}" for t in order]) + "\n")
        for epoch in range(start_epoch, config.epochs):
            lr = config.learning_rate_at(epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            steps, schedule = epoch_schedule(sizes, config.seed, epoch, config.batch_size)
            sums = {t: 0.0 for t in order}
            for local in range(steps):
                batch = {
                    t: _batch_tensors(datasets[t], schedule[t][local], t, config)
                    for t in order
                }
                global_step = epoch * steps + local + 1
                losses = train_step(model, optimizer, batch, step=global_step,
                                    loss_config=loss_config)
                for t in order:
                    sums[t] += losses[t]
                log.write(_log_line(global_step, epoch, lr, losses, order))
            state.step = (epoch + 1) * steps
            state.epoch = epoch
            state.running_loss = {t: sums[t] / steps for t in order}
            path = out_dir / f"epoch_{epoch:03d}.ckpt"
            save_checkpoint(
                path, model,
                config=config_echo,
                step=state.step, epoch=epoch, seed=config.seed,
                extra_arrays=_optimizer_arrays(optimizer, model),
            )
            state.checkpoint_path = str(path)
    return state


def overfit_smoke(model: MultiTaskNet, datasets: dict[str, list[Sample]],
                  steps: int, config: TrainConfig | None = None,
                  loss_config: LossConfig = DEFAULT_LOSS_CONFIG) -> dict[str, float]:
    """Drive a tiny dataset to low loss; returns final per-pixel mean losses.

    Samples cycle round-robin. The final losses come from a no-grad pass over
    the full tiny dataset after training, normalized per pixel so the numbers
    are comparable across canvas sizes and tasks.
    """
    if config is None:
        config = TrainConfig(learning_rate=2e-3, weight_decay=0.0,
                             epochs=1, lr_drop_epoch=1)
    config.validate()
    if not datasets:
        raise ConfigError("no task datasets given")
    for task, samples in datasets.items():
        if not 1 <= len(samples) <= 8:
            raise ConfigError(f"overfit_smoke wants 1..8 samples per task, "
                              f"got {len(samples)} for {task!r}")
    order = [t for t in TASKS if t in datasets]
    optimizer = build_optimizer(model, config)
    pairs = {
        t: [(normalize_image(image_tensor(s), config), target_tensor(s, t))
            for s in datasets[t]]
        for t in order
    }
    for step in range(steps):
        batch = {t: pairs[t][step % len(pairs[t])] for t in order}
        train_step(model, optimizer, batch, step=step, loss_config=loss_config)

    final = {}
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for t in order:
            total = 0.0
            pixels = 0
            for image, target in pairs[t]:
                probs = torch.sigmoid(model(image, t))
                total += float(task_loss(t, probs, target, loss_config))
                pixels += target.numel()
            final[t] = total / pixels
    if was_training:
        model.train()
    return final


def predict_samples(model: MultiTaskNet, samples: list[Sample], task: str,
                    config: TrainConfig) -> list[np.ndarray]:
    """Probability maps for a sample list, as (H, W) float arrays."""
    was_training = model.training
    model.eval()
    preds = []
    with torch.no_grad():
        for sample in samples:
            image = normalize_image(image_tensor(sample), config)
            preds.append(model.predict(image, task)[0, 0].numpy())
    if was_training:
        model.train()
    return preds
