"""Training losses, defined on probability maps.

Saliency uses plain sum-reduced binary cross entropy. Edge and skeleton maps
are dominated by background, so they use the class-balanced variant where the
positive term is weighted by the fraction of negatives in that image and vice
versa. Both reduce by sum; probabilities are clamped away from {0, 1} before
the log, and soft groundtruths are binarized first.
"""

import warnings
from dataclasses import dataclass

import torch

from dfinet.errors import ConfigError
from dfinet.tasks import check_task


@dataclass
class LossConfig:
    epsilon: float = 1e-7
    binarize_threshold: float = 0.5

    def validate(self) -> "LossConfig":
        if not 0 < self.epsilon < 1e-3:
            raise ConfigError(f"epsilon: must be in (0, 1e-3), got {self.epsilon}")
        if not 0 < self.binarize_threshold < 1:
            raise ConfigError(
                f"binarize_threshold: must be in (0, 1), got {self.binarize_threshold}"
            )
        return self


DEFAULT_LOSS_CONFIG = LossConfig()


def _prepare(pred: torch.Tensor, gt: torch.Tensor, config: LossConfig):
    if pred.shape != gt.shape:
        raise ConfigError(f"pred {tuple(pred.shape)} and gt {tuple(gt.shape)} differ in shape")
    y = (gt > config.binarize_threshold).to(pred.dtype)
    p = pred.clamp(config.epsilon, 1 - config.epsilon)
    return p, y


def _log_terms(p: torch.Tensor, y: torch.Tensor):
    return y * torch.log(p), (1 - y) * torch.log(1 - p)


def bce_standard(pred: torch.Tensor, gt: torch.Tensor,
                 config: LossConfig = DEFAULT_LOSS_CONFIG) -> torch.Tensor:
    """Sum-reduced binary cross entropy of a probability map."""
    p, y = _prepare(pred, gt, config)
    pos, neg = _log_terms(p, y)
    return -(pos + neg).sum()


def negative_fraction(y: torch.Tensor) -> torch.Tensor:
    """Per-image fraction of negative pixels, broadcastable against y.

    Inputs of rank 2 or lower are treated as a single image; higher ranks
    treat dim 0 as the batch.
    """
    if y.dim() <= 2:
        return 1 - y.mean()
    dims = tuple(range(1, y.dim()))
    beta = 1 - y.mean(dim=dims)
    return beta.view(-1, *([1] * (y.dim() - 1)))


def bce_balanced(pred: torch.Tensor, gt: torch.Tensor,
                 config: LossConfig = DEFAULT_LOSS_CONFIG) -> torch.Tensor:
    """Class-balanced sum-reduced binary cross entropy.

    Positive terms are weighted by the per-image negative fraction beta and
    negative terms by 1 - beta, so the rare class is not drowned out.
    A single-class groundtruth zeroes one side of the loss; that is computed
    as written but flagged with a warning.
    """
    p, y = _prepare(pred, gt, config)
    beta = negative_fraction(y)
    if bool(((beta == 0) | (beta == 1)).any()):
        warnings.warn(
            "balanced BCE got a single-class groundtruth; "
            "one side of the loss carries zero weight",
            stacklevel=2,
        )
    pos, neg = _log_terms(p, y)
    return -(beta * pos + (1 - beta) * neg).sum()


LOSS_BY_TASK = {
    "saliency": bce_standard,
    "edge": bce_balanced,
    "skeleton": bce_balanced,
}


def task_loss(task: str, pred: torch.Tensor, gt: torch.Tensor,
              config: LossConfig = DEFAULT_LOSS_CONFIG) -> torch.Tensor:
    check_task(task)
    return LOSS_BY_TASK[task](pred, gt, config)


def total_loss(per_task: dict[str, torch.Tensor]) -> torch.Tensor:
    """Unweighted sum of per-task losses, in sorted task-name order."""
    result = None
    for task in sorted(per_task):
        result = per_task[task] if result is None else result + per_task[task]
    if result is None:
        raise ConfigError("no per-task losses given")
    return result
