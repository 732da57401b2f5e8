"""Supervised training on synthetic triplets.

The loss supervises every pyramid level against an area-downscaled copy of
the ground-truth flow, with geometrically increasing weights so the
full-resolution output dominates.  Updates come from one of two
dependency-free rules, momentum descent by default or adaptive moments,
both with a per-epoch exponential learning-rate decay; gradients are
accumulated one sample at a time, which keeps peak memory at a single
sample's tape.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Tensor, backward, tabs, tsum
from .encoders import EncoderConfig
from .errors import ConfigError, ContractError, NumericError
from .flow import FlowField, FlowPyramid, downscale_flow
from .model import RegistrationPipeline, check_ablation


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the full-scale recipe."""

    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-4
    lr_decay: float = 0.985
    momentum: float = 0.9
    alpha: float = 0.9
    levels: int = 5
    seed: int = 0
    ablate: tuple = ()
    divisor: int = 1
    max_steps: int | None = None
    optimizer: str = "momentum"

    def validate(self) -> "TrainConfig":
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.levels != 5:
            raise ConfigError(f"the decoder produces 5 levels, got {self.levels}")
        if self.epochs < 1 or self.batch_size < 1 or self.divisor < 1:
            raise ConfigError("epochs, batch size and divisor must be positive")
        if self.lr < 0.0 or not 0.0 <= self.momentum < 1.0 or not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("bad optimizer settings")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(
                f"unknown optimizer {self.optimizer!r}; options are {tuple(OPTIMIZERS)}"
            )
        check_ablation(self.ablate)
        return self


def multiscale_epe_loss(pyramid: FlowPyramid, gt: FlowField, alpha: float, levels: int) -> Tensor:
    """Weighted sum over levels of the mean per-pixel L1 flow error.

    Level k (coarse to fine) is compared against the ground truth
    area-downscaled to its resolution and weighted alpha**(levels-1-k), so
    the finest level carries weight 1.
    """
    if len(pyramid.levels) != levels or gt.scale != 1:
        raise ContractError(
            f"need {levels} levels and full-resolution ground truth, "
            f"got {len(pyramid.levels)} levels at gt scale {gt.scale}"
        )
    loss = None
    for k, (pred, scale) in enumerate(zip(pyramid.levels, pyramid.scales)):
        gt_k = downscale_flow(gt, scale)
        if pred.shape != gt_k.data.shape:
            raise ContractError(f"level {k} shape {pred.shape} vs gt {gt_k.data.shape}")
        _, h, w = pred.shape
        term = tsum(tabs(pred - Tensor(gt_k.data))) * (alpha ** (levels - 1 - k) / (h * w))
        loss = term if loss is None else loss + term
    return loss


def pyramid_level_losses(pyramid: FlowPyramid, gt: FlowField) -> list[float]:
    """Unweighted mean per-pixel L1 error at each level, for diagnostics."""
    out = []
    for pred, scale in zip(pyramid.levels, pyramid.scales):
        gt_k = downscale_flow(gt, scale)
        _, h, w = pred.shape
        out.append(float(np.abs(pred.data - gt_k.data).sum() / (h * w)))
    return out


class MomentumSGD:
    """Heavy-ball descent over a named parameter dict.

    A parameter with no gradient still sees its velocity decay, so stale
    momentum cannot push dormant weights forever.
    """

    def __init__(self, params: dict, lr: float, momentum: float = 0.9, decay: float = 1.0):
        self.params = params
        self.base_lr = lr
        self.lr = lr
        self.momentum = momentum
        self.decay = decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def start_epoch(self, epoch: int) -> float:
        self.lr = self.base_lr * self.decay**epoch
        return self.lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            if p.grad is not None:
                v += p.grad
            p.data -= self.lr * v


class Adam:
    """Adaptive moments descent over a named parameter dict.

    As deterministic and dependency-free as the momentum rule.  The second
    moment rescales each parameter's step, which matters at desk scale: the
    refinement convs see gradients orders of magnitude larger than the
    correspondence encoders, and a single global rate either diverges on
    the former or starves the latter.  ``momentum`` doubles as beta1.
    """

    beta2 = 0.999
    eps = 1e-8

    def __init__(self, params: dict, lr: float, momentum: float = 0.9, decay: float = 1.0):
        self.params = params
        self.base_lr = lr
        self.lr = lr
        self.beta1 = momentum
        self.decay = decay
        self.mean = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.var = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.updates = 0

    def start_epoch(self, epoch: int) -> float:
        self.lr = self.base_lr * self.decay**epoch
        return self.lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.updates += 1
        correct1 = 1.0 - self.beta1**self.updates
        correct2 = 1.0 - self.beta2**self.updates
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.mean[name]
            v = self.var[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (np.square(g) - v)
            p.data -= self.lr * (m / correct1) / (np.sqrt(v / correct2) + self.eps)


OPTIMIZERS = {"momentum": MomentumSGD, "adam": Adam}


def apply_ablation(cfg: TrainConfig, encoder: EncoderConfig | None = None) -> RegistrationPipeline:
    """Build the model variant a config describes, pass-throughs included."""
    cfg.validate()
    if encoder is None:
        encoder = EncoderConfig.scaled(cfg.divisor) if cfg.divisor > 1 else EncoderConfig()
    return RegistrationPipeline(np.random.default_rng(cfg.seed), encoder, cfg.ablate)


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr: float
    loss: float
    level_losses: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "lr": self.lr,
            "loss": self.loss,
            "level_losses": self.level_losses,
            "seconds": self.seconds,
        }


def train(
    model: RegistrationPipeline,
    triplets: list,
    cfg: TrainConfig,
    log_path=None,
) -> list[StepRecord]:
    """Optimize the model on the given triplets; returns per-step records.

    Deterministic in cfg.seed: epoch shuffles come from a dedicated
    generator, and every forward/backward is pure.  The frequency
    decomposition of each sample is computed once and cached.
    """
    cfg.validate()
    if not triplets:
        raise ContractError("no training triplets")
    bands = [
        (model.decompose_image(t.visible), model.decompose_image(t.warped_thermal))
        for t in triplets
    ]
    gts = [t.gt_flow for t in triplets]
    optimizer = OPTIMIZERS[cfg.optimizer](model.named_params(), cfg.lr, cfg.momentum, cfg.lr_decay)
    order_rng = np.random.default_rng(cfg.seed)
    records: list[StepRecord] = []
    log = open(log_path, "w") if log_path is not None else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            lr = optimizer.start_epoch(epoch)
            order = order_rng.permutation(len(triplets))
            for lo in range(0, len(order), cfg.batch_size):
                batch = order[lo : lo + cfg.batch_size]
                started = time.perf_counter()
                optimizer.zero_grad()
                batch_loss = 0.0
                level_sums = np.zeros(cfg.levels)
                for idx in batch:
                    with Graph() as g:
                        pyramid, _ = model.forward_bands(*bands[idx])
                        loss = multiscale_epe_loss(pyramid, gts[idx], cfg.alpha, cfg.levels)
                        loss = loss * (1.0 / len(batch))
                        backward(g, loss)
                    batch_loss += loss.item()
                    level_sums += pyramid_level_losses(pyramid, gts[idx])
                levels = (level_sums / len(batch)).tolist()
                if not np.isfinite(batch_loss):
                    raise NumericError(
                        f"non-finite loss at step {step}; per-level losses: {levels}"
                    )
                optimizer.step()
                step += 1
                record = StepRecord(
                    step=step,
                    epoch=epoch,
                    lr=lr,
                    loss=batch_loss,
                    level_losses=levels,
                    seconds=time.perf_counter() - started,
                )
                records.append(record)
                if log is not None:
                    log.write(json.dumps(record.to_json()) + "\n")
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    return records
    finally:
        if log is not None:
            log.close()
    return records
