"""Losses, Adam, learning-rate schedule and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import PatchPair
from .errors import NumericError, ValidationError
from .evaluation import DEFAULT_EPSILON
from .net import FlowNet, anatomy_stack, parameter_gradients, save_checkpoint

log = logging.getLogger(__name__)

VG_WEIGHT = 1e-3


@dataclass
class LossBreakdown:
    l_mse: torch.Tensor
    l_vg: torch.Tensor
    l_total: torch.Tensor
    vg_weight: float = VG_WEIGHT

    def floats(self) -> tuple[float, float, float]:
        return float(self.l_mse.detach()), float(self.l_vg.detach()), float(self.l_total.detach())


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ValidationError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if pred.dim() != 5 or pred.shape[1] != 3:
        raise ValidationError("expected (batch, 3, X, Y, Z) velocity tensors")


def loss_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-voxel sum of squared component errors, averaged over voxels (and batch)."""
    _check_pair(pred, target)
    return ((pred - target) ** 2).sum(dim=1).mean()


def derivative(v: torch.Tensor, dim: int, h: float) -> torch.Tensor:
    """dv/dk: central difference inside, one-sided first differences on the two end faces."""
    n = v.shape[dim]
    centre = (v.narrow(dim, 2, n - 2) - v.narrow(dim, 0, n - 2)) / (2.0 * h)
    first = (v.narrow(dim, 1, 1) - v.narrow(dim, 0, 1)) / h
    last = (v.narrow(dim, n - 1, 1) - v.narrow(dim, n - 2, 1)) / h
    return torch.cat([first, centre, last], dim=dim)


def loss_velocity_gradient(pred: torch.Tensor, target: torch.Tensor, spacing=(1.0, 1.0, 1.0)) -> torch.Tensor:
    """Mean squared mismatch of dvx/dx, dvy/dy and dvz/dz."""
    _check_pair(pred, target)
    if min(pred.shape[2:]) < 3:
        raise ValidationError("velocity gradient loss needs patches of side >= 3")
    total = 0.0
    for c in range(3):
        # component c is differentiated along spatial axis c (tensor dim 1 + c once sliced)
        d = derivative(pred[:, c], 1 + c, spacing[c]) - derivative(target[:, c], 1 + c, spacing[c])
        total = total + d**2
    return total.mean()


def total_loss(pred: torch.Tensor, target: torch.Tensor, spacing=(1.0, 1.0, 1.0),
               vg_weight: float = VG_WEIGHT) -> LossBreakdown:
    mse = loss_mse(pred, target)
    vg = loss_velocity_gradient(pred, target, spacing)
    return LossBreakdown(mse, vg, mse + vg_weight * vg, vg_weight)


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    decay_factor: float = math.sqrt(2.0)
    decay_every: int = 10_000
    batch: int = 20
    max_iters: int = 1000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_every: int = 500
    vg_weight: float = VG_WEIGHT

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValidationError("lr0 must be positive")
        if self.batch < 1:
            raise ValidationError("batch must be >= 1")
        if self.decay_every < 1 or self.val_every < 1:
            raise ValidationError("decay_every and val_every must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(iteration: int, config: TrainConfig) -> float:
    """lr0 divided by decay_factor once per completed ``decay_every`` iterations."""
    if iteration < 0:
        raise ValidationError("iteration must be >= 0")
    return config.lr0 / config.decay_factor ** (iteration // config.decay_every)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    bad = [n for n, g in grads.items() if not torch.isfinite(g).all()]
    if bad:
        raise NumericError(f"non-finite gradients at step {state.step + 1} in: {', '.join(bad)}")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if p.shape != g.shape:
                raise ValidationError(f"gradient shape mismatch for {name}")
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


# --- batches ---------------------------------------------------------------------------

@dataclass
class Batch:
    velocity: torch.Tensor
    anatomy: torch.Tensor
    target: torch.Tensor

    @property
    def mask(self) -> torch.Tensor:
        # stored patches carry no mask; the clean HR field is exactly zero
        # outside the fluid and nonzero inside it
        return (self.target**2).sum(dim=1) > 0


def make_batch(pairs: Sequence[PatchPair], dtype=torch.float32) -> Batch:
    vel = np.stack([p.lr_velocity for p in pairs])
    mags = np.stack([p.lr_mags for p in pairs])
    anat = anatomy_stack(mags.astype(np.float64), vel.astype(np.float64), axis=1)
    target = np.stack([p.hr_velocity for p in pairs])
    t = lambda a: torch.from_numpy(np.ascontiguousarray(a)).to(dtype)  # noqa: E731
    return Batch(t(vel), t(anat), t(target))


def predict_batch(model: FlowNet, batch: Batch) -> torch.Tensor:
    with torch.no_grad():
        return model(batch.velocity, batch.anatomy)


def masked_rel_speed_error(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor,
                           epsilon: float = DEFAULT_EPSILON) -> tuple[float, int]:
    """(sum of voxel ratios over the mask, voxel count) for pooling across batches."""
    err = ((pred - target) ** 2).sum(dim=1).sqrt()
    ref = ((target**2).sum(dim=1) + epsilon).sqrt()
    ratio = (err / ref)[mask]
    return float(ratio.double().sum()), int(mask.sum())


def dataset_rel_speed_error(model: FlowNet, pairs: Sequence[PatchPair], batch_size: int = 20) -> float:
    """Relative speed error pooled over the fluid voxels of every patch."""
    total, count = 0.0, 0
    for i in range(0, len(pairs), batch_size):
        b = make_batch([pairs[j] for j in range(i, min(i + batch_size, len(pairs)))])
        s, n = masked_rel_speed_error(predict_batch(model, b), b.target, b.mask)
        total += s
        count += n
    if count == 0:
        raise ValidationError("no fluid voxels in the evaluation patches")
    return total / count


class BatchSampler:
    """Endless seeded reshuffling over ``n`` items, ``batch`` at a time."""

    def __init__(self, n: int, batch: int, seed: int):
        if n < 1:
            raise ValidationError("cannot sample batches from an empty dataset")
        self.n, self.batch = n, batch
        self.rng = np.random.default_rng(seed)
        self._queue: list[int] = []

    def next(self) -> list[int]:
        while len(self._queue) < self.batch:
            self._queue.extend(int(i) for i in self.rng.permutation(self.n))
        out, self._queue = self._queue[: self.batch], self._queue[self.batch:]
        return out


@dataclass
class StepRecord:
    iteration: int
    lr: float
    l_mse: float
    l_vg: float
    l_total: float

    def log_line(self) -> str:
        return f"{self.iteration}\t{self.lr:.8e}\t{self.l_mse:.8e}\t{self.l_vg:.8e}\t{self.l_total:.8e}"


@dataclass
class TrainHistory:
    steps: list[StepRecord] = field(default_factory=list)
    validations: list[tuple[int, float]] = field(default_factory=list)
    best_iteration: int | None = None
    best_metric: float = math.inf


def train_loop(train: Sequence[PatchPair], val: Sequence[PatchPair], model: FlowNet, config: TrainConfig,
               *, spacing=(1.0, 1.0, 1.0), out_dir=None,
               evaluate: Callable[[FlowNet, Sequence[PatchPair]], float] | None = None) -> TrainHistory:
    """Minimise the total loss with Adam, checkpointing the best validation error.

    ``evaluate`` defaults to the pooled masked relative speed error.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValidationError("training needs non-empty train and validation sets")
    evaluate = evaluate or dataset_rel_speed_error
    out = Path(out_dir) if out_dir is not None else None
    log_file = open(out / "train.log", "w") if out is not None else None
    sampler = BatchSampler(len(train), config.batch, config.seed)
    state = AdamState()
    params = dict(model.named_parameters())
    history = TrainHistory()
    model.train()
    try:
        for it in range(1, config.max_iters + 1):
            batch = make_batch([train[i] for i in sampler.next()])
            pred = model(batch.velocity, batch.anatomy)
            losses = total_loss(pred, batch.target, spacing, config.vg_weight)
            if not torch.isfinite(losses.l_total):
                raise NumericError(f"non-finite loss at iteration {it}; best checkpoint left untouched")
            grads = parameter_gradients(losses.l_total, model)
            lr = lr_at(it - 1, config)
            adam_step(params, grads, state, lr, config.beta1, config.beta2, config.eps)
            rec = StepRecord(it, lr, *losses.floats())
            history.steps.append(rec)
            if log_file:
                log_file.write(rec.log_line() + "\n")
            if it % config.val_every == 0 or it == config.max_iters:
                metric = float(evaluate(model, val))
                history.validations.append((it, metric))
                log.info("iter %d  val rel speed error %.5f", it, metric)
                if metric < history.best_metric:
                    history.best_metric, history.best_iteration = metric, it
                    if out is not None:
                        save_checkpoint(out / "best.f4dw", model, it, metric)
    finally:
        if log_file:
            log_file.close()
    if out is not None:
        save_checkpoint(out / "last.f4dw", model, config.max_iters, history.validations[-1][1])
    return history
