"""Adam training on answer-position cross-entropy, plus finite-difference gradient checks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .rng import Rng, derive_seed
from .tasks import TaskInstance, TaskSpec
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch: int = 32
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    grad_clip: float | None = 1.0
    grad_check_every: int | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be positive, got {self.grad_clip}")


def teacher_forcing(instances: Sequence[TaskInstance]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inputs, targets and answer-position weights for a batch of equal-length instances."""
    rows = [list(inst.tokens) + list(inst.answer[:-1]) for inst in instances]
    if len({len(r) for r in rows}) != 1:
        raise ValueError("training batch needs instances of equal length")
    inputs = np.array(rows, dtype=np.int64)
    targets = np.zeros_like(inputs)
    weights = np.zeros(inputs.shape)
    for b, inst in enumerate(instances):
        start = len(inst.tokens) - 1
        targets[b, start : start + len(inst.answer)] = inst.answer
        weights[b, start : start + len(inst.answer)] = 1.0
    return inputs, targets, weights


def batch_loss(model: M.Model, inputs: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    return T.cross_entropy(M.logits(model, inputs), targets, weights)


def sample_batch(task: TaskSpec, cfg: TrainConfig, step: int) -> list[TaskInstance]:
    rng = Rng(derive_seed(cfg.seed, "gold", step))
    golds = rng.integers(0, task.num_segments, cfg.batch)
    return [task.generate(int(g), derive_seed(cfg.seed, "train", step, i)) for i, g in enumerate(golds)]


class Adam:
    def __init__(self, params: Sequence[Tensor], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> float:
        cfg = self.cfg
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        scale = 1.0
        if cfg.grad_clip is not None and norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        return norm


@dataclass
class TrainResult:
    model: M.Model
    losses: list[tuple[int, float]]
    grad_checks: list[tuple[int, float]]

    def loss_csv(self) -> str:
        return "step,loss\n" + "".join(f"{s},{l:.9g}\n" for s, l in self.losses)


def train(model: M.Model, task: TaskSpec, cfg: TrainConfig) -> TrainResult:
    """Train a copy of ``model``; the input model is left untouched."""
    if task.prompt_len + task.answer_length - 1 > model.config.max_seq:
        raise ValueError(f"task sequences ({task.prompt_len} tokens + answer) exceed max_seq {model.config.max_seq}")
    model = model.copy()
    opt = Adam(model.parameters(), cfg)
    losses: list[tuple[int, float]] = []
    checks: list[tuple[int, float]] = []
    for step in range(cfg.steps):
        batch = sample_batch(task, cfg, step)
        inputs, targets, weights = teacher_forcing(batch)
        if cfg.grad_check_every and step % cfg.grad_check_every == 0:
            checks.append((step, grad_check(model, batch[0], n_samples=32, seed=step)))
        model.zero_grad()
        loss = batch_loss(model, inputs, targets, weights)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        loss.backward()
        opt.step()
        losses.append((step, value))
        if step % 100 == 0:
            log.info("step %d loss %.4f", step, value)
    model.zero_grad()
    return TrainResult(model, losses, checks)


# gradient checking -----------------------------------------------------------


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients from
    turning float64 round-off into huge ratios."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    n_samples: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error between backprop and central differences.

    With ``n_samples`` set, that many coordinates are drawn uniformly over all
    parameters; otherwise every coordinate is checked.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if n_samples is not None and n_samples < len(coords):
        pick = Rng(seed).permutation(len(coords))[:n_samples]
        coords = [coords[k] for k in sorted(pick)]
    worst = 0.0
    with T.no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn().item()
            flat[j] = orig - eps
            down = loss_fn().item()
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            worst = max(worst, relative_error(float(analytic[i].reshape(-1)[j]), numeric))
    for p in params:
        p.grad = None
    return worst


def grad_check(
    model: M.Model, sample: TaskInstance, eps: float = 1e-5, n_samples: int | None = None, seed: int = 0
) -> float:
    """Gradient check of the answer-position loss on one instance."""
    inputs, targets, weights = teacher_forcing([sample])
    return check_gradients(
        lambda: batch_loss(model, inputs, targets, weights), model.parameters(), eps, n_samples, seed
    )
