"""Episodic training with Adam, and episodic evaluation."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import ContractError, NumericError
from .fewshot import episode_logits, episode_loss
from .tensor import Parameter, backward, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Per-parameter first/second moment estimates with bias correction."""

    def __init__(self, params: Iterable[Parameter], cfg: OptimizerConfig = OptimizerConfig()):
        self.params = [p for p in params if p.trainable]
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g
            update = c.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + c.eps)
            p.assign(p.data - update)


@dataclass
class TrainResult:
    model: object
    losses: list = field(default_factory=list)


def train_episodes(model, episodes: Iterable, optimizer_cfg: OptimizerConfig, steps: int,
                   metric: str = "bimhm", temperature: float = 1.0,
                   on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Run ``steps`` optimizer updates, one episode each; only trainable
    parameters of ``model`` move."""
    opt = Adam(model.parameters(), optimizer_cfg)
    losses = []
    it = iter(episodes)
    for step in range(steps):
        episode = next(it)
        opt.zero_grad()
        loss, _ = episode_loss(episode, model, metric, temperature)
        value = loss.item()
        if not math.isfinite(value):
            err = NumericError(f"non-finite loss {value} at step {step}")
            err.step = step
            raise err
        backward(loss)
        opt.step()
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
    return TrainResult(model, losses)


@dataclass
class EvalResult:
    accuracy: float
    ci95: float
    episode_count: int
    per_episode: list

    @property
    def degenerate(self) -> bool:
        return self.episode_count < 2


def predict_episode(model, episode, metric: str = "bimhm", temperature: float = 1.0) -> np.ndarray:
    with no_grad():
        logits = episode_logits(model, episode, metric, temperature)
    return np.argmax(logits.data, axis=-1)


def summarize(accuracies) -> tuple[float, float]:
    """Mean and 95% normal-approximation half-width over per-episode accuracies."""
    acc = np.asarray(accuracies, dtype=float)
    if acc.size == 0:
        raise ContractError("no episodes to summarize")
    if acc.size < 2:
        return float(acc.mean()), 0.0
    return float(acc.mean()), float(1.96 * acc.std(ddof=1) / math.sqrt(acc.size))


def evaluate(model, episode_source, episode_count: int, metric: str = "bimhm",
             temperature: float = 1.0, workers: int = 1,
             predictor: Callable | None = None) -> EvalResult:
    """Mean query accuracy over ``episode_count`` episodes.

    ``episode_source`` is either an object with ``episode(i)`` (preferred:
    results then do not depend on ``workers``) or a plain iterable.
    """
    if episode_count < 1:
        raise ContractError("episode_count must be at least 1")
    predict = predictor or (lambda ep: predict_episode(model, ep, metric, temperature))

    def run(ep) -> float:
        with no_grad():
            return float(np.mean(predict(ep) == ep.query_labels))

    if hasattr(episode_source, "episode"):
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                accs = list(pool.map(lambda i: run(episode_source.episode(i)), range(episode_count)))
        else:
            accs = [run(episode_source.episode(i)) for i in range(episode_count)]
    else:
        it = iter(episode_source)
        accs = [run(next(it)) for _ in range(episode_count)]
    mean, half = summarize(accs)
    return EvalResult(mean, half, episode_count, accs)
