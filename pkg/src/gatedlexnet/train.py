"""Training loop: per-paragraph joint loss, backprop and a gradient-descent update."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ctc import InfeasibleAlignment
from .data import AugmentConfig, ParagraphSample, augment, encode
from .model import GatedLexiconNet
from .numerics import NumericalInstabilityError, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    lr: float = 0.01
    iterations: int = 100
    pretrain_lines: int = 0
    clip_norm: float = 5.0
    augment: bool = False
    seed: int = 0
    log_every: int = 50


class SGD:
    def __init__(self, model: GatedLexiconNet, lr: float):
        self.model = model
        self.lr = lr

    def step(self) -> None:
        for _, layer, key in self.model.named_parameters():
            layer.params[key] -= self.lr * layer.grads[key]


class Adam:
    def __init__(self, model: GatedLexiconNet, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.model = model
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, layer, key in self.model.named_parameters():
            g = layer.grads[key]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            layer.params[key] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, model: GatedLexiconNet, lr: float):
    if name == "sgd":
        return SGD(model, lr)
    if name == "adam":
        return Adam(model, lr)
    raise ValueError(f"unknown optimizer {name!r}")


def clip_gradients(model: GatedLexiconNet, max_norm: float) -> float:
    total = float(np.sqrt(sum(np.sum(layer.grads[key] ** 2) for _, layer, key in model.named_parameters())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for _, layer, key in model.named_parameters():
            layer.grads[key] *= scale
    return total


def first_nonfinite_gradient(model: GatedLexiconNet) -> str | None:
    for name, layer, key in model.named_parameters():
        if not np.all(np.isfinite(layer.grads[key])):
            return name
    return None


def first_nonfinite_parameter(model: GatedLexiconNet) -> str | None:
    for name, layer, key in model.named_parameters():
        if not np.all(np.isfinite(layer.params[key])):
            return name
    return None


@dataclass
class LogRow:
    iteration: int
    ctc_loss: float
    ce_loss: float


class Trainer:
    """Iterates over samples in a seeded shuffled order, one paragraph per update."""

    def __init__(self, model: GatedLexiconNet, alphabet: str, cfg: TrainConfig, lam: float = 1.0,
                 augment_cfg: AugmentConfig | None = None):
        self.model = model
        self.alphabet = alphabet
        self.cfg = cfg
        self.lam = lam
        self.augment_cfg = augment_cfg or AugmentConfig()
        self.rng = np.random.default_rng(cfg.seed)
        self.optimizer = make_optimizer(cfg.optimizer, model, cfg.lr)
        self.log: list[LogRow] = []
        self.iteration = 0

    def _order(self, n: int):
        while True:
            yield from self.rng.permutation(n)

    def _image(self, sample: ParagraphSample) -> np.ndarray:
        if self.cfg.augment:
            return augment(sample.image, self.rng, self.augment_cfg)
        return sample.image

    def _update(self, where: str) -> None:
        bad = first_nonfinite_gradient(self.model)
        if bad is not None:
            raise NumericalInstabilityError(f"gradient of {bad}")
        clip_gradients(self.model, self.cfg.clip_norm)
        self.optimizer.step()
        bad = first_nonfinite_parameter(self.model)
        if bad is not None:
            raise NumericalInstabilityError(f"parameter {bad} after update ({where})")

    def pretrain_lines(self, lines: list[tuple[np.ndarray, list[int]]], iterations: int) -> list[float]:
        """Pure-CTC training on single-line images; the weights stay in the model."""
        losses = []
        self.model.train()
        order = self._order(len(lines))
        for it in range(1, iterations + 1):
            image, target = lines[next(order)]
            self.model.zero_grad()
            try:
                losses.append(self.model.line_loss(image, target))
                self._update("line pretraining")
            except NumericalInstabilityError as exc:
                raise exc.at_iteration(it) from None
        return losses

    def fit(self, samples: list[ParagraphSample], iterations: int | None = None,
            callback: Callable[[int, LogRow], None] | None = None) -> list[LogRow]:
        iterations = self.cfg.iterations if iterations is None else iterations
        targets = [[encode(ln, self.alphabet) for ln in s.lines] for s in samples]
        self.model.train()
        order = self._order(len(samples))
        start = time.time()
        for _ in range(iterations):
            k = next(order)
            self.iteration += 1
            self.model.zero_grad()
            try:
                terms = self.model.loss(self._image(samples[k]), targets[k], self.lam)
                self._update(f"sample {samples[k].id}")
            except NumericalInstabilityError as exc:
                raise exc.at_iteration(self.iteration) from None
            except InfeasibleAlignment as exc:
                log.warning("skipping sample %s: %s", samples[k].id, exc)
                continue
            row = LogRow(self.iteration, terms.ctc, terms.ce)
            self.log.append(row)
            if callback is not None:
                callback(self.iteration, row)
            if self.cfg.log_every and self.iteration % self.cfg.log_every == 0:
                log.info("iter %d ctc %.4f ce %.4f (%.1fs)", self.iteration, terms.ctc, terms.ce, time.time() - start)
        self.model.eval()
        return self.log


def write_loss_log(path, rows: list[LogRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "ctc_loss", "ce_loss"])
        for r in rows:
            w.writerow([r.iteration, repr(r.ctc_loss), repr(r.ce_loss)])


def dataset_loss(model: GatedLexiconNet, samples: list[ParagraphSample], alphabet: str, lam: float = 1.0) -> float:
    """Eval-mode joint loss summed over ``samples``."""
    was = model.training
    model.eval()
    try:
        with no_grad():
            return sum(
                model.loss(s.image, [encode(ln, alphabet) for ln in s.lines], lam, backward=False).total
                for s in samples
            )
    finally:
        model.train(was)
