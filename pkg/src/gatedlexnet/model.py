"""End-to-end paragraph recognizer: encoder, vertical attention, LSTM line decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as att
from .ctc import ctc_loss_from_logits
from .decoder import LSTM, ClassProjection
from .encoder import Encoder, EncoderConfig
from .numerics import Layer, NumericalInstabilityError, get_dtype, no_grad, softmax


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    attention: att.AttentionConfig = field(default_factory=att.AttentionConfig)
    hidden: int = 64
    n_chars: int = 27

    @property
    def n_classes(self) -> int:
        return self.n_chars + 1


@dataclass
class LossTerms:
    total: float
    ctc: float
    ce: float


class GatedLexiconNet(Layer):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder, rng)
        c_f = cfg.encoder.out_channels
        self.attention = att.VerticalAttention(c_f, cfg.hidden, cfg.attention, rng)
        self.lstm = LSTM(c_f, cfg.hidden, rng)
        self.proj = ClassProjection(cfg.hidden, cfg.n_classes, rng)

    def _decode_logits(self, line, h, c):
        hs, h, c = self.lstm(line, h, c)
        return self.proj(hs), h, c

    def _decode_probs(self, line, h, c):
        logits, h, c = self._decode_logits(line, h, c)
        return softmax(logits, axis=-1), h, c

    def _check(self, value, where):
        if not np.all(np.isfinite(value)):
            raise NumericalInstabilityError(where)

    # -- training ------------------------------------------------------------

    def loss(self, image: np.ndarray, targets: list[list[int]], lam: float | None = None, backward: bool = True) -> LossTerms:
        """Joint loss on one paragraph; with ``backward`` the gradients are accumulated."""
        lam = self.cfg.attention.lam if lam is None else lam
        n = len(targets)
        if n == 0:
            raise ValueError("a paragraph needs at least one line")
        self.clear_cache()
        features = self.encoder(image.astype(get_dtype(), copy=False))
        decoded = 0

        def decode(line, h, c):
            # checked here so a bad decoder is named before its state reaches the next attention step
            nonlocal decoded
            decoded += 1
            logits, h, c = self._decode_logits(line, h, c)
            self._check(logits, f"class logits of line {decoded}")
            return logits, h, c

        records = att.run_paragraph(features, self.attention, decode, "train", n_lines=n)
        d_logits = []
        ctc_total = 0.0
        for rec, y in zip(records, targets):
            loss_k, grad_k = ctc_loss_from_logits(rec.decoded, y)
            ctc_total += loss_k
            d_logits.append(grad_k)
        deltas = att.decision_targets(n)
        ce_total = sum(att.cross_entropy(rec.decision, dl) for rec, dl in zip(records, deltas))
        total = ctc_total + lam * ce_total
        if not np.isfinite(total):
            raise NumericalInstabilityError("joint loss")
        if backward:
            self._backward(records, d_logits, deltas, lam, features)
        return LossTerms(total, ctc_total, ce_total)

    def _backward(self, records, d_logits, deltas, lam, features):
        hidden = self.cfg.hidden
        dh = np.zeros(hidden)
        dc = np.zeros(hidden)
        d_feat = np.zeros_like(features)
        d_rows = None
        carry_beta = np.zeros(features.shape[1])
        carry_cov = np.zeros(features.shape[1])
        n = len(d_logits)
        for t in range(n, -1, -1):
            d_line = None
            if t < n:
                d_hs = self.proj.backward(d_logits[t])
                d_line, dh, dc = self.lstm.backward(d_hs, dh, dc)
            d_end = lam * (records[t].decision - deltas[t])
            df, dpre, d_bprev, d_cov, d_h_att = self.attention.step_backward(d_line, d_end, carry_beta + carry_cov)
            d_feat += df
            d_rows = dpre if d_rows is None else d_rows + dpre
            dh = dh + d_h_att
            carry_beta = d_bprev
            carry_cov = carry_cov + d_cov
        d_feat += self.attention.project_rows_backward(d_rows)
        self.encoder.backward(d_feat)

    def line_loss(self, image: np.ndarray, target: list[int], backward: bool = True) -> float:
        """Pure CTC on a single-line image, rows averaged uniformly (line-level pretraining)."""
        self.clear_cache()
        features = self.encoder(image.astype(get_dtype(), copy=False))
        line = features.mean(axis=1).T
        logits, _, _ = self._decode_logits(line, *self.lstm.initial_state())
        loss, grad = ctc_loss_from_logits(logits, target)
        if not np.isfinite(loss):
            raise NumericalInstabilityError("line CTC loss")
        if backward:
            d_line, _, _ = self.lstm.backward(self.proj.backward(grad))
            h = features.shape[1]
            self.encoder.backward(np.repeat((d_line.T / h)[:, None, :], h, axis=1))
        return loss

    # -- inference -----------------------------------------------------------

    def features(self, image: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.encoder(image.astype(get_dtype(), copy=False))

    def recognize(self, image: np.ndarray, max_line_length: int | None = None):
        """Return ``(line probability matrices, decision vectors)`` in reading order."""
        max_lines = self.cfg.attention.max_line_length if max_line_length is None else max_line_length
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                features = self.encoder(image.astype(get_dtype(), copy=False))
                records = att.run_paragraph(
                    features, self.attention, self._decode_probs, "infer", max_line_length=max_lines
                )
        finally:
            self.train(was_training)
        lines = [r.decoded for r in records if r.decoded is not None]
        return lines, [r.decision for r in records]
