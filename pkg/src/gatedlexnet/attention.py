"""Vertical attention over feature-map rows with learned paragraph-end detection.

At step ``t`` every feature row ``i`` gets a score from

    s[t, i] = tanh(W_f f'_i + W_j j[t, i] + W_h h_{t-1} + b)
    e[t, i] = v . s[t, i]

where ``f'_i`` is row ``i`` averaged over the width, ``j[t, i]`` is a 1-D
convolution over the previous weights and their running sum (coverage),
and ``h_{t-1}`` is the decoder state after the previous line. The weights
``beta[t] = softmax(e[t])`` collapse the feature map to the line sequence
``l_t[w] = sum_i beta[t, i] f[:, i, w]``. The end detector reads the
row-wise max of ``s`` together with ``h_{t-1}``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ctc import ctc_loss
from .numerics import (
    Layer,
    NumericalInstabilityError,
    conv2d,
    conv2d_backward,
    get_dtype,
    log_branch,
    glorot_uniform,
    softmax,
    softmax_backward,
)

# decision vector layout: index 0 = paragraph ends, index 1 = another line follows
STOP, CONTINUE = 0, 1


@dataclass
class AttentionConfig:
    dim: int = 64
    coverage_channels: int = 16
    coverage_kernel: int = 7
    max_line_length: int = 30
    lam: float = 1.0


@dataclass
class AttentionState:
    beta_prev: np.ndarray
    coverage: np.ndarray
    h: np.ndarray
    c: np.ndarray
    t: int = 0

    @classmethod
    def initial(cls, rows: int, hidden: int) -> "AttentionState":
        dt = get_dtype()
        return cls(np.zeros(rows, dt), np.zeros(rows, dt), np.zeros(hidden, dt), np.zeros(hidden, dt), 0)

    def advance(self, beta, h, c) -> "AttentionState":
        return AttentionState(beta, self.coverage + beta, h, c, self.t + 1)


class VerticalAttention(Layer):
    def __init__(self, channels: int, hidden: int, cfg: AttentionConfig | None = None, rng=None):
        super().__init__()
        cfg = cfg or AttentionConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        d, cj, k = cfg.dim, cfg.coverage_channels, cfg.coverage_kernel
        if k % 2 == 0:
            raise ValueError("coverage kernel must be odd")
        self.cfg = cfg
        self.channels = channels
        self.hidden = hidden
        dt = get_dtype()
        self.add_param("w_feat", glorot_uniform(rng, (d, channels), channels, d))
        self.add_param("w_ctx", glorot_uniform(rng, (d, cj), cj, d))
        self.add_param("w_hid", glorot_uniform(rng, (d, hidden), hidden, d))
        self.add_param("b_score", np.zeros(d, dt))
        self.add_param("v", glorot_uniform(rng, (d,), d, 1))
        self.add_param("cov_kernel", glorot_uniform(rng, (cj, 2, 1, k), 2 * k, cj * k))
        self.add_param("cov_bias", np.zeros(cj, dt))
        self.add_param("w_end", glorot_uniform(rng, (2, d + hidden), d + hidden, 2))
        self.add_param("b_end", np.zeros(2, dt))

    # -- per-paragraph row projection --------------------------------------

    def project_rows(self, features: np.ndarray) -> np.ndarray:
        """``W_f`` applied to the width-mean of each feature row: ``[H_f, dim]``."""
        if features.ndim != 3 or features.shape[0] != self.channels:
            raise ValueError(f"attention expects features [{self.channels}, H, W], got {features.shape}")
        rows = features.mean(axis=2).T
        self._save(("rows", features.shape[2], rows))
        return rows @ self.params["w_feat"].T

    def project_rows_backward(self, d_proj: np.ndarray) -> np.ndarray:
        tag, width, rows = self._pop()
        assert tag == "rows"
        self.grads["w_feat"] += d_proj.T @ rows
        d_rows = d_proj @ self.params["w_feat"]
        return np.repeat((d_rows.T / width)[:, :, None], width, axis=2)

    # -- one attention step --------------------------------------------------

    def scores(self, row_proj: np.ndarray, state: AttentionState):
        p = self.params
        ctx = np.stack([state.beta_prev, state.coverage])[:, None, :]
        pad = self.cfg.coverage_kernel // 2
        j = conv2d(ctx, p["cov_kernel"], p["cov_bias"], 1, (0, pad))[:, 0, :]
        s = np.tanh(row_proj + j.T @ p["w_ctx"].T + p["w_hid"] @ state.h + p["b_score"])
        return s @ p["v"], s, ctx, j

    def step(self, features: np.ndarray, row_proj: np.ndarray, state: AttentionState, beta=None):
        """Return ``(l_t[W, C], beta_t[H], d_t[2])``.

        ``beta`` overrides the computed weights (used to probe the weighted sum).
        """
        e, s, ctx, j = self.scores(row_proj, state)
        if not np.all(np.isfinite(e)):
            raise NumericalInstabilityError(f"attention scores at step {state.t + 1}")
        if beta is None:
            beta = softmax(e)
        line = np.einsum("chw,h->wc", features, beta)
        pooled_idx = np.argmax(s, axis=0)
        log_branch(pooled_idx)
        pooled = s[pooled_idx, np.arange(s.shape[1])]
        z = np.concatenate([pooled, state.h])
        d = softmax(self.params["w_end"] @ z + self.params["b_end"])
        self._save(("step", features, state, ctx, j, s, beta, pooled_idx, z))
        return line, beta, d

    def step_backward(self, d_line, d_logits_end, d_beta_out):
        """Backward of :meth:`step`.

        ``d_line`` is the gradient on ``l_t``, ``d_logits_end`` on the end
        detector's pre-softmax logits and ``d_beta_out`` on ``beta_t``
        (coming from later steps). Returns ``(d_features, d_row_proj,
        d_beta_prev, d_coverage, d_h)``.
        """
        tag, features, state, ctx, j, s, beta, pooled_idx, z = self._pop()
        assert tag == "step"
        p, g = self.params, self.grads
        d = s.shape[1]

        g["w_end"] += np.outer(d_logits_end, z)
        g["b_end"] += d_logits_end
        dz = p["w_end"].T @ d_logits_end
        d_h = dz[d:].copy()
        ds = np.zeros_like(s)
        ds[pooled_idx, np.arange(d)] += dz[:d]

        if d_line is not None:
            d_features = np.einsum("wc,h->chw", d_line, beta)
            d_beta = np.einsum("chw,wc->h", features, d_line) + d_beta_out
        else:
            d_features = np.zeros_like(features)
            d_beta = d_beta_out
        de = softmax_backward(d_beta, beta)
        g["v"] += s.T @ de
        ds += np.outer(de, p["v"])
        dpre = ds * (1.0 - s * s)

        g["b_score"] += dpre.sum(axis=0)
        d_hid_proj = dpre.sum(axis=0)
        g["w_hid"] += np.outer(d_hid_proj, state.h)
        d_h += p["w_hid"].T @ d_hid_proj
        g["w_ctx"] += dpre.T @ j.T
        dj = (dpre @ p["w_ctx"]).T
        pad = self.cfg.coverage_kernel // 2
        dctx, dk, db = conv2d_backward(dj[:, None, :], ctx, p["cov_kernel"], 1, (0, pad))
        g["cov_kernel"] += dk
        g["cov_bias"] += db
        return d_features, dpre, dctx[0, 0], dctx[1, 0], d_h


# ---------------------------------------------------------------------------
# losses and the per-paragraph loop


def cross_entropy(d: np.ndarray, target: np.ndarray) -> float:
    with np.errstate(divide="ignore"):
        return float(-np.sum(target * np.where(target > 0, np.log(d), 0.0)))


def decision_targets(n_lines: int) -> list[np.ndarray]:
    """One-hot end targets for ``n_lines`` lines: continue for each line, then stop."""
    cont = np.array([0.0, 1.0])
    stop = np.array([1.0, 0.0])
    return [cont] * n_lines + [stop]


def joint_loss(line_predictions: Sequence[np.ndarray], line_targets, decisions: Sequence[np.ndarray], lam: float = 1.0):
    """Sum of per-line CTC losses plus ``lam`` times the end-decision cross entropy.

    Returns ``(total, ctc_sum, ce_sum)``. ``line_predictions`` are row-stochastic
    matrices ``[T, N+1]``.
    """
    n = len(line_targets)
    if n == 0:
        raise ValueError("a paragraph needs at least one line")
    if len(line_predictions) != n:
        raise ValueError(f"{len(line_predictions)} line predictions for {n} targets")
    if len(decisions) != n + 1:
        raise ValueError(f"expected {n + 1} end decisions, got {len(decisions)}")
    ctc_sum = sum(ctc_loss(p, y)[0] for p, y in zip(line_predictions, line_targets))
    ce_sum = sum(cross_entropy(d, tgt) for d, tgt in zip(decisions, decision_targets(n)))
    return ctc_sum + lam * ce_sum, ctc_sum, ce_sum


@dataclass
class StepRecord:
    line: np.ndarray
    beta: np.ndarray
    decision: np.ndarray
    decoded: object = None


LineDecoder = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple]


def run_paragraph(
    features: np.ndarray,
    attention: VerticalAttention,
    decode_line: LineDecoder,
    mode: str = "infer",
    n_lines: int | None = None,
    max_line_length: int = 30,
) -> list[StepRecord]:
    """Attend to one line per step.

    ``decode_line(l_t, h, c)`` must return ``(output, h_new, c_new)``; it is
    called for every step that reads a line. In ``train`` mode exactly
    ``n_lines + 1`` steps run and the last one only supervises the stop
    decision. In ``infer`` mode the loop ends at the first step whose
    decision favours stopping, or after ``max_line_length`` lines.
    """
    if mode == "train":
        if n_lines is None or n_lines < 1:
            raise ValueError("train mode needs n_lines >= 1")
        n_steps = n_lines + 1
    elif mode == "infer":
        if max_line_length < 1:
            raise ValueError("max_line_length must be >= 1")
        n_steps = max_line_length
    else:
        raise ValueError(f"unknown mode {mode!r}")
    row_proj = attention.project_rows(features)
    state = AttentionState.initial(features.shape[1], attention.hidden)
    records = []
    for t in range(n_steps):
        line, beta, d = attention.step(features, row_proj, state)
        rec = StepRecord(line, beta, d)
        records.append(rec)
        reads = t < n_lines if mode == "train" else int(np.argmax(d)) == CONTINUE
        if not reads:
            break
        rec.decoded, h, c = decode_line(line, state.h, state.c)
        state = state.advance(beta, h, c)
    return records
