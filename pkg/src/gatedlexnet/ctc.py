"""Connectionist temporal classification: loss, gradient and best-path decoding.

The blank is the last class (index ``N`` for ``N`` characters).
"""

from __future__ import annotations

import numpy as np

from .numerics import log_softmax

NEG_INF = -np.inf


class InfeasibleAlignment(ValueError):
    """The target needs more frames than the probability matrix has."""

    def __init__(self, target_len: int, required: int, frames: int):
        self.required = required
        self.frames = frames
        super().__init__(
            f"infeasible alignment: target of length {target_len} needs {required} frames, got {frames}"
        )


def required_frames(target) -> int:
    """Minimum number of frames that can emit ``target`` (a blank between repeats)."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extend(target, blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def _skip_mask(ext: np.ndarray, blank: int) -> np.ndarray:
    skip = np.zeros(len(ext), dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return skip


def _lse3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe))


def ctc_forward_backward(log_probs: np.ndarray, target):
    """Return ``(log_alpha, log_beta, ext)`` over the blank-extended target."""
    T, C = log_probs.shape
    blank = C - 1
    target = np.asarray(list(target), dtype=np.int64)
    if np.any(target < 0) or np.any(target >= blank):
        raise ValueError(f"target labels must lie in [0, {blank - 1}], got {target.tolist()}")
    need = required_frames(target)
    if need > T:
        raise InfeasibleAlignment(len(target), need, T)
    ext = _extend(target, blank)
    S = len(ext)
    skip = _skip_mask(ext, blank)
    lp = log_probs[:, ext]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, 0]
    if S > 1:
        alpha[0, 1] = lp[0, 1]
    one = np.full(S, NEG_INF)
    two = np.full(S, NEG_INF)
    for t in range(1, T):
        prev = alpha[t - 1]
        one[1:] = prev[:-1]
        two[2:] = prev[:-2]
        alpha[t] = _lse3(prev, one, np.where(skip, two, NEG_INF)) + lp[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    skip_fwd = np.zeros(S, dtype=bool)
    skip_fwd[:-2] = skip[2:]
    one[:] = NEG_INF
    two[:] = NEG_INF
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1]
        one[:-1] = nxt[1:]
        two[:-2] = nxt[2:]
        beta[t] = _lse3(nxt, one, np.where(skip_fwd, two, NEG_INF))
    return alpha, beta, ext


def ctc_log_likelihood(log_probs: np.ndarray, target) -> float:
    """``ln p(target | log_probs)`` summed over all alignments."""
    alpha, _, _ = ctc_forward_backward(log_probs, target)
    end = alpha[-1, -2:] if alpha.shape[1] > 1 else alpha[-1, -1:]
    return float(np.logaddexp.reduce(end))


def ctc_loss_from_logits(logits: np.ndarray, target):
    """Loss and its gradient with respect to the pre-softmax ``logits[T, N+1]``."""
    log_probs = log_softmax(logits, axis=-1)
    return _loss_and_grad(log_probs, target)


def ctc_loss(probs: np.ndarray, target):
    """Negative log-likelihood of ``target`` under ``probs[T, N+1]`` (rows sum to 1).

    The returned gradient is taken with respect to the logits that produced
    ``probs`` through a softmax (``probs - posterior occupancy``), not with
    respect to ``probs`` itself.
    """
    with np.errstate(divide="ignore"):
        log_probs = np.log(probs)
    return _loss_and_grad(log_probs, target)


def _loss_and_grad(log_probs: np.ndarray, target):
    alpha, beta, ext = ctc_forward_backward(log_probs, target)
    S = alpha.shape[1]
    log_p = np.logaddexp.reduce(alpha[-1, max(S - 2, 0):])
    if not np.isfinite(log_p):
        raise InfeasibleAlignment(len(ext) // 2, required_frames(ext[1::2]), alpha.shape[0])
    occ = np.exp(alpha + beta - log_p)
    gamma = np.zeros(log_probs.shape)
    np.add.at(gamma.T, ext, occ.T)
    grad = np.exp(log_probs) - gamma
    return float(-log_p), grad


def best_path(probs: np.ndarray) -> list[int]:
    """Per-frame argmax, repeats collapsed, blanks removed."""
    blank = probs.shape[1] - 1
    out = []
    prev = -1
    for k in np.argmax(probs, axis=1):
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return out


def greedy_decode(probs: np.ndarray, alphabet: str) -> str:
    return "".join(alphabet[k] for k in best_path(probs))
