"""Independent reference implementations used only by the tests.

Nothing here imports the package's numerical code, so agreement between a
package routine and its oracle is a genuine two-route check.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np
from scipy.signal import correlate2d


# ---------------------------------------------------------------------------
# CTC


def collapse(path, blank):
    out, prev = [], None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


def brute_force_ctc_table(probs: np.ndarray) -> dict[tuple, float]:
    """Map every reachable label sequence to the total probability of its paths."""
    T, C = probs.shape
    blank = C - 1
    table: dict[tuple, float] = {}
    for path in itertools.product(range(C), repeat=T):
        p = float(np.prod(probs[np.arange(T), path]))
        key = collapse(path, blank)
        table[key] = table.get(key, 0.0) + p
    return table


def ctc_prob_reference(probs: np.ndarray, target) -> float:
    """Plain probability-space alpha recursion (no log tricks)."""
    T, C = probs.shape
    blank = C - 1
    ext = [blank]
    for k in target:
        ext += [k, blank]
    S = len(ext)
    alpha = [0.0] * S
    alpha[0] = probs[0, blank]
    if S > 1:
        alpha[1] = probs[0, ext[1]]
    for t in range(1, T):
        new = [0.0] * S
        for s in range(S):
            a = alpha[s] + (alpha[s - 1] if s >= 1 else 0.0)
            if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                a += alpha[s - 2]
            new[s] = a * probs[t, ext[s]]
        alpha = new
    return alpha[-1] + (alpha[-2] if S > 1 else 0.0)


def ctc_logprob_reference(logits: np.ndarray, target) -> float:
    """Log-space recursion from raw logits, in plain Python floats."""
    T, C = logits.shape
    lp = [[float(v) - _logsumexp(row) for v in row] for row in logits.tolist()]
    blank = C - 1
    ext = [blank]
    for k in target:
        ext += [k, blank]
    S = len(ext)
    alpha = [-math.inf] * S
    alpha[0] = lp[0][blank]
    if S > 1:
        alpha[1] = lp[0][ext[1]]
    for t in range(1, T):
        new = [-math.inf] * S
        for s in range(S):
            terms = [alpha[s]]
            if s >= 1:
                terms.append(alpha[s - 1])
            if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                terms.append(alpha[s - 2])
            new[s] = _logsumexp(terms) + lp[t][ext[s]]
        alpha = new
    return _logsumexp(alpha[-2:]) if S > 1 else alpha[-1]


def _logsumexp(vals) -> float:
    vals = list(vals)
    m = max(vals)
    if m == -math.inf:
        return m
    return m + math.log(sum(math.exp(v - m) for v in vals))


# ---------------------------------------------------------------------------
# edit distance


def levenshtein_reference(a, b) -> int:
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


# ---------------------------------------------------------------------------
# lexicon-constrained search


def lexicon_labelings(words, non_word_chars, max_len: int) -> set[str]:
    """All strings up to ``max_len`` whose maximal word-character runs are lexicon words.

    Built from tokens (a lexicon word or one non-word character), never
    placing two word tokens side by side.
    """
    out = {""}
    frontier = {("", False)}
    for _ in range(max_len):
        nxt = set()
        for text, ends_word in frontier:
            for c in non_word_chars:
                if len(text) + 1 <= max_len:
                    nxt.add((text + c, False))
            if not ends_word:
                for w in words:
                    if len(text) + len(w) <= max_len:
                        nxt.add((text + w, True))
        nxt -= frontier
        if not nxt:
            break
        out |= {t for t, _ in nxt}
        frontier = nxt
    return out


def bigram_logprob(words_seq, unigram, bigram, vocab_size, total) -> float:
    lp, prev = 0.0, None
    for w in words_seq:
        if prev is None:
            p = (unigram.get(w, 0) + 1) / (total + vocab_size)
        else:
            hist = sum(n for (a, _), n in bigram.items() if a == prev)
            p = (bigram.get((prev, w), 0) + 1) / (hist + vocab_size)
        lp += math.log(p)
        prev = w
    return lp


def exhaustive_decode(probs, alphabet, words, non_word_chars, word_chars, lm=None):
    """Highest-scoring lexicon-consistent labeling (ties broken by text)."""
    T = probs.shape[0]
    best = None
    for text in lexicon_labelings(words, non_word_chars, T):
        labels = [alphabet.index(c) for c in text]
        repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
        if len(labels) + repeats > T:
            continue
        p = ctc_prob_reference(probs, labels)
        if p <= 0:
            continue
        score = math.log(p)
        if lm is not None:
            runs = "".join(c if c in word_chars else " " for c in text).split()
            score += bigram_logprob(runs, *lm)
        key = (-score, text)
        if best is None or key < best:
            best = key
    return None if best is None else best[1]


# ---------------------------------------------------------------------------
# scripted forward pass of the paragraph model (eval mode)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _softmax(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def conv_reference(x, w, b, stride=(1, 1), pad=None):
    c_out, c_in, kh, kw = w.shape
    ph, pw = pad if pad is not None else (kh // 2, kw // 2)
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    full = np.stack([sum(correlate2d(xp[i], w[o, i], mode="valid") for i in range(c_in)) for o in range(c_out)])
    return full[:, :: stride[0], :: stride[1]] + b[:, None, None]


def depthwise_reference(x, k, b, stride=(1, 1)):
    ph = k.shape[1] // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (ph, ph)))
    full = np.stack([correlate2d(xp[c], k[c], mode="valid") for c in range(x.shape[0])])
    return full[:, :: stride[0], :: stride[1]] + b[:, None, None]


def instance_norm_reference(x, gamma, beta, eps=1e-5):
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        mu = x[c].mean()
        var = ((x[c] - mu) ** 2).mean()
        out[c] = gamma[c] * (x[c] - mu) / np.sqrt(var + eps) + beta[c]
    return out


def scripted_loss(params: dict, cfg, image, targets, lam=1.0) -> tuple[float, float, float]:
    """Joint loss recomputed from a flat ``{name: array}`` parameter dict.

    Only dropout-free (eval) behaviour is modelled.
    """
    P = params
    enc = cfg.encoder

    def unit(prefix, x, kind, stride=(1, 1)):
        if kind == "conv":
            y = conv_reference(x, P[f"{prefix}.conv.weight"], P[f"{prefix}.conv.bias"], stride)
        else:
            y = depthwise_reference(x, P[f"{prefix}.conv.depthwise"], P[f"{prefix}.conv.depthwise_bias"], stride)
            y = conv_reference(y, P[f"{prefix}.conv.pointwise"], P[f"{prefix}.conv.pointwise_bias"])
        y = np.maximum(y, 0.0)
        return instance_norm_reference(y, P[f"{prefix}.norm.gamma"], P[f"{prefix}.norm.beta"])

    def gated(prefix, x):
        a = np.tanh(conv_reference(x, P[f"{prefix}.w_filter"], P[f"{prefix}.b_filter"]))
        g = _sigmoid(conv_reference(x, P[f"{prefix}.w_gate"], P[f"{prefix}.b_gate"]))
        return a * g

    x = image.astype(np.float64)
    n_cb = len(enc.cb_channels)
    for i, stride in enumerate(enc.cb_strides):
        pre = f"encoder.blocks.{i}.layers"
        y = unit(f"{pre}.0", x, "conv")
        y = unit(f"{pre}.1", y, "conv")
        k = 2
        if enc.gated_placement == "early":
            y = gated(f"{pre}.{k}", y)
            k += 1
        y = unit(f"{pre}.{k}", y, "conv", tuple(stride))
        k += 1
        if enc.gated_placement == "late":
            y = gated(f"{pre}.{k}", y)
        x = y + x if y.shape == x.shape else y
    for j in range(len(enc.dscb_channels)):
        pre = f"encoder.blocks.{n_cb + j}.layers"
        y = x
        for u in range(3):
            y = unit(f"{pre}.{u}", y, "dsc")
        x = y + x if y.shape == x.shape else y
    F = x  # [C, H, W]
    C, H, W = F.shape

    a = "attention"
    hidden = cfg.hidden
    row_proj = F.mean(axis=2).T @ P[f"{a}.w_feat"].T
    beta_prev = np.zeros(H)
    cov = np.zeros(H)
    h = np.zeros(hidden)
    c = np.zeros(hidden)
    kcov = P[f"{a}.cov_kernel"]
    kk = kcov.shape[-1]
    ctc_sum = ce_sum = 0.0
    n = len(targets)
    for t in range(n + 1):
        ctx = np.stack([beta_prev, cov])
        padded = np.pad(ctx, ((0, 0), (kk // 2, kk // 2)))
        j = np.array([
            [sum(kcov[o, ch, 0, q] * padded[ch, r + q] for ch in range(2) for q in range(kk)) + P[f"{a}.cov_bias"][o]
             for r in range(H)]
            for o in range(kcov.shape[0])
        ])
        s = np.tanh(row_proj + j.T @ P[f"{a}.w_ctx"].T + P[f"{a}.w_hid"] @ h + P[f"{a}.b_score"])
        beta = _softmax(s @ P[f"{a}.v"])
        d = _softmax(P[f"{a}.w_end"] @ np.concatenate([s.max(axis=0), h]) + P[f"{a}.b_end"])
        target_d = np.array([0.0, 1.0]) if t < n else np.array([1.0, 0.0])
        ce_sum += -float(np.sum(target_d * np.log(d)))
        if t == n:
            break
        line = np.array([[np.dot(beta, F[ch, :, w]) for ch in range(C)] for w in range(W)])
        hs = []
        for xt in line:
            z = P["lstm.w_x"] @ xt + P["lstm.w_h"] @ h + P["lstm.bias"]
            i_g, f_g, o_g = (_sigmoid(z[k * hidden : (k + 1) * hidden]) for k in range(3))
            g_g = np.tanh(z[3 * hidden :])
            c = f_g * c + i_g * g_g
            h = o_g * np.tanh(c)
            hs.append(h)
        logits = np.array(hs) @ P["proj.weight"].T + P["proj.bias"]
        ctc_sum += -ctc_logprob_reference(logits, targets[t])
        cov = cov + beta
        beta_prev = beta
    return ctc_sum + lam * ce_sum, ctc_sum, ce_sum


# ---------------------------------------------------------------------------
# image resampling


def bilinear_reference(img, out_h, out_w):
    """Pixel-centre aligned bilinear resize, one output pixel at a time."""
    h, w = len(img), len(img[0])

    def src(i, n_in, n_out):
        x = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(x))
        return lo, min(lo + 1, n_in - 1), x - lo

    out = []
    for i in range(out_h):
        y0, y1, fy = src(i, h, out_h)
        row = []
        for j in range(out_w):
            x0, x1, fx = src(j, w, out_w)
            top = img[y0][x0] * (1 - fx) + img[y0][x1] * fx
            bot = img[y1][x0] * (1 - fx) + img[y1][x1] * fx
            row.append(top * (1 - fy) + bot * fy)
        out.append(row)
    return np.array(out)
