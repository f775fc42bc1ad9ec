"""Line decoder: one LSTM layer read left to right, then a 1x1 projection to classes."""

from __future__ import annotations

import numpy as np

from .numerics import Layer, Linear, get_dtype, glorot_uniform, sigmoid, softmax


class LSTM(Layer):
    """Single-layer LSTM. Gate order in the stacked weights: input, forget, output, candidate."""

    def __init__(self, d_in: int, hidden: int, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in = d_in
        self.hidden = hidden
        self.add_param("w_x", glorot_uniform(rng, (4 * hidden, d_in), d_in, hidden))
        self.add_param("w_h", glorot_uniform(rng, (4 * hidden, hidden), hidden, hidden))
        self.add_param("bias", np.zeros(4 * hidden, dtype=get_dtype()))

    def initial_state(self):
        z = np.zeros(self.hidden, dtype=get_dtype())
        return z, z.copy()

    def forward(self, x, h0=None, c0=None):
        """Run over ``x[T, d_in]``; returns ``(hs[T, hidden], h_last, c_last)``."""
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(f"LSTM expects input [T, {self.d_in}], got {x.shape}")
        if h0 is None:
            h0, c0 = self.initial_state()
        if h0.shape != (self.hidden,) or c0.shape != (self.hidden,):
            raise ValueError(f"LSTM state must have shape ({self.hidden},)")
        n = self.hidden
        w_h = self.params["w_h"]
        xw = x @ self.params["w_x"].T + self.params["bias"]
        T = x.shape[0]
        hs = np.empty((T, n), dtype=xw.dtype)
        cs = np.empty((T, n), dtype=xw.dtype)
        gates = np.empty((T, 4 * n), dtype=xw.dtype)
        h, c = h0, c0
        for t in range(T):
            z = xw[t] + w_h @ h
            g = np.empty_like(z)
            g[: 3 * n] = sigmoid(z[: 3 * n])
            g[3 * n :] = np.tanh(z[3 * n :])
            c = g[n : 2 * n] * c + g[:n] * g[3 * n :]
            h = g[2 * n : 3 * n] * np.tanh(c)
            gates[t], cs[t], hs[t] = g, c, h
        self._save((x, h0, c0, hs, cs, gates))
        return hs, h, c

    def backward(self, dhs, dh_last=None, dc_last=None):
        """Return ``(dx, dh0, dc0)``."""
        x, h0, c0, hs, cs, gates = self._pop()
        n = self.hidden
        T = x.shape[0]
        w_h = self.params["w_h"]
        dh_next = np.zeros(n) if dh_last is None else dh_last.copy()
        dc_next = np.zeros(n) if dc_last is None else dc_last.copy()
        dz = np.empty_like(gates)
        for t in range(T - 1, -1, -1):
            g = gates[t]
            i, f, o, cand = g[:n], g[n : 2 * n], g[2 * n : 3 * n], g[3 * n :]
            c_prev = cs[t - 1] if t > 0 else c0
            tc = np.tanh(cs[t])
            dh = dhs[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dzt = dz[t]
            dzt[:n] = dc * cand * i * (1.0 - i)
            dzt[n : 2 * n] = dc * c_prev * f * (1.0 - f)
            dzt[2 * n : 3 * n] = dh * tc * o * (1.0 - o)
            dzt[3 * n :] = dc * i * (1.0 - cand * cand)
            dh_next = w_h.T @ dzt
            dc_next = dc * f
        h_prev = np.vstack([h0[None, :], hs[:-1]])
        self.grads["w_x"] += dz.T @ x
        self.grads["w_h"] += dz.T @ h_prev
        self.grads["bias"] += dz.sum(axis=0)
        return dz @ self.params["w_x"], dh_next, dc_next


class ClassProjection(Linear):
    """1x1 convolution over the hidden sequence, producing ``n_classes`` logits per step."""

    def __init__(self, hidden: int, n_classes: int, rng=None):
        super().__init__(hidden, n_classes, rng)

    def probs(self, hs):
        return softmax(self.forward(hs), axis=-1)


def project_to_classes(hidden: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map ``hidden[T, D] -> [T, N+1]`` followed by a row softmax."""
    return softmax(hidden @ weight.T + bias, axis=-1)
