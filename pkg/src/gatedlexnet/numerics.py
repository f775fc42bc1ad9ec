"""Dense array kernels with analytic backward passes.

Tensors are plain numpy arrays laid out channel-first (``[C, H, W]`` for
feature maps, ``[T, D]`` for sequences). Every primitive comes as a
``forward`` / ``backward`` pair; layers wrap the pairs, cache what the
backward pass needs and accumulate parameter gradients.
"""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

_DTYPE = np.float64
_CACHING = True
# when a list, non-smooth ops append their branch pattern (see ``record_branches``)
_BRANCHES: list | None = None


class NumericalInstabilityError(FloatingPointError):
    """A non-finite value appeared in a forward pass, a loss or a gradient."""

    def __init__(self, where: str, iteration: int | None = None):
        self.where = where
        self.iteration = iteration
        super().__init__(self._message())

    def _message(self) -> str:
        msg = f"non-finite values in {self.where}"
        if self.iteration is not None:
            msg = f"iteration {self.iteration}: {msg}"
        return msg

    def at_iteration(self, iteration: int) -> "NumericalInstabilityError":
        return NumericalInstabilityError(self.where, iteration)


def set_precision(name: str) -> None:
    """Select the global float type: ``"float64"`` or ``"float32"``."""
    global _DTYPE
    if name not in ("float64", "float32"):
        raise ValueError(f"unknown precision {name!r}")
    _DTYPE = np.dtype(name).type


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    old = np.dtype(_DTYPE).name
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable activation caching (inference on large inputs)."""
    global _CACHING
    old = _CACHING
    _CACHING = False
    try:
        yield
    finally:
        _CACHING = old


def caching_enabled() -> bool:
    return _CACHING


@contextlib.contextmanager
def record_branches() -> Iterator[list]:
    """Collect the branch taken by every non-smooth op (ReLU signs, max-pool indices).

    Finite-difference checks use this to discard probes whose two evaluations
    straddle a kink.
    """
    global _BRANCHES
    old = _BRANCHES
    _BRANCHES = []
    try:
        yield _BRANCHES
    finally:
        _BRANCHES = old


def log_branch(pattern: np.ndarray) -> None:
    if _BRANCHES is not None:
        _BRANCHES.append(np.packbits(np.asarray(pattern).astype(np.uint8).ravel()).tobytes()
                         if pattern.dtype == bool else np.asarray(pattern).tobytes())


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalInstabilityError(where)
    return x


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(_DTYPE)


# ---------------------------------------------------------------------------
# convolution


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _taps(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, sh: int, sw: int):
    for i in range(kh):
        for j in range(kw):
            yield i, j, xp[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]


# above this many column-matrix elements convolutions loop over taps instead
_IM2COL_LIMIT = 1 << 24


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, sh: int, sw: int) -> np.ndarray:
    ci = xp.shape[0]
    cols = np.empty((ci, kh, kw, ho, wo), dtype=xp.dtype)
    for i, j, patch in _taps(xp, kh, kw, ho, wo, sh, sw):
        cols[:, i, j] = patch
    return cols.reshape(ci * kh * kw, ho * wo)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, stride=1, pad=0) -> np.ndarray:
    """Cross-correlate ``x[C_in, H, W]`` with ``w[C_out, C_in, kh, kw]``.

    Output size follows ``floor((H + 2*pad - k) / stride) + 1``. The
    kernel is applied with ``k`` taps per axis, offsets ``0..k-1``.
    """
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError(f"conv2d expects x[C,H,W] and w[O,C,kh,kw], got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ValueError(
            f"conv2d channel mismatch: kernel expects {w.shape[1]} input channels, input has {x.shape[0]}"
        )
    co, ci, kh, kw = w.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    if sh < 1 or sw < 1:
        raise ValueError(f"stride must be >= 1, got {(sh, sw)}")
    ho = conv_output_size(x.shape[1], kh, sh, ph)
    wo = conv_output_size(x.shape[2], kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d input {x.shape} too small for kernel {w.shape[2:]} with pad {(ph, pw)}")
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    if ci * kh * kw * ho * wo <= _IM2COL_LIMIT:
        out = w.reshape(co, -1) @ _im2col(xp, kh, kw, ho, wo, sh, sw)
    else:
        out = np.zeros((co, ho * wo), dtype=np.result_type(x, w))
        for i, j, patch in _taps(xp, kh, kw, ho, wo, sh, sw):
            out += np.ascontiguousarray(w[:, :, i, j]) @ patch.reshape(ci, -1)
    out = out.reshape(co, ho, wo)
    if b is not None:
        out += b[:, None, None]
    return out


def conv2d_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray, stride=1, pad=0):
    """Return ``(dx, dw, db)`` for :func:`conv2d`."""
    co, ci, kh, kw = w.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    _, ho, wo = dout.shape
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    dxp = np.zeros_like(xp)
    d2 = dout.reshape(co, -1)
    if ci * kh * kw * ho * wo <= _IM2COL_LIMIT:
        cols = _im2col(xp, kh, kw, ho, wo, sh, sw)
        dw = (d2 @ cols.T).reshape(w.shape)
        dcols = (w.reshape(co, -1).T @ d2).reshape(ci, kh, kw, ho, wo)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += dcols[:, i, j]
    else:
        dw = np.zeros_like(w)
        for i, j, patch in _taps(xp, kh, kw, ho, wo, sh, sw):
            dw[:, :, i, j] = d2 @ patch.reshape(ci, -1).T
            dxp[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += (
                np.ascontiguousarray(w[:, :, i, j]).T @ d2
            ).reshape(ci, ho, wo)
    dx = dxp[:, ph : ph + x.shape[1], pw : pw + x.shape[2]]
    return dx, dw, d2.sum(axis=1)


def depthwise_conv2d(x: np.ndarray, k: np.ndarray, b: np.ndarray | None = None, stride=1, pad=0) -> np.ndarray:
    """Convolve channel ``c`` of ``x[C, H, W]`` with its own kernel ``k[c]`` (``k[C, kh, kw]``)."""
    if k.ndim != 3 or k.shape[0] != x.shape[0]:
        raise ValueError(f"depthwise kernel {k.shape} does not match input channels {x.shape[0]}")
    c, kh, kw = k.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    ho = conv_output_size(x.shape[1], kh, sh, ph)
    wo = conv_output_size(x.shape[2], kw, sw, pw)
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    out = np.zeros((c, ho, wo), dtype=np.result_type(x, k))
    for i, j, patch in _taps(xp, kh, kw, ho, wo, sh, sw):
        out += k[:, i, j, None, None] * patch
    if b is not None:
        out += b[:, None, None]
    return out


def depthwise_conv2d_backward(dout: np.ndarray, x: np.ndarray, k: np.ndarray, stride=1, pad=0):
    c, kh, kw = k.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    _, ho, wo = dout.shape
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(k)
    for i, j, patch in _taps(xp, kh, kw, ho, wo, sh, sw):
        dk[:, i, j] = np.einsum("chw,chw->c", dout, patch)
        dxp[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += k[:, i, j, None, None] * dout
    dx = dxp[:, ph : ph + x.shape[1], pw : pw + x.shape[2]]
    return dx, dk, dout.sum(axis=(1, 2))


# ---------------------------------------------------------------------------
# elementwise maps


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        log_branch(x > 0)
        return np.maximum(x, 0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(dout: np.ndarray, x: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    """Gradient of :func:`activation` given its input ``x`` and output ``y``."""
    if kind == "relu":
        return dout * (x > 0)
    if kind == "tanh":
        return dout * (1.0 - y * y)
    if kind == "sigmoid":
        return dout * y * (1.0 - y)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax_backward(dout: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of softmax with output ``y``."""
    return y * (dout - np.sum(dout * y, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# layers


class Layer:
    """Base class: named parameters, matching gradients, cached forward state.

    Sub-layers are discovered from attributes holding a ``Layer`` or a list
    of layers, in attribute definition order.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.training = False
        self._cache: list = []

    def add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def children(self) -> Iterator[tuple[str, "Layer"]]:
        for name, val in vars(self).items():
            if isinstance(val, Layer):
                yield name, val
            elif isinstance(val, list) and val and all(isinstance(v, Layer) for v in val):
                for i, v in enumerate(val):
                    yield f"{name}.{i}", v

    def named_layers(self, prefix: str = "") -> Iterator[tuple[str, "Layer"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.named_layers(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, "Layer", str]]:
        """Yield ``(full_name, owning_layer, key)`` for every parameter."""
        for lname, layer in self.named_layers(prefix):
            for key in layer.params:
                yield (f"{lname}.{key}" if lname else key), layer, key

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter, keyed by dotted name."""
        return {name: layer.params[key].copy() for name, layer, key in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: (layer, key) for name, layer, key in self.named_parameters()}
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, (layer, key) in own.items():
            if layer.params[key].shape != state[name].shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {layer.params[key].shape}")
            layer.params[key] = np.array(state[name], dtype=get_dtype())
            layer.grads[key] = np.zeros_like(layer.params[key])

    def zero_grad(self) -> None:
        for _, layer in self.named_layers():
            for key in layer.grads:
                layer.grads[key] = np.zeros_like(layer.params[key])

    def train(self, mode: bool = True) -> "Layer":
        for _, layer in self.named_layers():
            layer.training = mode
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def num_params(self) -> int:
        return sum(layer.params[key].size for _, layer, key in self.named_parameters())

    def clear_cache(self) -> None:
        for _, layer in self.named_layers():
            layer._cache = []

    # Forward results are pushed and backward pops them, so a layer applied
    # several times (once per text line) is unwound in reverse order.
    def _save(self, cache) -> None:
        if _CACHING:
            self._cache.append(cache)

    def _pop(self):
        if not self._cache:
            raise RuntimeError(f"{type(self).__name__}.backward called before forward")
        return self._cache.pop()

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Layer):
    def __init__(self, c_in: int, c_out: int, k=3, stride=1, pad=None, rng=None):
        super().__init__()
        kh, kw = _pair(k)
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {(kh, kw)}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = _pair(stride)
        self.pad = _pair(pad) if pad is not None else (kh // 2, kw // 2)
        self.add_param("weight", glorot_uniform(rng, (c_out, c_in, kh, kw), c_in * kh * kw, c_out * kh * kw))
        self.add_param("bias", np.zeros(c_out, dtype=get_dtype()))

    def forward(self, x):
        self._save(x)
        return conv2d(x, self.params["weight"], self.params["bias"], self.stride, self.pad)

    def backward(self, dout):
        x = self._pop()
        dx, dw, db = conv2d_backward(dout, x, self.params["weight"], self.stride, self.pad)
        self.grads["weight"] += dw
        self.grads["bias"] += db
        return dx


class Activation(Layer):
    def __init__(self, kind: str):
        super().__init__()
        self.kind = kind

    def forward(self, x):
        y = activation(x, self.kind)
        self._save((x, y))
        return y

    def backward(self, dout):
        x, y = self._pop()
        return activation_backward(dout, x, y, self.kind)


class Linear(Layer):
    """Affine map over the last axis: ``x @ W.T + b``."""

    def __init__(self, d_in: int, d_out: int, rng=None, bias: bool = True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.add_param("weight", glorot_uniform(rng, (d_out, d_in), d_in, d_out))
        if bias:
            self.add_param("bias", np.zeros(d_out, dtype=get_dtype()))

    def forward(self, x):
        self._save(x)
        y = x @ self.params["weight"].T
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y

    def backward(self, dout):
        x = self._pop()
        d2 = dout.reshape(-1, dout.shape[-1])
        self.grads["weight"] += d2.T @ x.reshape(-1, x.shape[-1])
        if "bias" in self.params:
            self.grads["bias"] += d2.sum(axis=0)
        return dout @ self.params["weight"]
