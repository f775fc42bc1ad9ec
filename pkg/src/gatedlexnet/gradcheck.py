"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import Layer, no_grad, record_branches

STEP = 1e-5
TOLERANCE = 1e-4
# below this magnitude both gradients count as zero and the error is absolute;
# it sits above the round-off of a central difference at h=1e-5 on an O(10) loss
FLOOR = 1e-5


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    probes: int
    # probes dropped because the two evaluations took different branches of a kink
    excluded: int = 0

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return f"{status} {self.name} max_rel_err={self.max_rel_error:.3e} probes={self.probes} excluded={self.excluded}"


def rel_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), FLOOR)


def _probe_indices(size: int, n_probe: int | None, rng: np.random.Generator):
    if n_probe is None or size <= n_probe:
        return np.arange(size)
    return rng.choice(size, n_probe, replace=False)


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, flat_index: int, h: float = STEP) -> float:
    flat = arr.reshape(-1)
    old = flat[flat_index]
    flat[flat_index] = old + h
    fp = f()
    flat[flat_index] = old - h
    fm = f()
    flat[flat_index] = old
    return (fp - fm) / (2 * h)


def _branched_difference(f: Callable[[], float], arr: np.ndarray, flat_index: int, h: float):
    """Central difference plus the ReLU and max-pool branch patterns seen at ``x+h`` and ``x-h``."""
    flat = arr.reshape(-1)
    old = flat[flat_index]
    values, patterns = [], []
    for value in (old + h, old - h):
        flat[flat_index] = value
        with record_branches() as branches:
            values.append(f())
        patterns.append(branches)
    flat[flat_index] = old
    return (values[0] - values[1]) / (2 * h), patterns


def check_arrays(
    loss_and_grads: Callable[[], tuple[float, dict[str, np.ndarray]]],
    loss_only: Callable[[], float],
    arrays: dict[str, np.ndarray],
    n_probe: int | None = 20,
    rng: np.random.Generator | None = None,
    h: float = STEP,
    exclude: Callable[[str, int], bool] | None = None,
) -> list[GradCheckResult]:
    """Compare analytic gradients of named arrays against central differences.

    ``arrays`` maps names to the live arrays the loss reads (they are
    perturbed in place and restored). ``loss_and_grads`` returns the loss and
    the analytic gradient for every name.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    _, grads = loss_and_grads()
    grads = {k: np.array(v, copy=True) for k, v in grads.items()}
    with record_branches() as centre:
        loss_only()
    results = []
    for name, arr in arrays.items():
        worst = 0.0
        probes = excluded = 0
        for idx in _probe_indices(arr.size, n_probe, rng):
            if exclude is not None and exclude(name, int(idx)):
                continue
            num, patterns = _branched_difference(loss_only, arr, int(idx), h)
            if not (patterns[0] == centre and patterns[1] == centre):
                excluded += 1
                continue
            worst = max(worst, float(rel_error(grads[name].reshape(-1)[idx], num)))
            probes += 1
        results.append(GradCheckResult(name, worst, probes, excluded))
    return results


def check_layer(
    layer: Layer,
    x: np.ndarray,
    rng: np.random.Generator | None = None,
    n_probe: int | None = 20,
    check_input: bool = True,
    exclude_input: Callable[[int], bool] | None = None,
) -> list[GradCheckResult]:
    """Gradient check of a single-input layer under the loss ``sum(forward(x) * R)``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    with no_grad():
        r = rng.standard_normal(np.shape(layer(x)))

    def loss_and_grads():
        layer.clear_cache()
        layer.zero_grad()
        y = layer(x)
        dx = layer.backward(r)
        grads = {name: lay.grads[key] for name, lay, key in layer.named_parameters()}
        grads["input"] = dx
        return float(np.sum(y * r)), grads

    def loss_only():
        with no_grad():
            return float(np.sum(layer(x) * r))

    arrays = {name: lay.params[key] for name, lay, key in layer.named_parameters()}
    if check_input:
        arrays["input"] = x
    excl = None
    if exclude_input is not None:
        excl = lambda name, i: name == "input" and exclude_input(i)  # noqa: E731
    return check_arrays(loss_and_grads, loss_only, arrays, n_probe, rng, exclude=excl)


def check_model(model, image: np.ndarray, targets, lam: float = 1.0, n_probe: int | None = 6, rng=None):
    """Gradient check of every parameter tensor of a paragraph model under its joint loss."""
    rng = rng if rng is not None else np.random.default_rng(0)

    def loss_and_grads():
        model.zero_grad()
        total = model.loss(image, targets, lam).total
        return total, {name: lay.grads[key] for name, lay, key in model.named_parameters()}

    def loss_only():
        with no_grad():
            return model.loss(image, targets, lam, backward=False).total

    arrays = {name: lay.params[key] for name, lay, key in model.named_parameters()}
    return check_arrays(loss_and_grads, loss_only, arrays, n_probe, rng)


class _LSTMProbe(Layer):
    """Single-input view of an LSTM with a fixed nonzero initial state."""

    def __init__(self, lstm, rng: np.random.Generator):
        super().__init__()
        self.lstm = lstm
        self.h0 = 0.5 * rng.standard_normal(lstm.hidden)
        self.c0 = 0.5 * rng.standard_normal(lstm.hidden)

    def forward(self, x):
        return self.lstm(x, self.h0, self.c0)[0]

    def backward(self, dout):
        return self.lstm.backward(dout, np.zeros_like(self.h0), np.zeros_like(self.c0))[0]


def tiny_model_config(n_chars: int = 4, gated_placement: str = "early"):
    from .attention import AttentionConfig
    from .encoder import EncoderConfig
    from .model import ModelConfig

    enc = EncoderConfig(
        cb_channels=[4, 6],
        cb_strides=[(2, 2), (2, 1)],
        dscb_channels=[6],
        dropout_elem=0.0,
        dropout_chan=0.0,
        gated_placement=gated_placement,
    )
    return ModelConfig(enc, AttentionConfig(dim=8, coverage_channels=3, coverage_kernel=3), hidden=8, n_chars=n_chars)


def gradient_suite(seed: int = 0, n_probe: int | None = 12) -> list[GradCheckResult]:
    """Finite-difference check of every parameterized layer type and of the full joint loss.

    Must run in 64-bit precision.
    """
    from .decoder import LSTM, ClassProjection
    from .encoder import DepthwiseSeparableConv2d, GatedConv2d, InstanceNorm2d
    from .model import GatedLexiconNet
    from .numerics import Conv2d

    rng = np.random.default_rng(seed)
    results: list[GradCheckResult] = []

    def run(prefix: str, layer: Layer, x: np.ndarray):
        for r in check_layer(layer, x, rng, n_probe):
            r.name = f"{prefix}.{r.name}"
            results.append(r)

    x = rng.standard_normal((3, 7, 9))
    run("conv", Conv2d(3, 4, 3, stride=(2, 1), rng=rng), x)
    run("gated_conv", GatedConv2d(3, rng), x)
    norm = InstanceNorm2d(3)
    norm.params["gamma"][:] = rng.uniform(0.5, 1.5, 3)
    norm.params["beta"][:] = rng.standard_normal(3)
    run("instance_norm", norm, x)
    run("dsc", DepthwiseSeparableConv2d(3, 5, 3, stride=(2, 2), rng=rng), x)
    run("lstm", _LSTMProbe(LSTM(4, 5, rng), rng), rng.standard_normal((6, 4)))
    run("projection", ClassProjection(5, 4, rng), rng.standard_normal((6, 5)))

    model = GatedLexiconNet(tiny_model_config(), seed=seed)
    model.eval()
    image = rng.uniform(0.0, 1.0, (1, 16, 24))
    for r in check_model(model, image, [[0, 1, 1], [2]], lam=1.0, n_probe=n_probe, rng=rng):
        r.name = f"model.{r.name}"
        results.append(r)
    return results
