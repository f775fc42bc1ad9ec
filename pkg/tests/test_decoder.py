import numpy as np
import pytest

from gatedlexnet.decoder import LSTM, ClassProjection, project_to_classes
from gatedlexnet.gradcheck import _LSTMProbe, check_layer
from gatedlexnet.numerics import no_grad


def sig(x):
    return 1 / (1 + np.exp(-x))


class TestLSTM:
    def test_zero_weights(self, rng):
        lstm = LSTM(3, 4, rng)
        for k in lstm.params:
            lstm.params[k][:] = 0
        hs, h, c = lstm(rng.standard_normal((5, 3)))
        np.testing.assert_array_equal(hs, 0.0)

    def test_single_step_equations(self, rng):
        lstm = LSTM(3, 2, rng)
        lstm.params["bias"][:] = rng.standard_normal(8)
        x = rng.standard_normal((1, 3))
        h0, c0 = rng.standard_normal(2), rng.standard_normal(2)
        W, U, b = lstm.params["w_x"], lstm.params["w_h"], lstm.params["bias"]
        z = W @ x[0] + U @ h0 + b
        i, f, o, g = sig(z[0:2]), sig(z[2:4]), sig(z[4:6]), np.tanh(z[6:8])
        c = f * c0 + i * g
        h = o * np.tanh(c)
        hs, h_last, c_last = lstm(x, h0, c0)
        np.testing.assert_allclose(hs[0], h, atol=1e-12)
        np.testing.assert_allclose(c_last, c, atol=1e-12)

    def test_state_carry(self, rng):
        lstm = LSTM(3, 4, rng)
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((6, 3))
        with no_grad():
            hs_a, h, c = lstm(a)
            hs_ab, _, _ = lstm(np.vstack([a, b]))
            hs_b, _, _ = lstm(b, h, c)
            hs_b_fresh, _, _ = lstm(b)
            hs_a_again, _, _ = lstm(a)
        np.testing.assert_array_equal(h, hs_a[-1])
        np.testing.assert_allclose(hs_b, hs_ab[4:], atol=1e-12)
        assert not np.allclose(hs_b, hs_b_fresh)
        np.testing.assert_array_equal(hs_a, hs_a_again)

    def test_input_checks(self, rng):
        lstm = LSTM(3, 4, rng)
        with pytest.raises(ValueError, match="input"):
            lstm(np.zeros((2, 5)))
        with pytest.raises(ValueError, match="state"):
            lstm(np.zeros((2, 3)), np.zeros(3), np.zeros(3))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        lstm = LSTM(3, 4, rng)
        lstm.params["bias"][:] = 0.5 * rng.standard_normal(16)
        results = check_layer(_LSTMProbe(lstm, rng), rng.standard_normal((5, 3)), rng, n_probe=None)
        assert all(r.ok for r in results), [r.line() for r in results]

    def test_state_gradients(self, rng):
        lstm = LSTM(2, 3, rng)
        x = rng.standard_normal((4, 2))
        h0, c0 = rng.standard_normal(3), rng.standard_normal(3)
        r = rng.standard_normal((4, 3))
        rh, rc = rng.standard_normal(3), rng.standard_normal(3)

        def loss(h0, c0):
            with no_grad():
                hs, h, c = lstm(x, h0, c0)
            return np.sum(hs * r) + h @ rh + c @ rc

        lstm(x, h0, c0)
        _, dh0, dc0 = lstm.backward(r, rh, rc)
        eps = 1e-6
        for k in range(3):
            e = np.eye(3)[k] * eps
            np.testing.assert_allclose(dh0[k], (loss(h0 + e, c0) - loss(h0 - e, c0)) / (2 * eps), rtol=1e-6, atol=1e-9)
            np.testing.assert_allclose(dc0[k], (loss(h0, c0 + e) - loss(h0, c0 - e)) / (2 * eps), rtol=1e-6, atol=1e-9)


class TestProjection:
    def test_zero_weights_uniform(self, rng):
        proj = ClassProjection(4, 5, rng)
        proj.params["weight"][:] = 0
        np.testing.assert_allclose(proj.probs(rng.standard_normal((3, 4))), 0.2)

    def test_rows_sum_to_one(self, rng):
        p = ClassProjection(4, 6, rng).probs(10 * rng.standard_normal((7, 4)))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(p >= 0)

    def test_composition_oracle(self, rng):
        proj = ClassProjection(4, 3, rng)
        proj.params["bias"][:] = rng.standard_normal(3)
        h = rng.standard_normal((5, 4))
        logits = h @ proj.params["weight"].T + proj.params["bias"]
        expected = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(proj.probs(h), expected, atol=1e-12)
        np.testing.assert_allclose(project_to_classes(h, proj.params["weight"], proj.params["bias"]), expected, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        proj = ClassProjection(4, 3, rng)
        results = check_layer(proj, rng.standard_normal((5, 4)), rng, n_probe=None)
        assert all(r.ok for r in results)
