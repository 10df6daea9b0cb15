"""Per-operator finite-difference checks for the autodiff engine."""

import numpy as np
import pytest

from difftrack import autodiff as ad


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_grads(build, params, rng, probes=6, h=1e-6, tol=1e-6):
    """Compare analytic gradients with central differences at random entries."""
    ad.zero_gradients(params)
    build().backward()
    worst = 0.0
    for p in params.values():
        flat = p.data.ravel()
        g = p.grad.ravel()
        for idx in rng.choice(flat.size, size=min(probes, flat.size),
                              replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            lp = float(build().data)
            flat[idx] = orig - h
            lm = float(build().data)
            flat[idx] = orig
            worst = max(worst, rel_err((lp - lm) / (2 * h), g[idx]))
    assert worst < tol, f"gradient mismatch {worst}"


class TestOperators:
    def setup_method(self):
        self.rng = np.random.default_rng(42)

    def _scalarizer(self, shape):
        """Fixed random target/weights so rebuilt graphs share one loss."""
        w = np.abs(self.rng.standard_normal(shape)) + 0.1
        tgt = self.rng.standard_normal(shape)
        return lambda t: ad.weighted_mse(t, tgt, w)

    def test_conv1d(self):
        x = self.rng.standard_normal((2, 3, 8))
        params = {
            "w": ad.parameter(self.rng.standard_normal((5, 3, 3)) * 0.4),
            "b": ad.parameter(self.rng.standard_normal(5) * 0.1),
        }
        sc = self._scalarizer((2, 5, 8))
        check_grads(lambda: sc(
            ad.conv1d(ad.constant(x), params["w"], params["b"])), params,
            self.rng)

    def test_conv1d_rejects_even_kernel(self):
        with pytest.raises(ValueError):
            ad.conv1d(ad.constant(np.zeros((1, 2, 4))),
                      ad.constant(np.zeros((3, 2, 2))),
                      ad.constant(np.zeros(3)))

    def test_affine_and_mish(self):
        x = self.rng.standard_normal((4, 6))
        params = {
            "w": ad.parameter(self.rng.standard_normal((6, 3)) * 0.5),
            "b": ad.parameter(self.rng.standard_normal(3) * 0.1),
        }
        sc = self._scalarizer((4, 3))
        check_grads(lambda: sc(
            ad.mish(ad.affine(ad.constant(x), params["w"], params["b"]))),
            params, self.rng)

    def test_pool_and_upsample(self):
        params = {"x": ad.parameter(self.rng.standard_normal((2, 3, 8)))}
        sc = self._scalarizer((2, 3, 8))
        check_grads(lambda: sc(
            ad.upsample_nearest1d(ad.avg_pool1d(params["x"]))), params,
            self.rng)

    def test_concat_slice_transpose_reshape(self):
        params = {"a": ad.parameter(self.rng.standard_normal((3, 4))),
                  "b": ad.parameter(self.rng.standard_normal((3, 2)))}

        sc = self._scalarizer((2, 6))

        def build():
            cat = ad.concat([params["a"], params["b"]], axis=1)
            t = ad.transpose(cat, (1, 0))
            s = ad.slice_axis(t, 0, 1, 5)
            return sc(ad.reshape(s, (2, 6)))

        check_grads(build, params, self.rng)

    def test_broadcast_add_mul(self):
        params = {"v": ad.parameter(self.rng.standard_normal((1, 5))),
                  "m": ad.parameter(self.rng.standard_normal((4, 5)))}
        sc = self._scalarizer((4, 5))
        check_grads(lambda: sc(
            ad.add(ad.mul(params["m"], 0.7), params["v"])), params, self.rng)

    def test_weighted_mse_value(self):
        pred = ad.constant(np.array([1.0, 2.0]))
        out = ad.weighted_mse(pred, np.array([0.0, 0.0]),
                              np.array([1.0, 3.0]))
        assert float(out.data) == pytest.approx((1.0 + 3.0 * 4.0) / 4.0)

    def test_backward_requires_scalar(self):
        t = ad.parameter(np.zeros(3))
        with pytest.raises(ValueError):
            ad.add(t, 1.0).backward()


class TestOptimizer:
    def test_adam_reduces_quadratic(self):
        rng = np.random.default_rng(0)
        target = rng.standard_normal(8)
        params = {"x": ad.parameter(np.zeros(8))}
        state = ad.AdamState(params)
        for _ in range(400):
            ad.zero_gradients(params)
            lossv = ad.weighted_mse(params["x"], target, np.ones(8))
            lossv.backward()
            ad.adam_step(params, state, 0.05)
        np.testing.assert_allclose(params["x"].data, target, atol=1e-2)

    def test_clip_gradients(self):
        params = {"x": ad.parameter(np.zeros(4))}
        params["x"].grad = np.full(4, 10.0)
        norm = ad.clip_gradients(params, 1.0)
        assert norm == pytest.approx(20.0)
        assert np.linalg.norm(params["x"].grad) == pytest.approx(1.0)

    def test_zero_learning_rate_keeps_params(self):
        rng = np.random.default_rng(1)
        params = {"x": ad.parameter(rng.standard_normal(5))}
        before = params["x"].data.copy()
        state = ad.AdamState(params)
        params["x"].grad = rng.standard_normal(5)
        ad.adam_step(params, state, 0.0)
        np.testing.assert_array_equal(params["x"].data, before)
