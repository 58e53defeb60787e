"""Tests for discretization, selective projections, and the two scans."""

import math

import numpy as np
import pytest

from tokense import ssm
from tokense import tensor as T
from tokense.errors import PreconditionError
from tokense.ssm import (
    DiscretizedSeq,
    discretize_selective,
    discretize_zoh,
    init_selective_ssm,
    kernel_convolve,
    materialize_kernel,
    scan_parallel,
    scan_sequential,
    selective_project,
)


def _random_disc(rng, length, d, m, dtype=np.float64):
    """A random stable time-varying system as a DiscretizedSeq."""
    a_bar = np.exp(-rng.uniform(0.01, 3.0, size=(length, d, m)))  # in (0, 1)
    bbx = rng.standard_normal((length, d, m))
    c = rng.standard_normal((length, m))
    return DiscretizedSeq(
        a_bar=T.tensor(a_bar, dtype=dtype),
        b_bar_x=T.tensor(bbx, dtype=dtype),
        c=T.tensor(c, dtype=dtype),
    )


class TestDiscretize:
    def test_scalar_closed_form(self):
        a = T.tensor([[-1.0]])
        b = T.tensor([[1.0]])
        delta = T.tensor([[math.log(2.0)]])
        a_bar, b_bar = discretize_zoh(a, b, delta)
        assert abs(a_bar.data[0, 0, 0] - 0.5) < 1e-12
        assert abs(b_bar.data[0, 0, 0] - 0.5) < 1e-12

    def test_zero_a_hits_series_branch(self):
        a_bar, b_bar = discretize_zoh(T.tensor([[0.0]]), T.tensor([[1.0]]), T.tensor([[0.1]]))
        assert a_bar.data[0, 0, 0] == 1.0
        assert abs(b_bar.data[0, 0, 0] - 0.1) < 1e-15

    def test_series_and_exact_agree_at_switch(self):
        for z in [ssm.SERIES_SWITCH * s for s in (0.5, 0.99, 1.01, 2.0, -0.5, -0.99, -1.01, -2.0)]:
            assert abs(ssm.phi_series(z) - ssm.phi_exact(z)) < 1e-9, z

    def test_value_continuous_across_switch(self):
        eps = ssm.SERIES_SWITCH * 1e-3
        below = ssm.SERIES_SWITCH - eps
        above = ssm.SERIES_SWITCH + eps
        for sign in (1.0, -1.0):
            lo = discretize_zoh(T.tensor([[sign * below / 0.5]]), T.tensor([[1.0]]), T.tensor([[0.5]]))[1]
            hi = discretize_zoh(T.tensor([[sign * above / 0.5]]), T.tensor([[1.0]]), T.tensor([[0.5]]))[1]
            assert abs(lo.data[0, 0, 0] - hi.data[0, 0, 0]) < 1e-9

    def test_a_bar_in_unit_interval_for_stable_modes(self):
        rng = np.random.default_rng(0)
        a = -np.exp(rng.uniform(-3, 2, size=(4, 8)))
        delta = np.exp(rng.uniform(-6, 1, size=(10, 4)))
        a_bar, _ = discretize_zoh(T.tensor(a), T.tensor(rng.standard_normal((10, 8))), T.tensor(delta))
        assert np.all(a_bar.data > 0) and np.all(a_bar.data < 1)

    def test_rejects_nonpositive_delta(self):
        with pytest.raises(PreconditionError):
            discretize_zoh(T.tensor([[-1.0]]), T.tensor([[1.0]]), T.tensor([[0.0]]))


class TestScan:
    def test_scalar_worked_example(self):
        disc = DiscretizedSeq(
            a_bar=T.tensor(np.full((3, 1, 1), 0.5)),
            b_bar_x=T.tensor(np.array([1.0, 0.0, 0.0]).reshape(3, 1, 1)),
            c=T.tensor(np.ones((3, 1))),
        )
        for scan in (scan_sequential, scan_parallel):
            y = scan(disc)
            np.testing.assert_allclose(y.data[:, 0], [1.0, 0.5, 0.25], atol=1e-15)

    @pytest.mark.parametrize("length", [1, 2, 3, 17, 127, 256, 1000])
    def test_parallel_matches_sequential(self, length):
        rng = np.random.default_rng(length)
        disc = _random_disc(rng, length, 3, 4)
        h0 = T.tensor(rng.standard_normal((3, 4)))
        ys = scan_sequential(disc, h0=h0)
        yp = scan_parallel(disc, h0=h0)
        assert np.max(np.abs(ys.data - yp.data)) <= 1e-10

    def test_worker_count_does_not_change_bits(self):
        rng = np.random.default_rng(7)
        disc = _random_disc(rng, 200, 5, 4)
        try:
            T.set_scan_threads(1)
            y1 = scan_parallel(disc).data.copy()
            T.set_scan_threads(3)
            y3 = scan_parallel(disc).data.copy()
            T.set_scan_threads(8)
            y8 = scan_parallel(disc).data.copy()
        finally:
            T.set_scan_threads(1)
        np.testing.assert_array_equal(y1, y3)
        np.testing.assert_array_equal(y1, y8)

    def test_h0_zero_default(self):
        rng = np.random.default_rng(8)
        disc = _random_disc(rng, 5, 2, 3)
        y_default = scan_sequential(disc)
        y_zero = scan_sequential(disc, h0=T.tensor(np.zeros((2, 3))))
        np.testing.assert_array_equal(y_default.data, y_zero.data)

    def test_future_input_cannot_affect_past_output(self):
        rng = np.random.default_rng(9)
        params = init_selective_ssm(3, 4, rng)
        x = rng.standard_normal((12, 3))
        y0 = scan_sequential(discretize_selective(T.tensor(x), params)).data.copy()
        x2 = x.copy()
        x2[8] += 2.0
        y1 = scan_sequential(discretize_selective(T.tensor(x2), params)).data
        np.testing.assert_array_equal(y0[:8], y1[:8])
        assert not np.allclose(y0[8:], y1[8:])


class TestKernelView:
    def test_kernel_equals_scan_small(self):
        rng = np.random.default_rng(10)
        d, m, length = 3, 4, 64
        a_bar = np.exp(-rng.uniform(0.05, 2.0, size=(d, m)))
        b_bar = rng.standard_normal((d, m))
        c = rng.standard_normal(m)
        x = rng.standard_normal((length, d))
        kern = materialize_kernel(a_bar, b_bar, c, length)
        y_conv = kernel_convolve(x, kern)
        disc = DiscretizedSeq(
            a_bar=T.tensor(np.broadcast_to(a_bar, (length, d, m)).copy()),
            b_bar_x=T.tensor(b_bar[None] * x[:, :, None]),
            c=T.tensor(np.broadcast_to(c, (length, m)).copy()),
        )
        y_scan = scan_sequential(disc).data
        assert np.max(np.abs(y_conv - y_scan)) <= 1e-9

    def test_rejects_time_varying_input(self):
        with pytest.raises(PreconditionError):
            materialize_kernel(np.ones((5, 2, 3)), np.ones((5, 2, 3)), np.ones(3), 5)

    def test_length_one_kernel(self):
        kern = materialize_kernel(np.full((1, 1), 0.5), np.full((1, 1), 2.0), np.array([3.0]), 1)
        np.testing.assert_allclose(kern, [[6.0]])


class TestSelective:
    def test_projection_shapes(self):
        rng = np.random.default_rng(11)
        params = init_selective_ssm(6, 4, rng)
        b, c, delta = selective_project(T.tensor(rng.standard_normal((9, 6))), params)
        assert b.shape == (9, 4) and c.shape == (9, 4) and delta.shape == (9, 6)
        assert np.all(delta.data > 0)

    def test_delta_bias_controls_initial_step(self):
        rng = np.random.default_rng(12)
        params = init_selective_ssm(8, 4, rng)
        _, _, delta = selective_project(T.tensor(np.zeros((3, 8))), params)
        assert np.all(delta.data >= 1e-3 * 0.5) and np.all(delta.data <= 1e-1 * 2.0)

    @pytest.mark.parametrize("mode", ["zoh", "euler"])
    def test_grad_through_full_path(self, mode):
        rng = np.random.default_rng(13)
        params = init_selective_ssm(2, 3, rng)
        x = T.tensor(rng.standard_normal((4, 2)), requires_grad=True)

        def f():
            y = scan_parallel(discretize_selective(x, params, mode=mode))
            return T.reduce_sum(T.mul(y, y))

        err = T.grad_check_all(f, [x] + params.tensors(), eps=1e-5)
        assert err <= 1e-5, err

    def test_grad_sequential_scan_matches(self):
        rng = np.random.default_rng(14)
        params = init_selective_ssm(2, 2, rng)
        x = T.tensor(rng.standard_normal((5, 2)), requires_grad=True)

        def f():
            y = scan_sequential(discretize_selective(x, params))
            return T.reduce_sum(T.mul(y, y))

        err = T.grad_check_all(f, [x] + params.tensors(), eps=1e-5)
        assert err <= 1e-5, err

    def test_unknown_mode_rejected(self):
        rng = np.random.default_rng(15)
        params = init_selective_ssm(2, 2, rng)
        with pytest.raises(PreconditionError):
            discretize_selective(T.tensor(np.zeros((3, 2))), params, mode="bilinear")
