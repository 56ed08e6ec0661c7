import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from light_reskan.autograd import Parameter, Tensor, check_gradients, ops, relative_error
from light_reskan.errors import ConfigurationError
from light_reskan.kan import (
    GramActivationParams,
    GramBasisParams,
    InitSpec,
    KanConvLayer,
    expand_basis,
    gram_activation,
    gram_basis,
    init_layer,
    kan_conv_decoupled,
    kan_conv_direct,
    kan_conv_expanded,
    kan_conv_fused,
)

from oracles import gram_scalar, kan_conv_loops, phi_scalar


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def layer64(c_in, c_out, k, stride=1, padding=0, degree=3, mode="shared", seed=0, beta_scale=0.3):
    layer = KanConvLayer(c_in, c_out, k, stride, padding, mode=mode, degree=degree,
                         prenorm=False, dtype=np.float64, seed=seed)
    if layer.beta is not None:
        layer.beta.data[:] = np.random.default_rng(seed + 100).normal(0, beta_scale, layer.beta.shape)
    return layer


class TestGramBasis:
    def test_monomials_when_beta_zero(self):
        out = gram_basis(t64(0.5), GramBasisParams(3, t64([0.0, 0.0])))
        np.testing.assert_array_equal(out.data, [1, 0.5, 0.25, 0.125])

    def test_hand_recurrence_at_one(self):
        out = gram_basis(t64(1.0), GramBasisParams(3, t64([0.5, 0.25])))
        np.testing.assert_array_equal(out.data, [1, 1, 0.5, 0.25])

    def test_odd_terms_vanish_at_zero(self):
        out = gram_basis(t64(0.0), GramBasisParams(3, t64([0.3, 0.7])))
        np.testing.assert_array_equal(out.data, [1, 0, -0.3, 0])

    def test_wrong_coefficient_count(self):
        with pytest.raises(ConfigurationError):
            GramBasisParams(3, t64([0.1]))

    def test_degree_zero_rejected(self):
        with pytest.raises(ConfigurationError):
            GramBasisParams(0)

    @given(
        xt=st.floats(-1, 1),
        degree=st.integers(1, 6),
    )
    def test_monomial_degeneration_and_bound(self, xt, degree):
        beta = t64(np.zeros(degree - 1))
        out = gram_basis(t64(xt), GramBasisParams(degree, beta)).data
        mono = np.cumprod([1.0] + [xt] * degree)
        np.testing.assert_array_equal(out, mono)
        assert np.all(np.abs(out) <= 1)

    @given(xt=st.floats(-1, 1), betas=st.lists(st.floats(-2, 2), min_size=5, max_size=5))
    def test_matches_scalar_recurrence(self, xt, betas):
        out = gram_basis(t64(xt), GramBasisParams(6, t64(betas))).data
        np.testing.assert_allclose(out, gram_scalar(xt, betas, 6), rtol=1e-12, atol=1e-12)

    def test_stack_axis(self):
        x = t64(np.zeros((2, 3, 4, 5)))
        assert gram_basis(x, GramBasisParams(3), axis=2).shape == (2, 3, 4, 4, 5)

    @pytest.mark.parametrize("degree", [1, 2, 3, 5])
    def test_gradients(self, degree):
        rng = np.random.default_rng(degree)
        x = t64(rng.uniform(-1, 1, (3, 4)), grad=True)
        beta = t64(rng.normal(0, 0.5, degree - 1), grad=True) if degree > 1 else None
        r = t64(rng.standard_normal((3, 4, degree + 1)))
        fn = lambda: ops.sum(ops.mul(gram_basis(x, GramBasisParams(degree, beta)), r))
        errs = check_gradients(fn, [x] + ([beta] if beta is not None else []))
        assert max(errs.values()) <= 1e-4


class TestGramActivation:
    def _params(self, w, w_m, beta=(0.1, -0.2)):
        return GramActivationParams(t64(w, True), t64(w_m, True), GramBasisParams(len(w) - 1, t64(beta, True)))

    def test_constant_unit(self):
        x = t64(np.linspace(-5, 5, 11))
        np.testing.assert_array_equal(gram_activation(x, self._params([1, 0, 0, 0], 0.0)).data, np.ones(11))

    def test_pure_silu(self):
        x = t64(np.linspace(-5, 5, 11))
        out = gram_activation(x, self._params([0, 0, 0, 0], 1.0)).data
        np.testing.assert_allclose(out, x.data / (1 + np.exp(-x.data)), rtol=1e-15)
        assert out[5] == 0.0

    def test_pure_tanh(self):
        out = gram_activation(t64(2.0), self._params([0, 1, 0, 0], 0.0, beta=(3.0, -7.0)))
        assert out.item() == pytest.approx(0.9640276, abs=1e-7)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        w, wm, beta = rng.standard_normal(4), 0.7, rng.normal(0, 0.4, 2)
        x = rng.standard_normal(20) * 3
        out = gram_activation(t64(x), self._params(w, wm, beta)).data
        np.testing.assert_allclose(out, [phi_scalar(v, w, wm, beta) for v in x], rtol=1e-12)

    def test_w_length_checked(self):
        with pytest.raises(ConfigurationError):
            GramActivationParams(t64([1, 2]), t64(0.0), GramBasisParams(3))

    def test_all_gradient_paths(self):
        rng = np.random.default_rng(1)
        p = self._params(rng.standard_normal(4), 0.5, rng.normal(0, 0.3, 2))
        x = t64(rng.standard_normal((4, 3)) * 2, True)
        r = t64(rng.standard_normal((4, 3)))
        fn = lambda: ops.sum(ops.mul(gram_activation(x, p), r))
        errs = check_gradients(fn, [x, p.w, p.w_m, p.basis.beta])
        assert max(errs.values()) <= 1e-4


class TestKanConvDirect:
    def test_fig3_single_window(self):
        a = np.array([0.3, -1.2, 2.0, 0.05])
        layer = layer64(1, 1, 2)
        out = kan_conv_direct(t64(a.reshape(1, 1, 2, 2)), layer).item()
        w, wm, beta = layer.w_k.data[0, 0], layer.w_m.data[0, 0], layer.beta.data
        assert out == pytest.approx(sum(phi_scalar(v, w, wm, beta) for v in a), rel=1e-12)

    def test_constant_activation_counts_taps(self):
        layer = layer64(3, 2, 3)
        layer.w_k.data[...] = 0
        layer.w_k.data[..., 0] = 1
        layer.w_m.data[...] = 0
        x = t64(np.random.default_rng(0).standard_normal((2, 3, 6, 5)))
        np.testing.assert_array_equal(kan_conv_direct(x, layer).data, np.full((2, 2, 4, 3), 3 * 9.0))

    def test_replicated_elementwise_bit_matches_shared(self):
        shared = layer64(2, 3, 3, stride=2, padding=1)
        elem = layer64(2, 3, 3, stride=2, padding=1, mode="elementwise")
        elem.w_k.data[...] = shared.w_k.data[:, :, None, None, :]
        elem.w_m.data[...] = shared.w_m.data[:, :, None, None]
        elem.beta.data[...] = shared.beta.data
        x = t64(np.random.default_rng(1).standard_normal((2, 2, 7, 7)))
        np.testing.assert_array_equal(kan_conv_direct(x, elem).data, kan_conv_direct(x, shared).data)

    @pytest.mark.parametrize("mode", ["shared", "elementwise"])
    def test_matches_loop_oracle(self, mode):
        layer = layer64(2, 2, 3, stride=2, padding=1, mode=mode)
        x = np.random.default_rng(2).standard_normal((1, 2, 5, 6))
        ref = kan_conv_loops(x, layer.w_k.data, layer.w_m.data, layer.beta.data, 3, 2, 1, shared=mode == "shared")
        assert relative_error(kan_conv_direct(t64(x), layer).data, ref) <= 1e-12


class TestDecoupled:
    def test_expanded_channel_count(self):
        layer = layer64(2, 1, 3)
        assert expand_basis(t64(np.zeros((1, 2, 4, 4))), layer).shape == (1, 8, 4, 4)

    def test_output_shape(self):
        layer = layer64(1, 5, 3, stride=2, padding=1)
        assert kan_conv_decoupled(t64(np.zeros((1, 1, 5, 5))), layer).shape == (1, 5, 3, 3)

    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-6), (np.float64, 1e-12)])
    def test_equals_direct(self, dtype, tol):
        layer = KanConvLayer(3, 4, 3, 1, 1, prenorm=False, dtype=dtype, seed=3)
        x = Tensor(np.random.default_rng(3).standard_normal((2, 3, 6, 6)).astype(dtype))
        assert relative_error(kan_conv_decoupled(x, layer).data, kan_conv_direct(x, layer).data) <= tol

    def test_requires_shared_mode(self):
        with pytest.raises(ConfigurationError):
            kan_conv_decoupled(t64(np.zeros((1, 1, 4, 4))), layer64(1, 1, 3, mode="elementwise"))


class TestFused:
    def test_zero_input_closed_form(self):
        layer = layer64(3, 2, 3)
        w = np.array([[0.4, -1.1, 0.3, 2.0], [1.5, 0.2, -0.7, 0.0]])
        layer.w_k.data[...] = w[:, None, :]
        layer.w_m.data[...] = 0
        b2 = layer.beta.data[0]
        g0 = np.array([1.0, 0.0, -b2, 0.0])  # G_k(0) by hand
        expected = (w @ g0) * 3 * 9
        out = kan_conv_fused(t64(np.zeros((2, 3, 5, 6))), layer).data
        for co in range(2):
            np.testing.assert_allclose(out[:, co], expected[co], rtol=1e-12)

    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-6), (np.float64, 1e-12)])
    def test_equals_direct_and_decoupled(self, dtype, tol):
        layer = KanConvLayer(3, 4, 5, 2, 2, prenorm=False, dtype=dtype, seed=4, degree=4)
        x = Tensor(np.random.default_rng(4).standard_normal((2, 3, 9, 8)).astype(dtype))
        fused = kan_conv_fused(x, layer).data
        assert relative_error(fused, kan_conv_direct(x, layer).data) <= tol
        assert relative_error(fused, kan_conv_decoupled(x, layer).data) <= tol

    def test_deterministic(self):
        layer = KanConvLayer(2, 3, 3, 1, 1, seed=5, prenorm=False)
        x = Tensor(np.random.default_rng(5).standard_normal((2, 2, 6, 6)).astype(np.float32))
        np.testing.assert_array_equal(kan_conv_fused(x, layer).data, kan_conv_fused(x, layer).data)

    @pytest.mark.parametrize("path", [kan_conv_fused, kan_conv_decoupled, kan_conv_direct])
    @pytest.mark.parametrize("degree", [1, 3])
    def test_gradients(self, path, degree):
        layer = layer64(2, 3, 3, stride=2, padding=1, degree=degree, seed=degree)
        rng = np.random.default_rng(degree)
        x = t64(rng.standard_normal((2, 2, 5, 5)), True)
        r = t64(rng.standard_normal((2, 3, 3, 3)))
        params = [x, layer.w_k, layer.w_m] + ([layer.beta] if layer.beta is not None else [])
        errs = check_gradients(lambda: ops.sum(ops.mul(path(x, layer), r)), params)
        assert max(errs.values()) <= 1e-4


def _float32_pair(seed=43):
    """A float32 layer and its float64 twin holding the same (float32-exact) values."""
    lo = KanConvLayer(2, 8, 5, 1, 1, degree=3, prenorm=False, dtype=np.float32, seed=seed)
    lo.beta.data[:] = np.array([0.35, -0.2], np.float32)
    hi = KanConvLayer(2, 8, 5, 1, 1, degree=3, prenorm=False, dtype=np.float64, seed=seed)
    for (_, a), (_, b) in zip(lo.named_parameters(), hi.named_parameters()):
        b.data[...] = a.data
    return lo, hi


def _grads(path, layer, x0):
    x = Tensor(x0.astype(layer.w_k.dtype), requires_grad=True)
    out = path(x, layer)
    layer.zero_grad()
    r = Tensor(np.random.default_rng(1).standard_normal(out.shape).astype(out.dtype))
    ops.sum(ops.mul(out, r)).backward()
    return out, [x.grad] + [q.grad for _, q in layer.named_parameters()]


@pytest.mark.parametrize("path", [kan_conv_direct, kan_conv_fused])
def test_float32_gradients_are_rounded_float64_ones(path):
    # both paths compute internally in float64, so every float32 gradient is the
    # exact one up to a final rounding
    lo, hi = _float32_pair()
    x0 = np.random.default_rng(2).standard_normal((4, 2, 7, 10)).astype(np.float32).astype(np.float64)
    out32, g32 = _grads(path, lo, x0)
    _, g64 = _grads(kan_conv_direct, hi, x0)
    assert out32.dtype == np.float32 and all(g.dtype == np.float32 for g in g32)
    for a, b in zip(g32, g64):
        assert relative_error(a, b) <= 2.5e-7


def test_astype_round_trip_gradient():
    x = Tensor(np.array([1.0, -2.5, 3.25], np.float32), requires_grad=True)
    y = ops.astype(x, np.float64)
    assert y.dtype == np.float64 and ops.astype(y, np.float64) is y
    ops.sum(ops.mul(y, Tensor(np.array([2.0, 3.0, 4.0])))).backward()
    assert x.grad.dtype == np.float32
    np.testing.assert_array_equal(x.grad, [2.0, 3.0, 4.0])


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 3),
    c_in=st.integers(1, 4),
    c_out=st.integers(1, 4),
    k=st.sampled_from([1, 2, 3, 5]),
    stride=st.integers(1, 2),
    padding=st.integers(0, 2),
    degree=st.integers(1, 4),
    seed=st.integers(0, 10**6),
)
def test_three_path_equivalence_property(n, c_in, c_out, k, stride, padding, degree, seed):
    layer = layer64(c_in, c_out, k, stride, padding, degree, seed=seed)
    x = t64(np.random.default_rng(seed).standard_normal((n, c_in, k + 3, k + 2)))
    ref = kan_conv_direct(x, layer).data
    assert relative_error(kan_conv_decoupled(x, layer).data, ref) <= 1e-12
    assert relative_error(kan_conv_fused(x, layer).data, ref) <= 1e-12


def test_elementwise_expanded_matches_direct():
    layer = layer64(3, 2, 3, stride=2, padding=1, mode="elementwise")
    x = t64(np.random.default_rng(6).standard_normal((2, 3, 7, 7)))
    assert relative_error(kan_conv_expanded(x, layer).data, kan_conv_direct(x, layer).data) <= 1e-12


def test_translation_equivariance():
    layer = layer64(2, 3, 3)
    x = np.random.default_rng(7).standard_normal((1, 2, 8, 9))
    out = kan_conv_decoupled(t64(x), layer).data
    shifted = kan_conv_decoupled(t64(np.roll(x, 1, axis=3)), layer).data
    np.testing.assert_allclose(shifted[..., 1:], out[..., :-1], rtol=1e-12, atol=1e-12)


class TestParameterLaws:
    @pytest.mark.parametrize("k", [1, 2, 3, 5, 7])
    def test_ratio_is_k_squared(self, k):
        shared = KanConvLayer(2, 4, k, mode="shared")
        elem = KanConvLayer(2, 4, k, mode="elementwise")
        assert shared.w_k.shape == (4, 2, 4)
        assert elem.w_k.shape == (4, 2, k, k, 4)
        assert elem.poly_param_count() == shared.poly_param_count() * k * k
        count = lambda m: sum(p.size for name, p in m.named_parameters() if name == "w_k")
        assert count(elem) == k * k * count(shared)

    def test_worked_counts(self):
        assert KanConvLayer(2, 4, 3).poly_param_count() == 32
        assert KanConvLayer(2, 4, 3, mode="elementwise").poly_param_count() == 288

    def test_beta_count(self):
        assert KanConvLayer(2, 2, 3, degree=5).beta.shape == (4,)
        assert KanConvLayer(2, 2, 3, degree=1).beta is None
        assert KanConvLayer(2, 2, 3, basis="monomial").beta is None

    def test_spline_is_stub(self):
        with pytest.raises(ConfigurationError, match="stub"):
            KanConvLayer(1, 1, 3, basis="spline")

    def test_bad_path_for_mode(self):
        with pytest.raises(ConfigurationError):
            KanConvLayer(1, 1, 3, mode="elementwise", path="fused")


class TestInit:
    def test_sigma_formula(self):
        assert InitSpec().beta_sigma(3, 16, 3) == pytest.approx(1 / 576)
        assert 1 / 576 == pytest.approx(0.0017361, abs=1e-7)

    def test_same_seed_bit_identical(self):
        a, b = KanConvLayer(4, 8, 3, seed=11), KanConvLayer(4, 8, 3, seed=11)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)
        c = KanConvLayer(4, 8, 3, seed=12)
        assert not np.array_equal(a.w_k.data, c.w_k.data)

    def test_beta_stddev_monte_carlo(self):
        degree = 10**6 + 1
        layer = KanConvLayer(1, 1, 1, degree=degree, prenorm=False, dtype=np.float64, seed=3)
        sigma = InitSpec().beta_sigma(1, 1, degree)
        assert abs(layer.beta.data.std() / sigma - 1) < 0.02
        assert abs(layer.beta.data.mean()) < 5 * sigma / 1000

    def test_kaiming_bounds(self):
        layer = KanConvLayer(4, 8, 3, seed=1)
        bound = math.sqrt(3 / (4 * 4 * 9))
        assert np.abs(layer.w_k.data).max() <= bound
        assert np.abs(layer.w_k.data).max() > 0.9 * bound

    def test_reinit_deterministic(self):
        layer = KanConvLayer(2, 2, 3)
        init_layer(layer, InitSpec(), 99)
        first = layer.w_k.data.copy()
        init_layer(layer, InitSpec(), 99)
        np.testing.assert_array_equal(first, layer.w_k.data)


def test_prenorm_layer_forward_train_and_eval():
    layer = KanConvLayer(2, 3, 3, 1, 1, seed=0)
    x = Tensor(np.random.default_rng(0).normal(5, 3, (4, 2, 6, 6)).astype(np.float32))
    y = layer(x)
    assert y.shape == (4, 3, 6, 6)
    layer.eval()
    assert np.array_equal(layer(x).data, layer(x).data)
    assert isinstance(layer.norm.gamma, Parameter)
