import numpy as np
import pytest

from certitude import autodiff as ad
from certitude.autodiff import Tensor
from certitude.errors import CapacityError, ContractError
from certitude.crown import (
    backward_merge_affine,
    backward_merge_conv,
    backward_merge_relu,
    concretize,
    crown_full_bound,
    crown_ibp_bound,
    mixed_margin,
    relu_relaxation,
)
from certitude.ibp import ibp_forward
from certitude.model import Affine, Network, ReLU, forward, spec_matrices
from certitude.oracle import (
    conv_as_dense,
    grid_min_margin,
    sample_soundness,
    vertex_min_margin_linear,
)

from conftest import fuzz_input, make_conv_net, make_mlp, random_fuzz_net


def relax_pair(z_lo, z_hi):
    return relu_relaxation(Tensor(np.asarray(z_lo, dtype=float)),
                           Tensor(np.asarray(z_hi, dtype=float)))


def check_breakpoints(z_lo, z_hi, relax):
    """Exact validity at {z_lo, 0, z_hi}; complete for piecewise-linear parts."""
    lo = np.asarray(z_lo, dtype=float)
    hi = np.asarray(z_hi, dtype=float)
    ls = relax.lower_slope.data
    us = relax.upper_slope.data
    uc = relax.upper_intercept.data
    bad = 0
    for z in (lo, np.zeros_like(lo), hi):
        r = np.maximum(z, 0.0)
        bad += int((ls * z > r).sum())
        bad += int((us * z + uc < r).sum())
    return bad


class TestReluRelaxation:
    def test_unstable_alpha_one(self):
        r = relax_pair([-1.0], [2.0])
        np.testing.assert_allclose(r.upper_slope.data, [2.0 / 3.0], rtol=1e-12)
        np.testing.assert_allclose(r.upper_intercept.data, [2.0 / 3.0], rtol=1e-12)
        assert r.lower_slope.data[0] == 1.0

    def test_unstable_alpha_zero(self):
        r = relax_pair([-2.0], [1.0])
        np.testing.assert_allclose(r.upper_slope.data, [1.0 / 3.0], rtol=1e-12)
        np.testing.assert_allclose(r.upper_intercept.data, [2.0 / 3.0], rtol=1e-12)
        assert r.lower_slope.data[0] == 0.0

    def test_always_active_identity(self):
        r = relax_pair([0.5], [1.0])
        assert r.lower_slope.data[0] == 1.0
        assert r.upper_slope.data[0] == 1.0
        assert r.upper_intercept.data[0] == 0.0

    def test_always_inactive_zero(self):
        r = relax_pair([-3.0], [-0.5])
        assert r.lower_slope.data[0] == 0.0
        assert r.upper_slope.data[0] == 0.0
        assert r.upper_intercept.data[0] == 0.0

    def test_adaptive_tie_takes_zero(self):
        r = relax_pair([-1.5], [1.5])
        assert r.lower_slope.data[0] == 0.0

    def test_boundary_cases_exact(self):
        lo = np.array([0.0, -1.0, 0.0, -1e-300])
        hi = np.array([0.0, 0.0, 2.0, 1e-300])
        r = relax_pair(lo, hi)
        assert check_breakpoints(lo, hi, r) == 0

    def test_contract_error(self):
        with pytest.raises(ContractError):
            relax_pair([1.0], [0.0])

    def test_breakpoint_property_random(self):
        rng = np.random.default_rng(0)
        n = 10_000
        center = rng.normal(0, 2, size=n)
        width = 10.0 ** rng.uniform(-14, 1, size=n)
        lo = center - width / 2
        hi = center + width / 2
        r = relax_pair(lo, hi)
        assert check_breakpoints(lo, hi, r) == 0
        assert (r.upper_slope.data >= 0).all() and (r.upper_slope.data <= 1).all()
        assert (r.upper_intercept.data >= 0).all()

    def test_gradients_flow_through_bounds(self):
        z_lo = Tensor([-1.0, -0.5], requires_grad=True)
        z_hi = Tensor([2.0, 1.5], requires_grad=True)
        with ad.tape():
            r = relu_relaxation(z_lo, z_hi)
            loss = ad.sum_(r.upper_slope) + ad.sum_(r.upper_intercept)
        ad.backward(loss)
        assert np.abs(z_lo.grad).sum() > 0
        assert np.abs(z_hi.grad).sum() > 0


class TestBackwardMergeRelu:
    def test_positive_coefficient_picks_lower(self):
        r = relax_pair([[-1.0]], [[2.0]])
        a = Tensor(np.array([[[1.0]]]))
        merged, delta = backward_merge_relu(a, r)
        np.testing.assert_allclose(merged.data, [[[1.0]]], atol=1e-12)
        np.testing.assert_allclose(delta.data, [[0.0]], atol=1e-12)

    def test_negative_coefficient_picks_upper(self):
        r = relax_pair([[-1.0]], [[2.0]])
        a = Tensor(np.array([[[-1.0]]]))
        merged, delta = backward_merge_relu(a, r)
        np.testing.assert_allclose(merged.data, [[[-2.0 / 3.0]]], rtol=1e-12)
        np.testing.assert_allclose(delta.data, [[-2.0 / 3.0]], rtol=1e-12)

    def test_merged_lower_bounds_a_relu(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = int(rng.integers(2, 8))
            lo = rng.normal(size=(1, n)) - 0.5
            hi = lo + rng.uniform(0.01, 2.0, size=(1, n))
            r = relax_pair(lo, hi)
            a = Tensor(rng.normal(size=(1, 3, n)))
            merged, delta = backward_merge_relu(a, r)
            z = rng.uniform(lo, hi, size=(1000, n))
            target = np.maximum(z, 0.0) @ a.data[0].T
            linear = z @ merged.data[0].T + delta.data[0]
            assert (linear <= target + 1e-9).all()

    def test_upper_side_bounds_from_above(self):
        rng = np.random.default_rng(2)
        lo = rng.normal(size=(1, 5)) - 0.5
        hi = lo + rng.uniform(0.01, 2.0, size=(1, 5))
        r = relax_pair(lo, hi)
        a = Tensor(rng.normal(size=(1, 2, 5)))
        merged, delta = backward_merge_relu(a, r, side="upper")
        z = rng.uniform(lo, hi, size=(1000, 5))
        target = np.maximum(z, 0.0) @ a.data[0].T
        linear = z @ merged.data[0].T + delta.data[0]
        assert (linear >= target - 1e-9).all()


class TestBackwardMergeAffine:
    def test_identity_layer(self):
        layer = Affine(Tensor(np.eye(3)), Tensor(np.zeros(3)))
        a = Tensor(np.random.default_rng(3).normal(size=(2, 4, 3)))
        merged, inc = backward_merge_affine(a, layer)
        np.testing.assert_allclose(merged.data, a.data, atol=1e-15)
        np.testing.assert_allclose(inc.data, np.zeros((2, 4)), atol=1e-15)

    def test_bias_accumulates_cb(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(3, 5))
        b = rng.normal(size=3)
        c = spec_matrices([1], 3)
        layer = Affine(Tensor(w), Tensor(b))
        a = Tensor(c.astype(float))
        merged, inc = backward_merge_affine(a, layer)
        np.testing.assert_allclose(inc.data[0], c[0] @ b, atol=1e-12)
        np.testing.assert_allclose(merged.data[0], c[0] @ w, atol=1e-12)

    def test_conv_path_equals_dense_path(self):
        from certitude.model import Conv2D

        rng = np.random.default_rng(5)
        for stride in (1, 2):
            k = rng.normal(size=(3, 2, 2, 2))
            layer = Conv2D(Tensor(k), Tensor(rng.normal(size=3)), stride)
            in_geom = (2, 5, 5)
            hout = (5 - 2) // stride + 1
            out_geom = (3, hout, hout)
            n_out = 3 * hout * hout
            a = Tensor(rng.normal(size=(2, 4, n_out)))
            merged, inc = backward_merge_conv(a, layer, out_geom, in_geom)
            dense = conv_as_dense(k, stride, in_geom)
            want = a.data @ dense
            np.testing.assert_allclose(merged.data, want, atol=1e-10)
            bias_full = np.repeat(layer.bias.data, hout * hout)
            np.testing.assert_allclose(inc.data, a.data @ bias_full, atol=1e-10)


class TestConcretize:
    def test_hand_case(self):
        a0 = Tensor(np.array([[[1.0, -1.0]]]))
        bias = Tensor(np.zeros((1, 1)))
        m = concretize(a0, bias, Tensor([[-1.0, -1.0]]), Tensor([[1.0, 1.0]]))
        assert m.data[0, 0] == -2.0

    def test_zero_radius_exact(self):
        rng = np.random.default_rng(6)
        a0 = Tensor(rng.normal(size=(2, 3, 4)))
        bias = Tensor(rng.normal(size=(2, 3)))
        x = Tensor(rng.normal(size=(2, 4)))
        m = concretize(a0, bias, x, x)
        want = np.einsum("bik,bk->bi", a0.data, x.data) + bias.data
        np.testing.assert_allclose(m.data, want, atol=1e-12)

    def test_matches_coordinatewise_min_choice(self):
        rng = np.random.default_rng(7)
        a0 = rng.normal(size=(1, 3, 5))
        bias = rng.normal(size=(1, 3))
        lo = rng.normal(size=(1, 5))
        hi = lo + rng.uniform(0.1, 1.0, size=(1, 5))
        m = concretize(Tensor(a0), Tensor(bias), Tensor(lo), Tensor(hi))
        want = (np.where(a0[0] > 0, a0[0] * lo[0], a0[0] * hi[0]).sum(axis=1)
                + bias[0])
        np.testing.assert_allclose(m.data[0], want, atol=1e-12)


class TestCrownIbpBound:
    def _bound(self, net, x, eps, labels):
        c = spec_matrices(labels, net.num_classes)
        m_ibp, bounds = ibp_forward(net, x, eps, c)
        return m_ibp, crown_ibp_bound(net, x, eps, c, bounds), c

    def test_all_active_equals_vertex_oracle(self):
        net = make_mlp([3, 6, 6, 3], seed=8, weight_scale=0.5, bias_shift=40.0)
        x = np.full(3, 0.5)
        _, m_crown, c = self._bound(net, Tensor(x[None]), 0.05, [1])
        rep = vertex_min_margin_linear(net, x, 0.05, c[0])
        np.testing.assert_allclose(m_crown.data[0], rep.empirical_min_margin, atol=1e-9)

    def test_eps_zero_equals_forward_margins(self):
        net = make_mlp([3, 7, 4], seed=9)
        x = Tensor(np.random.default_rng(10).uniform(size=(3, 3)))
        labels = [0, 2, 3]
        _, m_crown, c = self._bound(net, x, 0.0, labels)
        want = np.einsum("bij,bj->bi", c, forward(net, x).data)
        np.testing.assert_allclose(m_crown.data, want, atol=1e-9)

    def test_sound_vs_grid_oracle(self):
        net = make_mlp([2, 9, 6, 3], seed=11)
        x = np.array([0.35, 0.65])
        _, m_crown, c = self._bound(net, Tensor(x[None]), 0.15, [2])
        rep = grid_min_margin(net, x, 0.15, c[0])
        assert (m_crown.data[0] <= rep.empirical_min_margin + 1e-9).all()

    def test_missing_bounds_rejected(self):
        net = make_mlp([2, 4, 3], seed=12)
        x = Tensor(np.zeros((1, 2)))
        c = spec_matrices([0], 3)
        _, bounds = ibp_forward(net, x, 0.1, c)
        bounds.layer_bounds = bounds.layer_bounds[:-1]
        with pytest.raises(ContractError):
            crown_ibp_bound(net, x, 0.1, c, bounds)

    def test_backward_soundness_fuzz_including_conv(self):
        for seed in range(25):
            net = random_fuzz_net(seed)
            x = fuzz_input(net, seed + 77)
            labels = np.array([seed % net.num_classes])
            c = spec_matrices(labels, net.num_classes)
            eps = [0.01, 0.1, 0.3][seed % 3]
            m_ibp, bounds = ibp_forward(net, Tensor(x[None]), eps, c)
            m_crown = crown_ibp_bound(net, None, 0.0, c, bounds)
            assert sample_soundness(net, x, eps, c[0], m_crown.data[0], 1000, seed) == 0

    def test_conv_bound_equals_dense_equivalent(self):
        net = make_conv_net(seed=13)
        dense_layers = []
        shape = net.input_shape
        from certitude.model import Conv2D, Flatten

        for layer in net.layers:
            if isinstance(layer, Conv2D):
                m = conv_as_dense(layer.kernel.data, layer.stride, shape)
                shape = layer.out_shape(shape)
                b = np.repeat(layer.bias.data, shape[1] * shape[2])
                dense_layers.append(Affine(Tensor(m), Tensor(b)))
            elif isinstance(layer, Affine):
                dense_layers.append(layer)
                shape = layer.out_shape((int(np.prod(shape)),))
            elif isinstance(layer, ReLU):
                dense_layers.append(ReLU())
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
        dense_net = Network(dense_layers, (int(np.prod(net.input_shape)),),
                            net.num_classes)
        x = fuzz_input(net, 14)
        c = spec_matrices([1], net.num_classes)
        _, b1 = ibp_forward(net, Tensor(x[None]), 0.08, c)
        m1 = crown_ibp_bound(net, None, 0.0, c, b1)
        _, b2 = ibp_forward(dense_net, Tensor(x.reshape(1, -1)), 0.08, c)
        m2 = crown_ibp_bound(dense_net, None, 0.0, c, b2)
        np.testing.assert_allclose(m1.data, m2.data, atol=1e-10)


class TestCrownFullBound:
    def test_single_hidden_layer_equals_crown_ibp(self):
        net = make_mlp([3, 10, 4], seed=15)
        x = Tensor(np.random.default_rng(16).uniform(size=(2, 3)))
        c = spec_matrices([1, 3], 4)
        _, bounds = ibp_forward(net, x, 0.1, c)
        m_ci = crown_ibp_bound(net, x, 0.1, c, bounds)
        m_full = crown_full_bound(net, x, 0.1, c)
        np.testing.assert_allclose(m_full.data, m_ci.data, atol=1e-12)

    def test_sound_vs_grid_oracle(self):
        net = make_mlp([2, 8, 8, 3], seed=17)
        x = np.array([0.45, 0.55])
        c = spec_matrices([0], 3)
        m_full = crown_full_bound(net, Tensor(x[None]), 0.2, c)
        rep = grid_min_margin(net, x, 0.2, c[0])
        assert (m_full.data[0] <= rep.empirical_min_margin + 1e-9).all()

    def test_at_least_as_tight_as_crown_ibp_on_deep_nets(self):
        # with CROWN-computed intermediates the relaxations can only shrink
        hits = 0
        for seed in range(5):
            net = make_mlp([2, 10, 10, 10, 3], seed=18 + seed)
            x = Tensor(np.random.default_rng(seed).uniform(size=(1, 2)))
            c = spec_matrices([1], 3)
            _, bounds = ibp_forward(net, x, 0.15, c)
            m_ci = crown_ibp_bound(net, x, 0.15, c, bounds)
            m_full = crown_full_bound(net, x, 0.15, c)
            hits += int((m_full.data >= m_ci.data - 1e-9).all())
        assert hits == 5

    def test_capacity_guard(self):
        net = make_mlp([4, 3000, 3000, 3], seed=19, weight_scale=0.2)
        with pytest.raises(CapacityError):
            crown_full_bound(net, Tensor(np.zeros((1, 4))), 0.1, spec_matrices([0], 3))

    def test_conv_net_supported(self):
        net = make_conv_net(seed=20)
        x = fuzz_input(net, 21)
        c = spec_matrices([0], net.num_classes)
        m_full = crown_full_bound(net, Tensor(x[None]), 0.05, c)
        assert sample_soundness(net, x, 0.05, c[0], m_full.data[0], 500, 22) == 0


class TestMixedMargin:
    def test_endpoints_bitwise(self):
        rng = np.random.default_rng(23)
        a = Tensor(rng.normal(size=(2, 3)))
        b = Tensor(rng.normal(size=(2, 3)))
        assert mixed_margin(a, b, 1.0) is a
        assert mixed_margin(a, b, 0.0) is b

    def test_midpoint_is_sound(self):
        net = make_mlp([2, 8, 3], seed=24)
        x = fuzz_input(net, 25)
        c = spec_matrices([1], 3)
        m_ibp, bounds = ibp_forward(net, Tensor(x[None]), 0.12, c)
        m_crown = crown_ibp_bound(net, None, 0.0, c, bounds)
        mixed = mixed_margin(m_ibp, m_crown, 0.5)
        assert sample_soundness(net, x, 0.12, c[0], mixed.data[0], 1000, 26) == 0

    def test_out_of_range_rejected(self):
        t = Tensor(np.zeros((1, 2)))
        with pytest.raises(ContractError):
            mixed_margin(t, t, 1.5)


class TestGradientSemantics:
    def test_crown_bound_is_differentiable_in_parameters(self):
        net = make_mlp([2, 6, 3], seed=27)
        x = Tensor(np.random.default_rng(28).uniform(size=(2, 2)))
        c = spec_matrices([0, 2], 3)
        with ad.tape():
            _, bounds = ibp_forward(net, x, 0.1, c)
            m = crown_ibp_bound(net, x, 0.1, c, bounds)
            loss = ad.sum_(m)
        ad.backward(loss)
        for p in net.params():
            assert p.grad is not None


def test_crown_ibp_bound_rejects_mismatched_box():
    net = make_mlp([2, 5, 3], seed=30)
    x = Tensor(np.random.default_rng(31).uniform(size=(1, 2)))
    c = spec_matrices([0], 3)
    _, bounds = ibp_forward(net, x, 0.1, c)
    with pytest.raises(ContractError):
        crown_ibp_bound(net, x, 0.2, c, bounds)
