import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import central_diff, l0_direct

from eatkit.autodiff import GradientTape, Tensor, backward, finite_diff_check
from eatkit.errors import ConfigError
from eatkit.model import ActivationEntry, ActivationRecord, forward
from eatkit.sparsity import (
    PenaltyConfig, exact_l0, l0_approx, l0_approx_grad, selected_layers, sparsity_penalty,
)
from eatkit.trainer import objective

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(1, 40), elements=finite)
sigmas = st.floats(1e-10, 1e2)


def one_layer_record(values):
    x = Tensor(np.atleast_2d(np.asarray(values, dtype=np.float64)))
    return ActivationRecord(x, [ActivationEntry(0, "relu", x)])


class TestL0Approx:
    def test_zero_vector(self):
        assert l0_approx(np.zeros(7), 0.3).item() == 0.0

    def test_worked_example(self):
        got = l0_approx(np.array([1.0, 0.0, 2.0]), 0.01).item()
        assert got == pytest.approx(1 / 1.01 + 4 / 4.01, rel=1e-15)
        assert round(got, 6) == 1.987605

    def test_large_entries_tiny_sigma(self, rng):
        x = rng.uniform(1, 5, size=30) * rng.choice([-1, 1], size=30)
        assert abs(l0_approx(x, 1e-12).item() - 30) <= 1e-11 * 30

    def test_matches_direct_sum(self, rng):
        x = rng.normal(size=50)
        assert l0_approx(x, 0.05).item() == pytest.approx(l0_direct(x, 0.05), rel=1e-13)

    @pytest.mark.parametrize("sigma", [0.0, -1e-3])
    def test_nonpositive_sigma(self, sigma):
        with pytest.raises(ValueError):
            l0_approx(np.ones(3), sigma)
        with pytest.raises(ValueError):
            l0_approx_grad(np.ones(3), sigma)

    @settings(max_examples=200, deadline=None)
    @given(vectors, sigmas)
    def test_bounds(self, x, sigma):
        v = l0_approx(x, sigma).item()
        assert 0.0 <= v <= x.size
        assert v <= exact_l0(x) + 1e-12

    @settings(max_examples=200, deadline=None)
    @given(vectors, sigmas, st.floats(1.01, 1e3))
    def test_monotone_in_sigma(self, x, sigma, factor):
        x = x.copy()
        x[0] = 0.7  # at least one nonzero entry of moderate size
        assert l0_approx(x, sigma).item() > l0_approx(x, sigma * factor).item()

    def test_convergence_to_exact(self, rng):
        x = rng.uniform(-2, 2, size=64)
        x[rng.permutation(64)[:16]] = 0.0
        vals = [l0_approx(x, s).item() for s in (1e-2, 1e-6, 1e-12)]
        gaps = [abs(v - exact_l0(x)) for v in vals]
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] < 1e-6 * 64

    @settings(max_examples=200, deadline=None)
    @given(vectors, sigmas, st.integers(-20, 20))
    def test_scale_identity_power_of_two(self, x, sigma, e):
        c = 2.0 ** e
        assert l0_approx(c * x, c * c * sigma).item() == l0_approx(x, sigma).item()

    @settings(max_examples=100, deadline=None)
    @given(vectors, st.floats(1e-4, 1e2), st.floats(0.1, 10.0))
    def test_scale_identity_general(self, x, sigma, c):
        a = l0_approx(c * x, c * c * sigma).item()
        assert a == pytest.approx(l0_approx(x, sigma).item(), rel=1e-12, abs=1e-12)


class TestL0Grad:
    def test_origin(self):
        np.testing.assert_array_equal(l0_approx_grad(np.zeros(4), 0.1), np.zeros(4))

    def test_unit(self):
        assert l0_approx_grad(np.array([1.0]), 1.0)[0] == 0.5

    def test_tape_matches_analytic(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        with GradientTape() as tape:
            y = l0_approx(x, 0.02)
        np.testing.assert_allclose(backward(tape, y)[x], l0_approx_grad(x, 0.02), rtol=1e-15)

    def test_finite_difference(self, rng):
        x = rng.normal(scale=0.3, size=40)
        num = central_diff(lambda v: l0_approx(v, 1e-2).item(), x, 1e-7)
        ana = l0_approx_grad(x, 1e-2)
        rel = np.abs(num - ana) / np.maximum(np.maximum(np.abs(num), np.abs(ana)), 1e-12)
        assert rel.max() < 1e-6

    def test_finite_diff_check_helper(self, rng):
        assert finite_diff_check(lambda v: l0_approx(v, 1e-2), rng.normal(scale=0.3, size=40), eps=1e-7) < 1e-6


class TestExactL0:
    def test_examples(self):
        assert exact_l0(np.zeros(5)) == 0
        assert exact_l0(np.array([1.0, 0.0, 2.0])) == 2
        assert exact_l0(np.array([0.1, -0.5, 2.0]), tau=0.2) == 2

    def test_relu_output(self, rng):
        pre = rng.normal(size=(5, 6))
        assert exact_l0(np.maximum(pre, 0.0)) == int((pre > 0).sum())

    def test_negative_tau(self):
        with pytest.raises(ValueError):
            exact_l0(np.ones(2), tau=-1.0)


class TestPenalty:
    def test_worked_example(self):
        cfg = PenaltyConfig(sigma=0.01, include_logits=True)
        got = sparsity_penalty(one_layer_record([1.0, 0.0, 2.0]), cfg, 10).item()
        assert got == pytest.approx(0.1987605, abs=1e-7)

    def test_zero_activations(self):
        cfg = PenaltyConfig(include_logits=True)
        assert sparsity_penalty(one_layer_record(np.zeros((3, 4))), cfg, 5).item() == 0.0

    def test_batch_mean_invariance(self, rng):
        row = rng.normal(size=6)
        cfg = PenaltyConfig(sigma=0.1, include_logits=True)
        one = sparsity_penalty(one_layer_record([row]), cfg, 7).item()
        two = sparsity_penalty(one_layer_record([row, row]), cfg, 7).item()
        assert two == pytest.approx(one, rel=1e-15)

    def test_default_excludes_logits(self, rng, tiny_cnn):
        _, rec = forward(tiny_cnn, rng.normal(size=(2, 1, 8, 8)))
        chosen = selected_layers(rec, PenaltyConfig())
        assert chosen == list(range(len(tiny_cnn.layers) - 1))
        relu_only = selected_layers(rec, PenaltyConfig(layer_kinds=("relu",)))
        assert all(tiny_cnn.layers[i].kind == "relu" for i in relu_only)

    def test_sum_over_selected_layers(self, rng, tiny_cnn):
        _, rec = forward(tiny_cnn, rng.normal(size=(3, 1, 8, 8)))
        cfg = PenaltyConfig(sigma=1e-3, layer_kinds=("relu",))
        m = tiny_cnn.parameter_count
        expect = sum(l0_direct(e.activation.data.ravel(), 1e-3) for e in rec
                     if e.layer_kind == "relu") / (3 * m)
        assert sparsity_penalty(rec, cfg, m).item() == pytest.approx(expect, rel=1e-12)

    def test_activation_count_normalization(self):
        rec = one_layer_record([[1.0, 0.0, 2.0, 0.0]])
        cfg = PenaltyConfig(sigma=0.01, include_logits=True, normalize_by="activation_count")
        assert sparsity_penalty(rec, cfg, 99).item() == pytest.approx(1.987605 / 4, abs=1e-6)

    def test_empty_selection(self, rng, tiny_cnn):
        _, rec = forward(tiny_cnn, rng.normal(size=(1, 1, 8, 8)))
        with pytest.raises(ValueError):
            sparsity_penalty(rec, PenaltyConfig(layer_kinds=("softmax",)), 10)

    def test_nonpositive_m(self):
        with pytest.raises(ValueError):
            sparsity_penalty(one_layer_record([1.0]), PenaltyConfig(include_logits=True), 0)

    def test_lambda_zero_gradient_bit_identical(self, rng, tiny_cnn):
        x = rng.normal(size=(4, 1, 8, 8))
        labels = np.array([0, 1, 2, 0])

        def grads(pen):
            with GradientTape() as tape:
                loss, _ = objective(tiny_cnn, x, labels, pen)
            g = backward(tape, loss, tiny_cnn.weights)
            return loss.item(), [g[w] for w in tiny_cnn.weights]

        base_loss, base = grads(None)
        for pen in (PenaltyConfig(lam=0.0), PenaltyConfig(lam=0.0, sign=-1)):
            loss, got = grads(pen)
            assert loss == base_loss
            for a, b in zip(base, got):
                assert a.tobytes() == b.tobytes()


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"sigma": 0.0}, {"lam": -1.0}, {"sign": 0},
                                        {"normalize_by": "batch"}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            PenaltyConfig(**kwargs)

    def test_dict_round_trip(self):
        cfg = PenaltyConfig(sigma=1e-6, lam=2.5, sign=-1, layer_kinds=("relu",))
        assert PenaltyConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            PenaltyConfig.from_dict({"sigma": 1e-3, "gamma": 1})
