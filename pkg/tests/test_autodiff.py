import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harmnet import autodiff as ad
from harmnet.errors import ContractError, DimensionError, ParameterError


def leaf(x, name="x"):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True, name=name)


def grad_of(fn, *params):
    with ad.Tape() as tape:
        loss = fn()
    return ad.backward(tape, loss, {p.name: p for p in params})


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(leaf(np.eye(2)), leaf([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[3.0], [4.0]])

    def test_zero_operand(self):
        out = ad.matmul(leaf([[1.0, 2.0]]), leaf([[0.0], [0.0]]))
        assert np.array_equal(out.data, [[0.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        A = leaf(rng.normal(size=(3, 4)), "A")
        B = leaf(rng.normal(size=(4, 2)), "B")
        err = ad.finite_diff_check(lambda: ad.sum_all(ad.matmul(A, B)), {"A": A, "B": B}, 1e-6)
        assert err < 1e-6

    def test_batched_with_shared_matrix(self):
        rng = np.random.default_rng(1)
        A = leaf(rng.normal(size=(2, 3, 4)), "A")
        B = leaf(rng.normal(size=(4, 5)), "B")
        assert ad.finite_diff_check(lambda: ad.sum_all(ad.mul(ad.matmul(A, B), ad.matmul(A, B))),
                                    {"A": A, "B": B}) < 1e-6


class TestActivations:
    def test_tanh_zero(self):
        assert ad.apply_activation(leaf([0.0]), "tanh").data[0] == 0.0

    def test_relu(self):
        assert np.array_equal(ad.apply_activation(leaf([-1.0, 2.0]), "relu").data, [0.0, 2.0])

    def test_sigmoid_gradient_at_zero(self):
        x = leaf([0.0])
        g = grad_of(lambda: ad.sum_all(ad.apply_activation(x, "sigmoid")), x)["x"]
        assert g[0] == pytest.approx(0.25, abs=1e-15)

    def test_relu_subgradient_at_zero_is_zero(self):
        x = leaf([0.0, 1.0])
        g = grad_of(lambda: ad.sum_all(ad.apply_activation(x, "relu")), x)["x"]
        assert np.array_equal(g, [0.0, 1.0])

    def test_unknown_kind(self):
        with pytest.raises(ParameterError):
            ad.apply_activation(leaf([1.0]), "gelu")


class TestSoftmax:
    def test_equal_scores(self):
        assert np.allclose(ad.softmax_rows(leaf([[0.0, 0.0, 0.0]])).data, 1 / 3, atol=1e-15)

    def test_no_overflow(self):
        p = ad.softmax_rows(leaf([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(p))
        assert abs(p[0, 0] - 1.0) < 1e-12 and abs(p[0, 1]) < 1e-12

    def test_beta_direct_formula(self):
        x = np.array([1.0, 2.0, 3.0])
        want = np.exp(x / 2) / np.exp(x / 2).sum()
        assert np.max(np.abs(ad.softmax_rows(leaf([x]), 2.0).data[0] - want)) < 1e-12

    def test_nonpositive_beta(self):
        with pytest.raises(ParameterError):
            ad.softmax_rows(leaf([[1.0]]), 0.0)

    def test_fully_masked_row_rejected(self):
        with pytest.raises(ContractError):
            ad.softmax_rows(leaf([[1.0, 2.0]]), 1.0, np.array([[False, False]]))

    def test_masked_entries_exactly_zero(self):
        p = ad.softmax_rows(leaf([[1.0, 2.0, 3.0]]), 1.0, np.array([[True, False, True]])).data
        assert p[0, 1] == 0.0 and abs(p.sum() - 1) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(0.1, 10))
    def test_rows_sum_to_one_and_beta_identity(self, row, beta):
        x = np.array([row])
        p = ad.softmax_rows(leaf(x), beta).data
        assert abs(p.sum() - 1) < 1e-9 and p.min() >= 0 and p.max() <= 1
        assert np.max(np.abs(p - ad.softmax_rows(leaf(x / beta), 1.0).data)) < 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(2)
        x = leaf(rng.normal(size=(3, 5)), "x")
        w = rng.normal(size=(3, 5))
        assert ad.finite_diff_check(lambda: ad.sum_all(ad.mul(ad.softmax_rows(x, 1.7), w)), {"x": x}) < 1e-6


class TestConcat:
    def test_basic(self):
        assert np.array_equal(ad.concat([leaf([[1.0]]), leaf([[2.0]])], axis=1).data, [[1.0, 2.0]])

    def test_zeros(self):
        out = ad.concat([leaf(np.zeros((2, 3))) for _ in range(4)], axis=1)
        assert out.shape == (2, 12) and not out.data.any()

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            ad.concat([leaf(np.zeros((2, 3))), leaf(np.zeros((3, 3)))], axis=1)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        a, b = leaf(rng.normal(size=(2, 3)), "a"), leaf(rng.normal(size=(2, 2)), "b")
        w = rng.normal(size=(2, 5))
        f = lambda: ad.sum_all(ad.mul(ad.concat([a, b], axis=1), w))  # noqa: E731
        assert ad.finite_diff_check(f, {"a": a, "b": b}) < 1e-6


class TestDropout:
    def test_rate_zero_identity(self):
        x = leaf(np.arange(5.0))
        assert ad.dropout(x, 0.0, np.random.default_rng(0), True).data is x.data

    def test_inference_identity(self):
        x = leaf(np.arange(5.0))
        assert np.array_equal(ad.dropout(x, 0.9, np.random.default_rng(0), False).data, x.data)

    def test_zero_fraction(self):
        out = ad.dropout(leaf(np.ones(100_000)), 0.25, np.random.default_rng(0), True).data
        assert abs((out == 0).mean() - 0.25) < 0.01
        assert np.allclose(out[out != 0], 1 / 0.75)

    @pytest.mark.parametrize("rate", [-0.1, 1.0])
    def test_bad_rate(self, rate):
        with pytest.raises(ParameterError):
            ad.dropout(leaf([1.0]), rate, np.random.default_rng(0), True)


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.zeros((2, 3)))
        assert np.array_equal(grad_of(lambda: ad.sum_all(x), x)["x"], np.ones((2, 3)))

    def test_zero_times_x(self):
        x = leaf(np.arange(4.0))
        assert not grad_of(lambda: ad.sum_all(ad.scale(x, 0.0)), x)["x"].any()

    def test_nonscalar_loss(self):
        x = leaf(np.ones(3))
        with ad.Tape() as tape:
            y = ad.scale(x, 2.0)
        with pytest.raises(ContractError):
            ad.backward(tape, y)

    def test_unreached_parameter_gets_zeros(self):
        x, y = leaf([1.0, 2.0], "x"), leaf([[3.0]], "y")
        g = grad_of(lambda: ad.sum_all(x), x, y)
        assert set(g) == {"x", "y"} and g["y"].shape == (1, 1) and not g["y"].any()

    def test_shared_input_accumulates(self):
        x = leaf([3.0], "x")
        g = grad_of(lambda: ad.sum_all(ad.mul(x, x)), x)["x"]
        assert g[0] == pytest.approx(6.0)

    def test_tape_topological_order(self):
        x = leaf([1.0])
        with ad.Tape() as tape:
            ad.sum_all(ad.apply_activation(ad.scale(x, 2.0), "tanh"))
        seen = {id(x)}
        for node in tape.nodes:
            assert all(id(t) in seen or t.node is None for t in node.inputs)
            seen.add(id(node.output))

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with ad.Tape() as tape, ad.no_grad():
            ad.scale(x, 2.0)
        assert len(tape) == 0


class TestFiniteDiff:
    def test_quadratic(self):
        t = leaf([3.0], "t")
        assert ad.finite_diff_check(lambda: ad.sum_all(ad.mul(t, t)), {"t": t}, 1e-5) < 1e-8

    def test_constant(self):
        t = leaf([3.0], "t")
        assert ad.finite_diff_check(lambda: ad.sum_all(ad.scale(t, 0.0)), {"t": t}) == 0.0

    def test_nondeterministic_objective(self):
        t = leaf([1.0], "t")
        rng = np.random.default_rng(0)
        with pytest.raises(ContractError):
            ad.finite_diff_check(lambda: ad.sum_all(ad.add(t, rng.normal(size=1))), {"t": t})

    def test_attention_subnetwork(self):
        from harmnet import layers as L

        rng = np.random.default_rng(4)
        p = L.AttentionParams.init(rng, 6)
        p.b.data[:] = rng.normal(size=6) * 0.1
        p.z.data[:] = rng.normal(size=6)  # unit-scale z keeps U gradients clear of roundoff
        h = leaf(rng.normal(size=(5, 6)), "h")
        w = rng.normal(size=6)
        mask = np.array([1, 1, 0, 1, 1], bool)
        params = dict(p.parameters(), h=h)
        f = lambda: ad.sum_all(ad.mul(L.attention_pool(h, p, mask)[0], w))  # noqa: E731
        assert ad.finite_diff_check(f, params, 1e-6) < 1e-6


def test_tensor_values_are_flat_row_major():
    t = ad.Tensor(np.arange(6.0).reshape(2, 3))
    assert t.shape == (2, 3) and list(t.values) == [0, 1, 2, 3, 4, 5]
    assert np.prod(t.shape) == t.values.size


def test_replay_is_bitwise_deterministic():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 3))

    def run():
        return ad.softmax_rows(ad.apply_activation(ad.matmul(leaf(a), leaf(b)), "tanh"), 0.7).data

    assert np.array_equal(run(), run())
