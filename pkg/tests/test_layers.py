import numpy as np
import pytest

from harmnet import autodiff as ad
from harmnet import layers as L
from harmnet.errors import ConfigError, DataError, DimensionError, InputError

from .oracles import conv_oracle, gru_step_ref, lstm_step_ref


def T(x, name=None):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True, name=name)


def cell(kind, d_in, H, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    nb = L.GATE_BLOCKS[kind]
    return L.RecurrentCellParams(kind, T(rng.normal(size=(d_in, nb * H)) * scale, "W"),
                                 T(rng.normal(size=(H, nb * H)) * scale, "U"),
                                 T(rng.normal(size=nb * H) * scale, "b"))


def zero_cell(kind, d_in, H):
    nb = L.GATE_BLOCKS[kind]
    return L.RecurrentCellParams(kind, T(np.zeros((d_in, nb * H)), "W"), T(np.zeros((H, nb * H)), "U"),
                                 T(np.zeros(nb * H), "b"))


class TestEmbedding:
    def table(self):
        return L.EmbeddingTable.init(np.random.default_rng(0), 10, 4)

    def test_padding_row_zero(self):
        tab = self.table()
        assert not tab.weight.data[0].any()
        assert not L.embed_sequence([0, 0, 0], tab).data.any()

    def test_identical_rows(self):
        out = L.embed_sequence([5, 5], self.table()).data
        assert np.array_equal(out[0], out[1])

    def test_gradient_counts_occurrences(self):
        tab = self.table()
        with ad.Tape() as tape:
            loss = ad.sum_all(L.embed_sequence([3, 7, 3, 0], tab))
        g = ad.backward(tape, loss, tab.parameters())["embedding"]
        assert np.all(g[3] == 2) and np.all(g[7] == 1) and not g[0].any()
        assert not np.delete(g, [3, 7], axis=0).any()

    def test_out_of_range_names_position(self):
        with pytest.raises(DataError, match=r"position \(1,\)"):
            L.embed_sequence([1, 10], self.table())


class TestConv:
    def test_zero_input_zero_bias(self):
        p = L.ConvBlockParams.init(np.random.default_rng(0), [2, 3], 3, 4)
        assert not L.conv1d_multi(T(np.zeros((6, 3))), p).data.any()

    def test_width_one_is_elementwise(self):
        p = L.ConvBlockParams([1], [T(np.ones((1, 1, 1)))], [T(np.zeros(1))])
        out = L.conv1d_multi(T([[1.0], [-2.0], [3.0]]), p).data
        assert np.array_equal(out[:, 0], [1.0, 0.0, 3.0])

    def test_averaging_filter_on_ramp(self):
        p = L.ConvBlockParams([3], [T(np.full((3, 1, 1), 1 / 3))], [T(np.zeros(1))])
        x = np.arange(1.0, 7.0)[:, None]
        want = conv_oracle(x, [p.weights[0].data], [p.biases[0].data])
        assert np.max(np.abs(L.conv1d_multi(T(x), p).data - want)) < 1e-12
        assert np.allclose(L.conv1d_multi(T(x), p).data[1:-1, 0], np.arange(2.0, 6.0))

    def test_output_width(self):
        p = L.ConvBlockParams.init(np.random.default_rng(0), [2, 3, 4, 5], 3, 7)
        for n in (5, 9, 23):
            assert L.conv1d_multi(T(np.ones((n, 3))), p).shape == (n, 28)

    def test_too_short(self):
        p = L.ConvBlockParams.init(np.random.default_rng(0), [2, 5], 3, 2)
        with pytest.raises(InputError):
            L.conv1d_multi(T(np.ones((4, 3))), p)

    def test_widths_must_increase(self):
        with pytest.raises(ConfigError):
            L.ConvBlockParams.init(np.random.default_rng(0), [3, 2], 3, 2)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        p = L.ConvBlockParams.init(rng, [2, 3], 3, 2)
        for b in p.biases:
            b.data[:] = rng.normal(size=b.shape)
        x = T(rng.normal(size=(2, 6, 3)), "x")
        w = rng.normal(size=(2, 6, 4))
        params = dict(p.parameters(), x=x)
        assert ad.finite_diff_check(lambda: ad.sum_all(ad.mul(L.conv1d_multi(x, p), w)), params) < 1e-6


class TestMaxPool:
    def test_window_one_identity(self):
        x = np.random.default_rng(0).normal(size=(5, 3))
        assert np.array_equal(L.max_pool(T(x), 1).data, x)

    def test_example(self):
        assert np.array_equal(L.max_pool(T([[1.0], [5.0], [2.0], [0.0]]), 2).data[:, 0], [5.0, 2.0])

    def test_partial_last_window(self):
        out = L.max_pool(T(np.arange(5.0)[:, None]), 2).data[:, 0]
        assert np.array_equal(out, [1.0, 3.0, 4.0])

    def test_tie_routes_to_first(self):
        x = T([[3.0], [3.0]], "x")
        with ad.Tape() as tape:
            loss = ad.sum_all(L.max_pool(x, 2))
        g = ad.backward(tape, loss, {"x": x})["x"]
        assert np.array_equal(g[:, 0], [1.0, 0.0])

    def test_bad_window(self):
        with pytest.raises(ConfigError):
            L.max_pool(T(np.ones((3, 1))), 0)

    def test_pool_mask(self):
        m = np.array([[1, 1, 1, 0, 0, 0, 0]], bool)
        assert L.pool_mask(m, 2).tolist() == [[True, True, False, False]]


class TestLSTM:
    def test_zero_everything(self):
        p = zero_cell("lstm", 3, 2)
        h, c = L.lstm_step(T(np.zeros(3)), (T(np.zeros(2)), T(np.zeros(2))), p)
        assert not h.data.any() and not c.data.any()

    def test_saturated_gates_keep_cell(self):
        H = 3
        p = zero_cell("lstm", 2, H)
        p.b.data[:H] = -100.0
        p.b.data[H:2 * H] = 100.0
        c0 = np.array([0.3, -0.7, 1.2])
        _, c = L.lstm_step(T(np.ones(2)), (T(np.zeros(H)), T(c0)), p)
        assert np.max(np.abs(c.data - c0)) < 1e-10

    def test_two_step_unroll_matches_scalar_reference(self):
        rng = np.random.default_rng(3)
        p = cell("lstm", 4, 3, seed=3)
        h, c = np.zeros(3), np.zeros(3)
        ht, ct = T(h), T(c)
        for _ in range(2):
            x = rng.normal(size=4)
            ht, ct = L.lstm_step(T(x), (ht, ct), p)
            h, c = lstm_step_ref(x, h, c, p.W.data, p.U.data, p.b.data)
        assert np.max(np.abs(ht.data - h)) < 1e-10 and np.max(np.abs(ct.data - c)) < 1e-10

    def test_state_shape_mismatch(self):
        with pytest.raises(DimensionError):
            L.lstm_step(T(np.zeros(3)), (T(np.zeros(4)), T(np.zeros(4))), zero_cell("lstm", 3, 2))

    def test_wrong_kind(self):
        with pytest.raises(ConfigError):
            L.lstm_step(T(np.zeros(3)), (T(np.zeros(2)), T(np.zeros(2))), zero_cell("gru", 3, 2))


class TestGRU:
    def test_saturated_update_gate_keeps_state(self):
        H = 3
        p = cell("gru", 2, H, scale=0.1)
        p.b.data[:H] = -100.0
        h0 = np.array([0.5, -0.2, 0.9])
        h = L.gru_step(T(np.ones(2)), T(h0), p)
        assert np.max(np.abs(h.data - h0)) < 1e-10

    def test_zero_everything(self):
        assert not L.gru_step(T(np.zeros(3)), T(np.zeros(2)), zero_cell("gru", 3, 2)).data.any()

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(4)
        p = cell("gru", 4, 3, seed=4)
        x, h = rng.normal(size=4), rng.normal(size=3)
        want = gru_step_ref(x, h, p.W.data, p.U.data, p.b.data)
        assert np.max(np.abs(L.gru_step(T(x), T(h), p).data - want)) < 1e-10

    def test_state_shape_mismatch(self):
        with pytest.raises(DimensionError):
            L.gru_step(T(np.zeros(3)), T(np.zeros(5)), zero_cell("gru", 3, 2))


class TestRunRNN:
    @pytest.mark.parametrize("kind", ["lstm", "gru", "plain"])
    def test_single_step_directions_agree(self, kind):
        p = cell(kind, 3, 4)
        x = T(np.random.default_rng(0).normal(size=(1, 3)))
        assert np.array_equal(L.run_rnn(x, p, "forward").data, L.run_rnn(x, p, "backward").data)

    @pytest.mark.parametrize("kind", ["lstm", "gru", "plain"])
    def test_zero_weight_cell(self, kind):
        out = L.run_rnn(T(np.ones((5, 3))), zero_cell(kind, 3, 2))
        assert not out.data.any()

    @pytest.mark.parametrize("kind", ["lstm", "gru", "plain"])
    def test_backward_is_reversed_forward(self, kind):
        p = cell(kind, 3, 4)
        x = np.random.default_rng(1).normal(size=(7, 3))
        bwd = L.run_rnn(T(x), p, "backward").data
        fwd_rev = L.run_rnn(T(x[::-1].copy()), p, "forward").data[::-1]
        assert np.max(np.abs(bwd - fwd_rev)) < 1e-12

    def test_empty_sequence(self):
        with pytest.raises(InputError):
            L.run_rnn(T(np.zeros((0, 3))), cell("gru", 3, 2))

    @pytest.mark.parametrize("kind", ["lstm", "gru"])
    @pytest.mark.parametrize("direction", ["forward", "backward"])
    def test_fused_matches_unfused(self, kind, direction):
        rng = np.random.default_rng(2)
        p = cell(kind, 3, 4)
        x = T(rng.normal(size=(3, 6, 3)))
        mask = rng.random((3, 6)) > 0.3
        a = L.run_rnn(x, p, direction, mask).data
        b = L.run_rnn_unfused(x, p, direction, mask).data
        assert np.max(np.abs(a - b)) < 1e-12

    def test_masked_steps_carry_state(self):
        p = cell("gru", 3, 4)
        x = np.random.default_rng(3).normal(size=(5, 3))
        out = L.run_rnn(T(x), p, "forward", np.array([1, 1, 0, 1, 0], bool)).data
        assert np.array_equal(out[2], out[1]) and np.array_equal(out[4], out[3])


class TestBiRNN:
    def test_width_and_forward_columns(self):
        f, b = cell("lstm", 3, 4, 0), cell("lstm", 3, 4, 1)
        x = T(np.random.default_rng(0).normal(size=(5, 3)))
        out = L.birnn(x, f, b).data
        assert out.shape == (5, 8)
        assert np.array_equal(out[:, :4], L.run_rnn(x, f, "forward").data)

    def test_hidden_mismatch(self):
        with pytest.raises(ConfigError):
            L.birnn(T(np.ones((4, 3))), cell("gru", 3, 2), cell("gru", 3, 3))

    @pytest.mark.parametrize("kind", ["lstm", "gru"])
    def test_gradient(self, kind):
        rng = np.random.default_rng(5)
        f, b = cell(kind, 3, 3, 0), cell(kind, 3, 3, 1)
        for c, pre in ((f, "f"), (b, "b")):
            for t in (c.W, c.U, c.b):
                t.name = f"{pre}.{t.name}"
        x = T(rng.normal(size=(2, 5, 3)), "x")
        mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], bool)
        w = rng.normal(size=(2, 5, 6))
        params = dict(f.parameters(), **b.parameters(), x=x)
        assert ad.finite_diff_check(lambda: ad.sum_all(ad.mul(L.birnn(x, f, b, mask), w)), params) < 1e-5


class TestAttention:
    def params(self, d, seed=0):
        rng = np.random.default_rng(seed)
        p = L.AttentionParams.init(rng, d)
        p.b.data[:] = rng.normal(size=d) * 0.3
        p.z.data[:] = rng.normal(size=d)
        return p

    def test_singleton(self):
        h = np.array([[0.3, -1.0, 2.0]])
        c, a = L.attention_pool(T(h), self.params(3))
        assert np.array_equal(a.data, [1.0]) and np.allclose(c.data, h[0], atol=0, rtol=0)

    def test_identical_rows(self):
        h = np.tile([[0.1, 0.2]], (2, 1))
        assert np.allclose(L.attention_pool(T(h), self.params(2))[1].data, [0.5, 0.5], atol=1e-15)

    def test_mask_and_convex_hull(self):
        rng = np.random.default_rng(1)
        h = rng.normal(size=(6, 4))
        mask = np.array([1, 0, 1, 1, 0, 1], bool)
        p = self.params(4)
        c, a = L.attention_pool(T(h), p, mask)
        assert np.all(a.data[~mask] == 0) and abs(a.data.sum() - 1) < 1e-9
        assert np.all(h[mask].min(0) <= c.data + 1e-12) and np.all(c.data <= h[mask].max(0) + 1e-12)
        h2 = h.copy()
        h2[~mask] = rng.normal(size=(2, 4)) * 100
        assert np.max(np.abs(L.attention_pool(T(h2), p, mask)[0].data - c.data)) < 1e-9

    def test_beta_invariance(self):
        h = np.random.default_rng(2).normal(size=(5, 3))
        p = self.params(3)
        beta = 2.5
        c1, a1 = L.attention_pool(T(h), p, beta=beta)
        p.z.data /= beta
        c2, a2 = L.attention_pool(T(h), p, beta=1.0)
        assert np.max(np.abs(a1.data - a2.data)) < 1e-9 and np.max(np.abs(c1.data - c2.data)) < 1e-9

    def test_fully_masked(self):
        with pytest.raises(InputError):
            L.attention_pool(T(np.ones((3, 2))), self.params(2), np.zeros(3, bool))


class TestDense:
    def test_identity(self):
        p = L.DenseParams(T(np.eye(3)), T(np.zeros(3)))
        x = np.array([1.0, -2.0, 0.5])
        assert np.array_equal(L.dense(T(x), p).data, x)

    def test_zero_weights_give_bias(self):
        p = L.DenseParams(T(np.zeros((3, 2))), T([0.5, -1.0]))
        assert np.array_equal(L.dense(T(np.ones(3)), p, "relu").data, [0.5, 0.0])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            L.dense(T(np.ones(4)), L.DenseParams(T(np.zeros((3, 2))), T(np.zeros(2))))

    def test_gradient(self):
        rng = np.random.default_rng(3)
        p = L.DenseParams.init(rng, 4, 3)
        p.b.data[:] = rng.normal(size=3)
        x = T(rng.normal(size=(5, 4)), "x")
        w = rng.normal(size=(5, 3))
        params = dict(p.parameters(), x=x)
        assert ad.finite_diff_check(lambda: ad.sum_all(ad.mul(L.dense(x, p, "tanh"), w)), params) < 1e-6


def test_init_scheme():
    rng = np.random.default_rng(0)
    c = L.RecurrentCellParams.init(rng, "lstm", 10, 6)
    assert np.all(c.b.data[6:12] == 1.0) and not np.delete(c.b.data, np.s_[6:12]).any()
    a = np.sqrt(6 / 16)
    assert np.abs(c.W.data).max() <= a
    att = L.AttentionParams.init(rng, 8)
    assert np.abs(att.z.data).max() <= 0.05
