import math

import numpy as np
import pytest

from harmnet import autodiff as ad
from harmnet import model as M
from harmnet.errors import ConfigError, ContractError, DataError, IncompatibleModelError


def tiny(variant, **kw):
    base = dict(variant=variant, vocab_size=20, num_classes=3, embed_dim=6, n_max=10, filter_widths=[2, 3],
                channels=4, pool_window=2, hidden_size=5, dropout_rate=0.0, precision="float64", seed=0)
    base.update(kw)
    return M.ModelConfig(**base)


def batch(n, seed=0, n_max=10, vocab=20):
    rng = np.random.default_rng(seed)
    ids = rng.integers(2, vocab, size=(n, n_max))
    for i in range(n):
        ids[i, rng.integers(1, n_max + 1):] = 0
    return ids


class TestBuild:
    def test_unknown_variant(self):
        with pytest.raises(ConfigError, match="att_bigru_cnn"):
            tiny("bogus")

    def test_equal_seeds_bitwise_identical(self):
        a, b = M.build(tiny("att_bilstm_cnn")), M.build(tiny("att_bilstm_cnn"))
        for k, p in a.parameters().items():
            assert np.array_equal(p.data, b.parameters()[k].data)

    def test_bidirectional_attention_width(self):
        m = M.build(tiny("att_bilstm_cnn"))
        assert m.attention.U.shape == (10, 10)

    @pytest.mark.parametrize("variant", M.VARIANTS)
    def test_parameter_count_matches_closed_form(self, variant):
        cfg = tiny(variant)
        assert M.build(cfg).num_parameters() == M.expected_parameter_count(cfg)

    def test_default_att_lstm_cnn_count_by_hand(self):
        cfg = M.ModelConfig(variant="att_lstm_cnn", vocab_size=1000, num_classes=2)
        emb = 1000 * 100
        conv = sum(k * 100 * 128 + 128 for k in (2, 3, 4, 5))
        lstm = 4 * 100 * (512 + 100 + 1)
        att = 100 * 100 + 100 + 100
        out = 100 * 2 + 2
        assert M.build(cfg).num_parameters() == emb + conv + lstm + att + out


class TestForward:
    @pytest.mark.parametrize("variant", M.VARIANTS)
    def test_rows_sum_to_one(self, variant):
        p = M.build(tiny(variant)).forward(batch(4)).data
        assert p.shape == (4, 3) and np.max(np.abs(p.sum(axis=1) - 1)) < 1e-9

    def test_zero_dense_gives_uniform(self):
        m = M.build(tiny("att_gru_cnn"))
        m.out.W.data[:] = 0
        m.out.b.data[:] = 0
        assert np.allclose(m.forward(batch(3)).data, 1 / 3, atol=1e-15)

    def test_wrong_length(self):
        with pytest.raises(ContractError, match="n_max=10"):
            M.build(tiny("cnn")).forward(np.ones((2, 9), int))

    @pytest.mark.parametrize("variant", M.VARIANTS)
    def test_batching_independence(self, variant):
        m = M.build(tiny(variant))
        ids = batch(8, seed=1)
        full = m.forward(ids).data
        for i in range(8):
            assert np.max(np.abs(m.forward(ids[i:i + 1]).data[0] - full[i])) < 1e-9

    def test_permutation_equivariance(self):
        m = M.build(tiny("att_bigru_cnn"))
        ids = batch(6, seed=2)
        perm = np.random.default_rng(0).permutation(6)
        assert np.max(np.abs(m.forward(ids[perm]).data - m.forward(ids).data[perm])) < 1e-12

    @pytest.mark.parametrize("variant", [v for v in M.VARIANTS if v.startswith("att_")])
    def test_single_real_token_concentrates_attention(self, variant):
        m = M.build(tiny(variant, pool_window=4))
        ids = np.zeros((1, 10), int)
        ids[0, 0] = 5
        alpha = m.predict(ids)[0].attention
        assert alpha[0] == pytest.approx(1.0, abs=1e-12) and not alpha[1:].any()

    def test_all_padding_row_still_defined(self):
        p = M.build(tiny("att_gru_cnn")).forward(np.zeros((1, 10), int)).data
        assert np.all(np.isfinite(p))


class TestLoss:
    def test_uniform(self):
        assert M.loss(ad.Tensor(np.full((1, 2), 0.5)), [0]).data == pytest.approx(math.log(2))

    def test_certain(self):
        assert M.loss(ad.Tensor(np.array([[1.0, 0.0]])), [0]).data == 0.0

    def test_direct_formula(self):
        assert M.loss(ad.Tensor(np.array([[0.7, 0.3]])), [0]).data == pytest.approx(-math.log(0.7), abs=1e-12)

    def test_floor(self):
        assert M.loss(ad.Tensor(np.array([[1.0, 0.0]])), [1]).data == pytest.approx(-math.log(1e-12))

    def test_mean_over_batch(self):
        p = ad.Tensor(np.array([[0.7, 0.3], [0.5, 0.5]]))
        assert M.loss(p, [0, 1]).data == pytest.approx((-math.log(0.7) + math.log(2)) / 2)

    @pytest.mark.parametrize("labels", [[2], [-1]])
    def test_label_out_of_range(self, labels):
        with pytest.raises(DataError):
            M.loss(ad.Tensor(np.full((1, 2), 0.5)), labels)


class TestPredict:
    def test_tie_goes_to_lower_index(self):
        m = M.build(tiny("cnn", num_classes=2))
        m.out.W.data[:] = 0
        m.out.b.data[:] = 0
        pred = m.predict(batch(1))[0]
        assert pred.label == 0 and np.allclose(pred.probs, 0.5)

    def test_dropout_seed_irrelevant_in_inference(self):
        a = M.build(tiny("att_gru_cnn", dropout_rate=0.5))
        b = M.build(tiny("att_gru_cnn", dropout_rate=0.5))
        b.dropout_rng = np.random.default_rng(99)
        ids = batch(4)
        assert all(np.array_equal(x.probs, y.probs) for x, y in zip(a.predict(ids), b.predict(ids)))

    @pytest.mark.parametrize("variant", M.VARIANTS)
    def test_argmax_matches_forward(self, variant):
        m = M.build(tiny(variant))
        ids = batch(6, seed=3)
        assert [p.label for p in m.predict(ids)] == list(m.forward(ids).data.argmax(axis=1))

    def test_attention_only_for_att_variants(self):
        assert M.build(tiny("gru_cnn")).predict(batch(1))[0].attention is None
        alpha = M.build(tiny("att_gru_cnn")).predict(batch(1))[0].attention
        assert abs(alpha.sum() - 1) < 1e-9

    def test_predict_proba_chunks(self):
        m = M.build(tiny("lstm"))
        ids = batch(7)
        assert np.allclose(m.predict_proba(ids, batch_size=3), m.forward(ids).data, atol=1e-12)


class TestCheckpoint:
    @pytest.mark.parametrize("variant", ["cnn", "att_bilstm_cnn"])
    def test_round_trip_bitwise(self, tmp_path, variant):
        m = M.build(tiny(variant, seed=4))
        path = tmp_path / "m.ckpt"
        M.save_checkpoint(m, path, vocab_hash="abc", extra={"schema": "full"})
        m2, meta = M.load_checkpoint(path)
        ids = batch(5)
        assert np.array_equal(m.forward(ids).data, m2.forward(ids).data)
        assert meta["vocab_hash"] == "abc" and meta["extra"] == {"schema": "full"}

    def test_same_model_same_bytes(self, tmp_path):
        m = M.build(tiny("gru_cnn"))
        M.save_checkpoint(m, tmp_path / "a")
        M.save_checkpoint(m, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_shape_mismatch(self):
        m = M.build(tiny("cnn"))
        state = m.state_dict()
        state["out.W"] = np.zeros((1, 1))
        with pytest.raises(IncompatibleModelError):
            m.load_state_dict(state)

    def test_not_a_checkpoint(self, tmp_path):
        import zipfile

        p = tmp_path / "x.zip"
        with zipfile.ZipFile(p, "w") as zf:
            zf.writestr("meta.json", "{}")
        with pytest.raises(IncompatibleModelError):
            M.load_checkpoint(p)
