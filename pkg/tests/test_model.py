import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irlm import tensor as T
from irlm.gradcheck import check_gradients
from irlm.model import (
    HiddenStates, ModelConfig, forward, init_model, load_checkpoint, mlm_logits,
    param_shapes, predict_masked, save_checkpoint,
)
from irlm.optim import AdamState
from irlm.tensor import ShapeError, Tensor
from irlm.text import CLS, MASK, PAD, SEP, pad_batch

from conftest import tiny_config


def _batch(seed=0, n=3, vocab=40, max_body=10):
    rng = np.random.default_rng(seed)
    seqs = [[CLS, *rng.integers(5, vocab, size=rng.integers(1, max_body)).tolist(), SEP] for _ in range(n)]
    return pad_batch(seqs)


class TestInit:
    def test_parameter_census(self):
        cfg = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=64, vocab_size=100, max_len=32)
        # per layer: 2 norms (2*16 each) + qkv (16*48 + 48) + out (16*16 + 16) + ff1 (16*64 + 64) + ff2 (64*16 + 16)
        per_layer = 2 * 32 + (768 + 48) + (256 + 16) + (1024 + 64) + (1024 + 16)
        expected = 100 * 16 + 32 * 16 + 2 * per_layer + 32 + 100
        assert expected == 8804
        assert init_model(cfg).num_parameters() == expected
        assert sum(int(np.prod(s)) for s in param_shapes(cfg).values()) == expected

    def test_same_seed_identical(self):
        a = init_model(tiny_config(), np.random.default_rng(5))
        b = init_model(tiny_config(), np.random.default_rng(5))
        assert all(np.array_equal(a[n].data, b[n].data) for n in a.params)

    def test_indivisible_heads(self):
        with pytest.raises(ValueError, match="divisible"):
            init_model(tiny_config(d_model=15, n_heads=2))

    def test_lists_every_violation(self):
        with pytest.raises(ValueError) as exc:
            tiny_config(d_model=15, dropout_rate=1.5, precision="half").validate()
        msg = str(exc.value)
        assert "divisible" in msg and "dropout_rate" in msg and "precision" in msg

    def test_init_statistics(self, tiny_model):
        w = tiny_model["layers.0.ff1.weight"].data
        assert abs(w.std() - 0.02) < 0.003
        assert not tiny_model["layers.0.ff1.bias"].data.any()
        assert np.all(tiny_model["ln_f.gain"].data == 1.0)

    def test_no_decay_names(self, tiny_model):
        names = tiny_model.no_decay_names()
        assert "mlm_bias" in names and "layers.1.ln2.gain" in names and "layers.0.qkv.bias" in names
        assert "tok_emb" not in names and "layers.0.qkv.weight" not in names


class TestForward:
    def test_attention_rows_normalized(self, tiny_model):
        b = _batch()
        log = []
        with T.no_grad():
            forward(tiny_model, b.ids, b.attention_mask, attn_log=log)
        assert len(log) == 2
        for probs in log:
            np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
            pad_keys = b.attention_mask[:, None, None, :] == 0
            assert np.all(np.broadcast_to(probs, probs.shape)[np.broadcast_to(pad_keys, probs.shape)] == 0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 5))
    def test_padding_invariance(self, seed, extra):
        model = init_model(tiny_config(), np.random.default_rng(1))
        b = _batch(seed)
        wide = np.concatenate([b.ids, np.full((len(b), extra), PAD)], axis=1)[:, :16]
        wide_mask = np.concatenate([b.attention_mask, np.zeros((len(b), extra), dtype=np.int64)], axis=1)[:, :16]
        with T.no_grad():
            h1 = forward(model, b.ids, b.attention_mask)
            h2 = forward(model, wide, wide_mask)
        for i in range(len(b)):
            np.testing.assert_allclose(h1.rows(i), h2.rows(i), atol=1e-6)

    def test_batch_composition_invariance(self, tiny_model):
        b = _batch(3, n=4)
        with T.no_grad():
            full = forward(tiny_model, b.ids, b.attention_mask)
            for i, seq in enumerate(b.sequences()):
                one = pad_batch([seq])
                alone = forward(tiny_model, one.ids, one.attention_mask)
                np.testing.assert_allclose(alone.rows(0), full.rows(i), atol=1e-6)

    def test_eval_mode_deterministic(self, tiny_model):
        b = _batch()
        with T.no_grad():
            h1 = forward(tiny_model, b.ids, b.attention_mask).values.data
            h2 = forward(tiny_model, b.ids, b.attention_mask, rng=np.random.default_rng(9)).values.data
        assert np.array_equal(h1, h2)

    def test_dropout_changes_train_mode(self, tiny_model):
        b = _batch()
        with T.no_grad():
            h1 = forward(tiny_model, b.ids, b.attention_mask).values.data
            h2 = forward(tiny_model, b.ids, b.attention_mask, train_mode=True, rng=np.random.default_rng(0)).values.data
        assert not np.array_equal(h1, h2)

    def test_too_long(self, tiny_model):
        ids = np.full((1, 17), 7)
        with pytest.raises(ShapeError, match="max_len"):
            forward(tiny_model, ids, np.ones_like(ids))

    def test_id_out_of_range(self, tiny_model):
        ids = np.array([[CLS, 40, SEP]])
        with pytest.raises(ShapeError):
            forward(tiny_model, ids, np.ones_like(ids))

    def test_provenance_tag(self, tiny_model):
        b = _batch()
        with T.no_grad():
            assert forward(tiny_model, b.ids, b.attention_mask, provenance="filled").provenance == "filled"
        with pytest.raises(ValueError):
            HiddenStates(Tensor(np.zeros((1, 1, 16))), np.ones((1, 1)), "other")


class TestHead:
    def test_shape_and_normalization(self, tiny_model):
        b = _batch()
        with T.no_grad():
            logits = mlm_logits(tiny_model, forward(tiny_model, b.ids, b.attention_mask))
        assert logits.shape == (*b.ids.shape, 40)
        np.testing.assert_allclose(T.softmax(logits).data.sum(axis=-1), 1.0, atol=1e-6)

    def test_width_mismatch(self, tiny_model):
        with pytest.raises(ShapeError):
            mlm_logits(tiny_model, HiddenStates(Tensor(np.zeros((1, 2, 8))), np.ones((1, 2)), "corrupted"))

    def test_head_gradient(self):
        model = init_model(tiny_config(n_layers=1, vocab_size=12, dropout_rate=0.0), np.random.default_rng(2))
        b = _batch(1, n=2, vocab=12, max_body=5)
        rng = np.random.default_rng(0)
        mask = rng.random(b.ids.shape) < 0.5
        mask[:, 1] = True
        h = Tensor(rng.normal(size=(*b.ids.shape, 16)), requires_grad=True)
        params = {"h": h, "tok_emb": model["tok_emb"], "mlm_bias": model["mlm_bias"]}

        def loss():
            return T.cross_entropy(mlm_logits(model, HiddenStates(h, b.attention_mask, "corrupted")), b.ids, mask)

        T.backward(loss())
        result = check_gradients(lambda: loss().item(), params, {k: p.grad for k, p in params.items()})
        assert result.ok, result

    def test_full_encoder_gradient(self):
        # cross-entropy of the head over a 2-layer d_model-16 encoder, every parameter entry
        model = init_model(tiny_config(vocab_size=12, max_len=8, d_ff=16, dropout_rate=0.0), np.random.default_rng(3))
        b = _batch(2, n=2, vocab=12, max_body=5)
        mask = np.zeros(b.ids.shape, dtype=bool)
        mask[:, 1] = True
        ids = np.where(mask, MASK, b.ids)

        def loss():
            h = forward(model, ids, b.attention_mask)
            return T.cross_entropy(mlm_logits(model, h), b.ids, mask)

        model.zero_grad()
        T.backward(loss())
        result = check_gradients(lambda: loss().item(), model.params, {k: p.grad for k, p in model.params.items()})
        assert result.ok, result


class TestPredict:
    def test_argmax(self):
        logits = np.zeros((3, 10))
        logits[1, 7] = 5.0
        assert predict_masked(logits, [1]) == [7]

    def test_tie_goes_to_lower_id(self):
        logits = np.zeros((2, 10))
        logits[0, [6, 8]] = 3.0
        assert predict_masked(logits, [0]) == [6]

    def test_specials_never_predicted(self):
        logits = np.zeros((1, 10))
        logits[0, MASK] = 9.0
        assert predict_masked(logits, [0]) == [5]
        assert predict_masked(logits, [0], exclude_special=False) == [MASK]

    def test_length(self):
        assert len(predict_masked(np.zeros((6, 10)), [1, 3, 4])) == 3


class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny_model):
        adam = AdamState(step=3, no_decay=tiny_model.no_decay_names())
        adam.m["tok_emb"] = np.ones((40, 16))
        adam.v["tok_emb"] = np.full((40, 16), 2.0)
        save_checkpoint(tmp_path / "m.irlm", tiny_model, adam, {"step": 3, "note": "x"})
        model, adam2, state = load_checkpoint(tmp_path / "m.irlm")
        assert model.config == tiny_model.config
        assert state == {"step": 3, "note": "x"}
        assert adam2.step == 3 and adam2.no_decay == adam.no_decay
        np.testing.assert_array_equal(adam2.v["tok_emb"], adam.v["tok_emb"])
        b = _batch()
        with T.no_grad():
            h1 = forward(tiny_model, b.ids, b.attention_mask).values.data
            h2 = forward(model, b.ids, b.attention_mask).values.data
        assert np.array_equal(h1, h2)

    def test_single_precision_round_trip(self, tmp_path):
        model = init_model(tiny_config(precision="single"))
        save_checkpoint(tmp_path / "s.irlm", model)
        loaded, adam, state = load_checkpoint(tmp_path / "s.irlm")
        assert adam is None and state is None
        assert loaded["tok_emb"].dtype == np.float32
        assert np.array_equal(loaded["tok_emb"].data, model["tok_emb"].data)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope"):
            load_checkpoint(tmp_path / "nope.irlm")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.irlm").write_bytes(b"garbage-bytes")
        with pytest.raises(ValueError, match="not an IRLM"):
            load_checkpoint(tmp_path / "bad.irlm")

    def test_truncated(self, tmp_path, tiny_model):
        save_checkpoint(tmp_path / "m.irlm", tiny_model)
        raw = (tmp_path / "m.irlm").read_bytes()
        (tmp_path / "t.irlm").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(tmp_path / "t.irlm")
