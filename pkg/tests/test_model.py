import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rnnt_ilm import model as M
from rnnt_ilm import numeric as nm
from conftest import tiny_rnnt


def zero_params(obj):
    for k, p in obj.params.items():
        obj.params[k] = nm.param(np.zeros_like(p.value))
    return obj


@pytest.mark.parametrize("k,T,expected", [(1, 5, 5), (2, 5, 3), (3, 7, 3), (2, 4, 2)])
def test_subsampled_length(k, T, expected):
    m = tiny_rnnt(subsampling=k, enc_layers=2)
    assert M.encode(m, np.ones((T, 2))).shape == (expected, 3)
    assert M.encoded_length(T, k) == expected


def test_zero_encoder_gives_zero_output():
    m = zero_params(tiny_rnnt())
    assert not M.encode(m, np.random.default_rng(0).normal(size=(4, 2))).any()


def test_encode_rejects_empty_and_wrong_dims():
    m = tiny_rnnt()
    with pytest.raises(ValueError):
        M.encode(m, np.zeros((0, 2)))
    with pytest.raises(nm.ShapeError):
        M.encode_batch(m, np.zeros((1, 3, 5)))


def test_batched_encoding_matches_single(rng):
    m = tiny_rnnt(scale=5)
    feats = rng.normal(size=(2, 4, 2))
    batch = M.encode_batch(m, feats).value
    for i in range(2):
        np.testing.assert_allclose(batch[i], M.encode(m, feats[i]), atol=1e-15)


def test_predict_step_replay_and_stepwise(rng):
    m = tiny_rnnt(scale=5)
    hist = [2, 0, 1]

    def run():
        st = None
        st, g = M.predict_step(m, st, M.START)
        for a in hist:
            st, g = M.predict_step(m, st, a)
        return st, g

    (s1, g1), (s2, g2) = run(), run()
    assert np.array_equal(g1, g2)
    # batched prediction over the same history must agree with the step path
    full = M.predict_batch(m, np.array([hist])).value[0]
    np.testing.assert_allclose(full[-1], g1, atol=1e-15)


def test_predict_step_scalar_oracle():
    m = tiny_rnnt(vocab_size=2, pred_units=1, embed_dim=1, scale=4, seed=3)
    p = {k: v.value for k, v in m.params.items()}
    sig = lambda z: 1 / (1 + math.exp(-z))
    h = c = 0.0
    for row in [2, 1]:  # start symbol, then label 1
        x = p["pred.embed"][row, 0]
        z = [x * p["pred.0.w_x"][0, k] + h * p["pred.0.w_h"][0, k] + p["pred.0.b"][k] for k in range(4)]
        c = sig(z[1]) * c + sig(z[0]) * math.tanh(z[2])
        h = sig(z[3]) * math.tanh(c)
    st, _ = M.predict_step(m, None, M.START)
    _, g = M.predict_step(m, st, 1)
    assert abs(g[0] - h) < 1e-12


def test_label_range_checked():
    m = tiny_rnnt()
    with pytest.raises(IndexError):
        M.predict_step(m, None, 3)


def test_zero_joint_is_uniform():
    m = zero_params(tiny_rnnt())
    logits = M.joint_logits(m, np.ones(3), np.ones(3))
    assert not logits.any()


def test_identity_joint_is_additive(rng):
    m = tiny_rnnt(joint_activation="identity", scale=5)
    g, h = rng.normal(size=3), rng.normal(size=3)
    z = np.zeros(3)
    lhs = M.joint_logits(m, g, h)
    rhs = M.joint_logits(m, g, z) + M.joint_logits(m, z, h) - M.joint_logits(m, z, z)
    np.testing.assert_allclose(lhs, rhs, atol=1e-13)


def test_joint_dimension_mismatch():
    with pytest.raises(nm.ShapeError):
        M.joint_logits(tiny_rnnt(), np.zeros(2), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_no_blank_softmax_is_renormalized_label_part(seed):
    rng = np.random.default_rng(seed)
    m = tiny_rnnt(scale=8, seed=seed % 7)
    g, h = rng.normal(size=3) * 3, rng.normal(size=3) * 3
    full = np.exp(nm.log_softmax_np(M.joint_logits(m, g, h)))
    nb = M.joint_logits_no_blank(m, g, h)
    assert nb.shape == (3,)
    np.testing.assert_array_equal(nb, M.joint_logits(m, g, h)[:3])
    np.testing.assert_allclose(np.exp(nm.log_softmax_np(nb)), full[:3] / (1 - full[3]), rtol=1e-12)
    assert abs(full.sum() - 1) < 1e-12


def test_ngram_laplace_on_empty_counts():
    lm = M.NGramLm(2, 2, delta=1.0)
    _, dist = M.lm_step(lm, None, M.START)
    np.testing.assert_allclose(np.exp(dist), [1 / 3] * 3, rtol=1e-15)


def test_ngram_count_ratio():
    lm = M.NGramLm(2, 2, delta=0.0)
    lm.counts[(0,)] = np.array([1.0, 2.0, 1.0])  # a->a 1, a->b 2, a->EOS 1
    st, _ = M.lm_step(lm, None, M.START)
    _, dist = M.lm_step(lm, st, 0)
    assert math.exp(dist[1]) == pytest.approx(0.5, abs=1e-15)


def test_ngram_fit_contexts():
    lm = M.NGramLm(3, 2, delta=0.5).fit([(0, 1, 1)])
    assert lm.counts[(M.START, M.START)][0] == 1
    assert lm.counts[(0, 1)][1] == 1 and lm.counts[(1, 1)][2] == 1


def test_recurrent_lm_chain_rule(rng):
    lm = M.init_recurrent_lm(M.RecurrentLmConfig(4, 3, 5), seed=2)
    for p in lm.params.values():
        p.value = p.value * 10
    seq = [1, 3, 0, 2]
    st, dist = M.lm_step(lm, None, M.START)
    total = 0.0
    for a in seq:
        assert abs(np.exp(dist).sum() - 1) < 1e-12
        total += dist[a]
        st, dist = M.lm_step(lm, st, a)
    total += dist[lm.eos]
    assert M.lm_sequence_logprob(lm, seq) == pytest.approx(total, abs=1e-12)
    # batched scoring agrees with the step path
    lp = M.recurrent_lm_logprobs(lm, np.array([seq])).value[0]
    batched = sum(lp[s, a] for s, a in enumerate(seq)) + lp[len(seq), lm.eos]
    assert batched == pytest.approx(total, abs=1e-12)


def test_mini_ilm_output_dim():
    net = M.init_mini_ilm(M.MiniIlmConfig(3, 7), 0)
    _, h = M.mini_ilm_step(net, None, M.START)
    assert h.shape == (7,)
    assert M.mini_ilm_batch(net, np.array([[0, 1]])).shape == (1, 2, 7)


@pytest.mark.parametrize("make", [
    lambda: tiny_rnnt(scale=3, subsampling=2, enc_layers=2),
    lambda: M.init_recurrent_lm(M.RecurrentLmConfig(3), 4, kind="density-ratio-lm"),
    lambda: M.init_mini_ilm(M.MiniIlmConfig(3, 5), 1),
    lambda: M.NGramLm(2, 3, 0.1).fit([(0, 1, 2), (2, 1)]),
])
def test_round_trip_bit_identical(tmp_path, make):
    obj = make()
    path = tmp_path / "m.json"
    M.save_model(obj, path, vocab=["a", "b", "c"])
    back = M.load_model(path)
    assert back.kind == obj.kind
    if isinstance(obj, M.NGramLm):
        assert back.counts.keys() == obj.counts.keys()
        assert all(np.array_equal(back.counts[k], obj.counts[k]) for k in obj.counts)
    else:
        assert all(np.array_equal(back.params[k].value, obj.params[k].value) for k in obj.params)
        assert back.config == obj.config
    assert M.model_vocab(path) == ["a", "b", "c"]


def test_wrong_magic(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"magic": "something-else", "format_version": 1}))
    with pytest.raises(M.ModelFormatError):
        M.load_model(path)


def test_truncated_and_version_errors(tmp_path):
    path = tmp_path / "m.json"
    M.save_model(tiny_rnnt(), path)
    text = path.read_text()
    (tmp_path / "cut.json").write_text(text[: len(text) // 2])
    with pytest.raises(M.TruncatedModelError):
        M.load_model(tmp_path / "cut.json")
    (tmp_path / "v.json").write_text(text.replace('"format_version": 1', '"format_version": 99'))
    with pytest.raises(M.VersionMismatchError):
        M.load_model(tmp_path / "v.json")


def test_vocab_mismatch_is_dimension_error(tmp_path):
    path = tmp_path / "m.json"
    M.save_model(tiny_rnnt(), path)
    with pytest.raises(M.DimensionMismatchError):
        M.load_model(path, vocab_size=5)
    doc = json.loads(path.read_text())
    doc["params"]["joint.b_out"]["shape"] = [7]
    doc["params"]["joint.b_out"]["data"] = [0.0] * 7
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(M.DimensionMismatchError):
        M.load_model(tmp_path / "bad.json")
