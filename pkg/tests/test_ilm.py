import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rnnt_ilm import ilm as I
from rnnt_ilm import model as M
from rnnt_ilm import numeric as nm
from rnnt_ilm.corpus import Utterance
from rnnt_ilm.training import TrainConfig
from conftest import tiny_mini_ilm, tiny_rnnt


def zeroed(obj):
    for k, p in obj.params.items():
        obj.params[k] = nm.param(np.zeros_like(p.value))
    return obj


def all_variants(model, seed=0):
    dr = M.init_recurrent_lm(M.RecurrentLmConfig(model.vocab_size, 3, 4), seed, kind="density-ratio-lm")
    for p in dr.params.values():
        p.value = p.value * 20
    return {
        "density-ratio": I.IlmVariant("density-ratio", dr),
        "zero": I.IlmVariant("zero"),
        "avg": I.IlmVariant("avg"),
        "mini-lstm": I.IlmVariant("mini-lstm", tiny_mini_ilm(model, scale=20)),
    }


def test_avg_uses_mean_encoder_output():
    m = tiny_rnnt(scale=5)
    H = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    state, dist = I.ilm_init(I.IlmVariant("avg"), m, H)
    np.testing.assert_array_equal(state.h_prime, [0.5, 0.5, 0])
    _, g = M.predict_step(m, None, M.START)
    np.testing.assert_allclose(dist, nm.log_softmax_np(M.joint_logits_no_blank(m, g, np.array([0.5, 0.5, 0]))),
                               atol=1e-15)


def test_zero_ignores_encoder_output():
    m = tiny_rnnt(scale=5)
    a = I.ilm_init(I.IlmVariant("zero"), m, np.ones((4, 3)))
    b = I.ilm_init(I.IlmVariant("zero"), m)
    assert not a[0].h_prime.any()
    np.testing.assert_array_equal(a[1], b[1])


def test_density_ratio_start_matches_lm_without_eos():
    m = tiny_rnnt()
    v = all_variants(m)["density-ratio"]
    _, lm_dist = M.lm_step(v.resource, None, M.START)
    _, dist = I.ilm_init(v, m)
    p = np.exp(lm_dist[:-1])
    np.testing.assert_allclose(np.exp(dist), p / p.sum(), rtol=1e-13)


def test_variant_resources_validated():
    with pytest.raises(ValueError):
        I.IlmVariant("mini-lstm")
    with pytest.raises(ValueError):
        I.IlmVariant("density-ratio")
    with pytest.raises(ValueError):
        I.IlmVariant("bigram")
    with pytest.raises(ValueError):
        I.ilm_init(I.IlmVariant("avg"), tiny_rnnt())


def test_label_out_of_range():
    m = tiny_rnnt()
    st0, _ = I.ilm_init(I.IlmVariant("zero"), m)
    with pytest.raises(IndexError):
        I.ilm_step(I.IlmVariant("zero"), m, st0, 3)


def test_renormalization_worked_example():
    # joint probabilities over (a, b, blank) = (0.3, 0.2, 0.5)
    logits = np.log([0.3, 0.2, 0.5])
    np.testing.assert_allclose(np.exp(nm.log_softmax_np(logits[:2])), [0.6, 0.4], rtol=1e-15)


@pytest.mark.parametrize("kind", ["zero", "avg", "mini-lstm"])
def test_zero_parameter_model_gives_uniform(kind):
    m = zeroed(tiny_rnnt())
    res = zeroed(tiny_mini_ilm(m)) if kind == "mini-lstm" else None
    v = I.IlmVariant(kind, res)
    state, dist = I.ilm_init(v, m, np.ones((2, 3)))
    for a in (0, 2, 1):
        np.testing.assert_allclose(dist, -math.log(3), atol=1e-15)
        state, dist = I.ilm_step(v, m, state, a)


def test_mini_lstm_forced_to_frame_output_reproduces_joint():
    m = tiny_rnnt(scale=6)
    net = tiny_mini_ilm(m)
    h_t = np.array([0.3, -1.2, 0.8])
    net.params["out.w"] = nm.param(np.zeros_like(net.params["out.w"].value))
    net.params["out.b"] = nm.param(h_t)
    v = I.IlmVariant("mini-lstm", net)
    state, dist = I.ilm_init(v, m)
    pst, g = M.predict_step(m, None, M.START)
    for a in (1, 0, 2):
        full = np.exp(nm.log_softmax_np(M.joint_logits(m, g, h_t)))
        np.testing.assert_allclose(np.exp(dist), full[:3] / full[:3].sum(), rtol=1e-12)
        state, dist = I.ilm_step(v, m, state, a)
        pst, g = M.predict_step(m, pst, a)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 2), max_size=6), st.integers(0, 50))
def test_every_step_is_normalized(history, seed):
    m = tiny_rnnt(scale=10, seed=seed % 5)
    H = np.random.default_rng(seed).normal(size=(3, 3)) * 4
    for v in all_variants(m, seed).values():
        state, dist = I.ilm_init(v, m, H)
        for a in history:
            assert abs(np.exp(dist).sum() - 1) < 1e-12
            state, dist = I.ilm_step(v, m, state, a)
        assert abs(np.exp(dist).sum() - 1) < 1e-12 and dist.shape == (3,)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 2), max_size=5), st.integers(0, 50))
def test_zero_variant_is_renormalized_joint_at_zero(history, seed):
    m = tiny_rnnt(scale=8, seed=seed % 7)
    v = I.IlmVariant("zero")
    state, dist = I.ilm_init(v, m)
    pst, g = M.predict_step(m, None, M.START)
    for a in list(history) + [None]:
        full = np.exp(nm.log_softmax_np(M.joint_logits(m, g, np.zeros(3))))
        np.testing.assert_allclose(np.exp(dist), full[:3] / (1 - full[3]), rtol=0, atol=1e-12)
        if a is None:
            break
        state, dist = I.ilm_step(v, m, state, a)
        pst, g = M.predict_step(m, pst, a)


def test_zero_and_avg_agree_on_zero_encoder():
    m = tiny_rnnt(scale=6)
    for k in [k for k in m.params if k.startswith("enc.")]:
        m.params[k] = nm.param(np.zeros_like(m.params[k].value))
    H = M.encode(m, np.random.default_rng(0).normal(size=(4, 2)))
    seq = [2, 0, 1, 1]
    assert (I.ilm_sequence_logprob(I.IlmVariant("zero"), m, seq)
            == I.ilm_sequence_logprob(I.IlmVariant("avg"), m, seq, H))


def test_density_ratio_ignores_features():
    m = tiny_rnnt()
    v = all_variants(m)["density-ratio"]
    seq = [1, 2, 0]
    assert I.ilm_sequence_logprob(v, m, seq) == I.ilm_sequence_logprob(v, m, seq, np.ones((5, 3)))


def test_sequence_logprob_uniform():
    m = zeroed(tiny_rnnt(vocab_size=2))
    assert I.ilm_sequence_logprob(I.IlmVariant("zero"), m, [0, 1, 1, 0]) == pytest.approx(-4 * math.log(2),
                                                                                           abs=1e-14)


def test_sequence_logprob_is_sum_of_steps():
    m = tiny_rnnt(scale=5)
    v = all_variants(m)["mini-lstm"]
    seq = [2, 2, 0, 1]
    state, dist = I.ilm_init(v, m)
    total = 0.0
    for a in seq:
        total += dist[a]
        state, dist = I.ilm_step(v, m, state, a)
    assert I.ilm_sequence_logprob(v, m, seq) == pytest.approx(total, abs=1e-13)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def skewed_sentences(n, seed, v=3):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        s = [int(rng.integers(v))]
        for _ in range(int(rng.integers(2, 6))):
            s.append((s[-1] + 1) % v if rng.random() < 0.9 else int(rng.integers(v)))
        out.append(tuple(s))
    return out


def test_density_ratio_lm_learns_repeated_sequence():
    seq = (0, 2, 1)
    lm, curve = I.train_density_ratio_lm([seq] * 16, M.RecurrentLmConfig(3, 4, 6),
                                         TrainConfig(lr=0.5, epochs=100, batch_size=8), seed=0)
    st_, dist = M.lm_step(lm, None, M.START)
    for a in seq:
        assert math.exp(dist[a]) > 0.95
        st_, dist = M.lm_step(lm, st_, a)
    # training NLL never regresses by more than 5% between epochs
    assert all(b <= a * 1.05 for a, b in zip(curve.train_loss, curve.train_loss[1:]))


def test_density_ratio_lm_heldout_perplexity_and_determinism():
    from rnnt_ilm.training import recurrent_lm_perplexity
    train, held = skewed_sentences(60, 1), skewed_sentences(30, 2)
    cfg = TrainConfig(lr=1.0, epochs=20, batch_size=8)
    lm, _ = I.train_density_ratio_lm(train, M.RecurrentLmConfig(3, 4, 8), cfg, seed=3)
    again, _ = I.train_density_ratio_lm(train, M.RecurrentLmConfig(3, 4, 8), cfg, seed=3)
    assert recurrent_lm_perplexity(lm, held) < 4
    assert all(np.array_equal(lm.params[k].value, again.params[k].value) for k in lm.params)
    with pytest.raises(ValueError):
        I.train_density_ratio_lm([], M.RecurrentLmConfig(3), cfg, seed=0)


def test_mini_ilm_training_freezes_transducer_and_lowers_loss():
    m = tiny_rnnt(scale=4)
    before = {k: p.value.copy() for k, p in m.params.items()}
    sents = skewed_sentences(40, 4)
    cfg = M.MiniIlmConfig(3, 3, embed_dim=4, units=6)
    net, curve = I.train_mini_ilm(m, sents, "plain", config=cfg,
                                  train_cfg=TrainConfig(lr=0.5, epochs=30, batch_size=4), seed=0)
    assert all(np.array_equal(before[k], m.params[k].value) for k in before)
    assert curve.train_loss[-1] < curve.train_loss[0]
    held = skewed_sentences(30, 5)
    assert I.ilm_perplexity(I.IlmVariant("mini-lstm", net), m, held) < 3


def _utts(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for i, s in enumerate(skewed_sentences(n, seed)):
        out.append(Utterance(f"u{i}", s, rng.normal(size=(len(s) + 1, 2))))
    return out


def test_exact_with_zero_alpha_follows_plain_trajectory():
    m = tiny_rnnt(scale=3)
    utts = _utts(12, 6)
    frames = {u.id: list(range(len(u.labels))) for u in utts}
    cfg = M.MiniIlmConfig(3, 3, embed_dim=2, units=3)
    tc = TrainConfig(lr=0.5, epochs=3, batch_size=4)
    plain, c1 = I.train_mini_ilm(m, utts, "plain", config=cfg, train_cfg=tc, seed=2)
    exact, c2 = I.train_mini_ilm(m, utts, "exact", alpha=0.0, alignments=frames, config=cfg, train_cfg=tc, seed=2)
    assert c1.train_loss == c2.train_loss
    assert all(np.array_equal(plain.params[k].value, exact.params[k].value) for k in plain.params)


def test_exact_requires_alignments():
    m = tiny_rnnt()
    utts = _utts(3, 0)
    with pytest.raises(I.MissingAlignmentError):
        I.train_mini_ilm(m, utts, "exact")
    with pytest.raises(I.MissingAlignmentError):
        I.train_mini_ilm(m, utts, "exact", alignments={utts[0].id: [0] * len(utts[0].labels)})
    with pytest.raises(ValueError):
        I.train_mini_ilm(m, utts, "mse")
