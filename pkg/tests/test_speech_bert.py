import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ziqe.nn import MaskMode, Tensor
from ziqe.nn import tensor as T
from ziqe.pretrain import masked_token_accuracy, masking_seed, pretrain
from ziqe.speech_bert import (MASKED, SUBSTITUTED, UNCHANGED, ModelConfig, SpeechBert, apply_masking,
                              pad_tokens)
from ziqe.tokens import SPECIALS

TINY = ModelConfig(vocab_size=11, feature_dim=6, d_model=8, heads=2, encoder_layers=1, memory_layers=1,
                   feedforward_dim=12, max_seq_len=32)


def tiny_model(seed=0, cfg=TINY):
    return SpeechBert(cfg, seed=seed, dtype=np.float64)


def feats(rng, frames, dim=TINY.feature_dim):
    return rng.normal(size=(frames, dim))


# -- numpy oracle, written independently of the autodiff engine ----------------------
def _np_dense(p, name, x):
    return x @ p[f"{name}/w"] + p[f"{name}/b"]


def _np_ln(p, name, x):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * p[f"{name}/gamma"] + p[f"{name}/beta"]


def _np_pe(n, d):
    pe = np.zeros((n, d))
    for pos in range(n):
        for i in range(0, d, 2):
            pe[pos, i] = math.sin(pos / 10000 ** (i / d))
            if i + 1 < d:
                pe[pos, i + 1] = math.cos(pos / 10000 ** (i / d))
    return pe


def _np_attention(p, name, q_in, kv, heads, causal):
    d = q_in.shape[-1]
    dk = d // heads
    q, k, v = _np_dense(p, f"{name}/q", q_in), _np_dense(p, f"{name}/k", kv), _np_dense(p, f"{name}/v", kv)
    out = np.zeros_like(q)
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(d / heads)
        if causal:
            s = s + np.triu(np.full(s.shape, -1e9), 1)
        w = np.exp(s - s.max(-1, keepdims=True))
        w /= w.sum(-1, keepdims=True)
        out[:, sl] = w @ v[:, sl]
    return _np_dense(p, f"{name}/o", out)


def _np_ffn(p, name, x):
    return _np_dense(p, f"{name}/out", np.maximum(_np_dense(p, f"{name}/in", x), 0.0))


def np_speech(p, cfg, x):
    h = _np_dense(p, "speech/in", x) + _np_pe(len(x), cfg.d_model)
    for i in range(cfg.encoder_layers):
        pre = f"speech/layer{i}"
        h = _np_ln(p, f"{pre}/ln1", h + _np_attention(p, f"{pre}/att", h, h, cfg.heads, False))
        h = _np_ln(p, f"{pre}/ln2", h + _np_ffn(p, f"{pre}/ffn", h))
    return h


def np_text(p, cfg, ids, memory, causal):
    h = p["text/embed"][ids] + _np_pe(len(ids), cfg.d_model)
    for i in range(cfg.memory_layers):
        pre = f"text/layer{i}"
        h = _np_ln(p, f"{pre}/ln1", h + _np_attention(p, f"{pre}/self", h, h, cfg.heads, causal))
        h = _np_ln(p, f"{pre}/ln2", h + _np_attention(p, f"{pre}/cross", h, memory, cfg.heads, False))
        h = _np_ln(p, f"{pre}/ln3", h + _np_ffn(p, f"{pre}/ffn", h))
    return h


def _log_softmax(z):
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


# -- masking ------------------------------------------------------------------------
class TestMasking:
    def test_everything_masked(self):
        tokens = [4, 5, 6, 7, 8]
        out = apply_masking(tokens, 1, 11, target_prob=1.0, mask_prob=1.0, substitute_prob=0.0)
        assert out.corrupted_tokens == [SPECIALS.mask_id] * 5
        assert out.target_labels == tokens
        assert out.target_positions == [0, 1, 2, 3, 4]

    @pytest.mark.parametrize("seed", range(20))
    def test_length_one_always_has_target(self, seed):
        out = apply_masking([7], seed, 11)
        assert out.target_positions == [0]

    def test_empty_and_special_inputs(self):
        with pytest.raises(ValueError):
            apply_masking([], 0, 11)
        with pytest.raises(ValueError):
            apply_masking([4, SPECIALS.mask_id], 0, 11)

    def test_deterministic(self):
        assert apply_masking(list(range(4, 40)), 99, 50) == apply_masking(list(range(4, 40)), 99, 50)

    @settings(max_examples=200)
    @given(st.lists(st.integers(4, 49), min_size=1, max_size=40), st.integers(0, 2**40))
    def test_outcome_consistency(self, tokens, seed):
        out = apply_masking(tokens, seed, 50)
        assert out.target_positions and out.target_positions == sorted(set(out.target_positions))
        assert out.target_labels == [tokens[i] for i in out.target_positions]
        targets = set(out.target_positions)
        for i, (orig, new) in enumerate(zip(tokens, out.corrupted_tokens)):
            if i not in targets:
                assert new == orig
        for pos, kind in zip(out.target_positions, out.outcome_kind):
            new = out.corrupted_tokens[pos]
            if kind == MASKED:
                assert new == SPECIALS.mask_id
            elif kind == SUBSTITUTED:
                assert 4 <= new < 50
            else:
                assert kind == UNCHANGED and new == tokens[pos]

    def test_target_fraction(self):
        gen = np.random.default_rng(3)
        selected = total = 0
        for k in range(2000):
            out = apply_masking(gen.integers(4, 50, size=100), k, 50)
            selected += len(out.target_positions)
            total += 100
        assert 0.145 <= selected / total <= 0.155


# -- encoders ----------------------------------------------------------------------------
class TestSpeechEncoder:
    def test_matches_numpy_oracle(self, rng):
        model = tiny_model(1)
        x = feats(rng, 5)
        mem, valid = model.speech_encode([x])
        assert valid.all()
        assert np.allclose(mem.data[0], np_speech(model.store.state_dict(), TINY, x), rtol=1e-10, atol=1e-12)

    def test_single_frame(self, rng):
        mem, _ = tiny_model().speech_encode([feats(rng, 1)])
        assert mem.shape == (1, 1, TINY.d_model)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            tiny_model().speech_encode([feats(rng, 3, dim=5)])

    def test_zero_weights_ignore_features(self, rng):
        model = tiny_model()
        for name in model.store.names("speech/"):
            if not name.endswith(("gamma", "beta")):
                model.store[name].data[:] = 0.0
        a, _ = model.speech_encode([feats(rng, 4)])
        b, _ = model.speech_encode([feats(rng, 4)])
        assert np.array_equal(a.data, b.data)

    def test_padding_does_not_leak(self, rng):
        model = tiny_model()
        short, long = feats(rng, 3), feats(rng, 7)
        batch, _ = model.speech_encode([short, long])
        alone, _ = model.speech_encode([short])
        assert np.allclose(batch.data[0, :3], alone.data[0], rtol=1e-12, atol=1e-13)


class TestTextStack:
    @pytest.mark.parametrize("mode", list(MaskMode))
    def test_matches_numpy_oracle(self, rng, mode):
        model = tiny_model(2)
        x = feats(rng, 4)
        ids = np.array([[1, 5, 3, 7, 2]])
        mem, fv = model.speech_encode([x])
        got = model.text_encode(ids, np.ones_like(ids, dtype=bool), mem, fv, mode).data[0]
        p = model.store.state_dict()
        want = np_text(p, TINY, ids[0], np_speech(p, TINY, x), mode is MaskMode.CAUSAL)
        assert np.allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_extract_features_shape_and_determinism(self, rng):
        model = tiny_model()
        x = feats(rng, 6)
        a = model.extract_features(x, [1, 4, 5, 6, 2])
        assert a.shape == (5, TINY.d_model)
        assert np.array_equal(a, model.extract_features(x, [1, 4, 5, 6, 2]))

    def test_every_state_sees_every_token(self, rng):
        model = tiny_model(3)
        x = feats(rng, 5)
        base = model.extract_features(x, [1, 4, 5, 6, 7, 2])
        for j in range(1, 5):
            tokens = [1, 4, 5, 6, 7, 2]
            tokens[j] = 9
            changed = model.extract_features(x, tokens)
            assert np.all(np.any(changed != base, axis=-1))


# -- losses --------------------------------------------------------------------------
def _uniform_logits(model):
    model.store["text/out/w"].data[:] = 0.0
    model.store["text/out/b"].data[:] = 0.0


class TestLosses:
    def test_uniform_model_losses_are_log_vocab(self, rng):
        model = tiny_model()
        _uniform_logits(model)
        x = [feats(rng, 4), feats(rng, 6)]
        tokens = [[4, 5, 6], [7, 8, 9, 10]]
        outcomes = [apply_masking(t, k, TINY.vocab_size) for k, t in enumerate(tokens)]
        assert float(model.masked_lm_loss(x, outcomes).data) == pytest.approx(math.log(11), rel=1e-12)
        assert float(model.asr_loss(x, tokens).data) == pytest.approx(math.log(11), rel=1e-12)

    def test_confident_correct_logits_give_zero_loss(self, rng):
        model = tiny_model()
        _uniform_logits(model)
        model.store["text/out/b"].data[6] = 60.0
        out = apply_masking([6, 6, 6], 0, TINY.vocab_size)
        assert float(model.masked_lm_loss([feats(rng, 3)], [out]).data) < 1e-20

    def test_masked_lm_matches_manual_nll(self, rng):
        model = tiny_model(4)
        x = feats(rng, 5)
        out = apply_masking([4, 8, 5], 0, TINY.vocab_size, target_prob=0.5)
        loss = float(model.masked_lm_loss([x], [out]).data)
        p = model.store.state_dict()
        ids = np.array([1, *out.corrupted_tokens, 2])
        logits = _np_dense(p, "text/out", np_text(p, TINY, ids, np_speech(p, TINY, x), False))
        logp = _log_softmax(logits)
        manual = -np.mean([logp[pos + 1, lab] for pos, lab in zip(out.target_positions, out.target_labels)])
        assert loss == pytest.approx(manual, rel=1e-10)

    def test_asr_matches_stepwise_oracle(self, rng):
        model = tiny_model(5)
        x = feats(rng, 5)
        tokens = [4, 9, 6]
        p = model.store.state_dict()
        mem = np_speech(p, TINY, x)
        nll = []
        for t in range(len(tokens) + 1):
            prefix = np.array([1, *tokens[:t]])
            logits = _np_dense(p, "text/out", np_text(p, TINY, prefix, mem, True))
            target = (tokens + [2])[t]
            nll.append(-_log_softmax(logits[-1])[target])
        assert float(model.asr_loss([x], [tokens]).data) == pytest.approx(np.mean(nll), rel=1e-10)

    def test_asr_is_causal(self, rng):
        model = tiny_model(6)
        x = feats(rng, 5)
        _, a = model.asr_loss([x], [[4, 5, 6, 7]], per_step=True)
        _, b = model.asr_loss([x], [[4, 5, 6, 10]], per_step=True)
        # step t predicts token t from tokens before it; steps 0..2 never see the last token
        assert np.array_equal(a[0, :3], b[0, :3])
        assert not np.array_equal(a[0, 3:], b[0, 3:])

    def test_joint_without_asr_term_is_masked_lm(self, rng):
        model = tiny_model()
        x, tokens = [feats(rng, 4)], [[4, 5, 6]]
        outcomes = [apply_masking(tokens[0], 3, TINY.vocab_size)]
        joint = model.joint_loss(x, tokens, outcomes, lambda_st=0.0)
        assert float(joint.data) == float(model.masked_lm_loss(x, outcomes).data)

    def test_joint_gradient_is_weighted_sum(self, rng):
        model = tiny_model(7)
        x, tokens = [feats(rng, 4), feats(rng, 5)], [[4, 5, 6], [7, 8]]
        outcomes = [apply_masking(t, k, TINY.vocab_size) for k, t in enumerate(tokens)]

        def grads(loss_fn):
            model.store.zero_grad()
            loss_fn().backward()
            return {n: model.store[n].grad.copy() for n in model.store.names()}

        g_joint = grads(lambda: model.joint_loss(x, tokens, outcomes))
        g_mlm = grads(lambda: model.masked_lm_loss(x, outcomes))
        g_asr = grads(lambda: model.asr_loss(x, tokens))
        for n in g_joint:
            assert np.allclose(g_joint[n], g_mlm[n] + 0.15 * g_asr[n], atol=1e-6, rtol=0)

    def test_joint_default_weight(self, rng):
        model = tiny_model()
        x, tokens = [feats(rng, 4)], [[4, 5, 6]]
        outcomes = [apply_masking(tokens[0], 3, TINY.vocab_size)]
        mlm = float(model.masked_lm_loss(x, outcomes).data)
        asr = float(model.asr_loss(x, tokens).data)
        assert float(model.joint_loss(x, tokens, outcomes).data) == pytest.approx(mlm + 0.15 * asr, rel=1e-12)

    def test_no_targets_is_an_error(self, rng):
        out = apply_masking([4, 5], 0, TINY.vocab_size)
        out.target_positions.clear()
        out.target_labels.clear()
        with pytest.raises(ValueError):
            tiny_model().masked_lm_loss([feats(rng, 3)], [out])


class TestWeightTying:
    def test_both_losses_read_shared_weights(self, rng):
        model = tiny_model()
        x, tokens = [feats(rng, 4)], [[4, 5, 6]]
        outcomes = [apply_masking(tokens[0], 3, TINY.vocab_size)]
        before = (float(model.masked_lm_loss(x, outcomes).data), float(model.asr_loss(x, tokens).data))
        model.store["text/layer0/ffn/in/w"].data *= 1.5
        after = (float(model.masked_lm_loss(x, outcomes).data), float(model.asr_loss(x, tokens).data))
        assert before[0] != after[0] and before[1] != after[1]

    def test_same_parameters_touched(self, rng):
        model = tiny_model()
        x, tokens = [feats(rng, 4)], [[4, 5, 6]]
        outcomes = [apply_masking(tokens[0], 3, TINY.vocab_size)]

        def touched(loss_fn):
            model.store.zero_grad()
            loss_fn().backward()
            # the embedding table is sparse; compare which parameters receive any gradient
            return {n for n in model.store.names() if np.any(model.store[n].grad != 0)}

        assert touched(lambda: model.masked_lm_loss(x, outcomes)) == touched(lambda: model.asr_loss(x, tokens))


class TestAttentionDump:
    def test_rows_sum_to_one(self, rng):
        layers = tiny_model().dump_attention(feats(rng, 6), [1, 4, 5, 2])
        assert len(layers) == TINY.memory_layers
        for w in layers:
            assert w.shape == (4, 6)
            assert np.allclose(w.sum(-1), 1.0, atol=1e-5)

    def test_zero_projections_are_uniform(self, rng):
        model = tiny_model()
        for name in model.store.names("text/layer0/cross/"):
            model.store[name].data[:] = 0.0
        w = model.dump_attention(feats(rng, 5), [1, 4, 2])[0]
        assert np.allclose(w, 1 / 5, rtol=1e-14)

    def test_single_head_average_is_identity(self, rng):
        cfg = ModelConfig(vocab_size=11, feature_dim=6, d_model=8, heads=1, encoder_layers=1,
                          memory_layers=1, feedforward_dim=12)
        model = SpeechBert(cfg, seed=1, dtype=np.float64)
        x = feats(rng, 5)
        mem, fv = model.speech_encode([x])
        ids, valid = pad_tokens([[1, 4, 2]], 0)
        _, attn = model.text_encode(ids, valid, mem, fv, MaskMode.FULL, return_attention=True)
        assert np.array_equal(model.dump_attention(x, [1, 4, 2])[0], attn[0][0, 0])


class TestPretraining:
    def test_masking_seed_is_injective_on_small_ranges(self):
        seeds = {masking_seed(s, e, i) for s in range(3) for e in range(5) for i in range(200)}
        assert len(seeds) == 3 * 5 * 200

    def test_short_run_reduces_loss(self, rng):
        from ziqe.data import CorpusConfig, generate_corpus

        corpus = generate_corpus(CorpusConfig(n_utterances=64, vocab_size=11, min_len=3, max_len=6, raw_dim=3,
                                              stack_window=2, frames_per_token=2))
        model = SpeechBert(TINY, seed=0)
        hist = pretrain(model, [s.utterance for s in corpus], epochs=6, batch_size=16, lr=1e-2)
        assert hist[-1]["loss"] < hist[0]["loss"]
        acc, majority = masked_token_accuracy(model, [s.utterance for s in corpus])
        assert 0.0 <= majority <= 1.0 and 0.0 <= acc <= 1.0

    def test_deterministic(self):
        from ziqe.data import CorpusConfig, generate_corpus

        corpus = generate_corpus(CorpusConfig(n_utterances=16, vocab_size=11, min_len=3, max_len=5, raw_dim=3,
                                              stack_window=2, frames_per_token=2))
        states = []
        for _ in range(2):
            model = SpeechBert(TINY, seed=0)
            pretrain(model, [s.utterance for s in corpus], epochs=1, batch_size=8)
            states.append(model.store.state_dict())
        assert all(np.array_equal(states[0][k], states[1][k]) for k in states[0])


def test_config_json_round_trip():
    assert ModelConfig.from_dict(__import__("json").loads(TINY.to_json())) == TINY
