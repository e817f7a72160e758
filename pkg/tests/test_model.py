import numpy as np
import pytest

from phrase_transformer import tensor as T
from phrase_transformer.model import (
    ABLATIONS,
    AttentiveCombination,
    EncoderLayer,
    ModelConfig,
    PRTransformer,
    attentive_combination,
    count_parameters,
    score_sequence,
    shift_right,
)
from phrase_transformer.nn import AttentionMask, Linear
from phrase_transformer.segmentation import PhrasePlan, batch_plans, segment_ngram
from phrase_transformer.training import label_smoothed_loss

from conftest import numeric_grad, random_batch, rel_error, tiny_config, tiny_model
from reference_transformer import reference_logits, reference_phrase_logits


def logits_of(model, src, tgt, plan=None):
    with T.no_grad():
        return model(src, shift_right(tgt), plan).data


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ValueError, match="divisible"):
            tiny_config(d_model=10, n_heads=4).validate()

    def test_every_problem_listed(self):
        errs = tiny_config(d_model=10, n_heads=4, glance="min", dropout=1.5).errors()
        assert len(errs) == 3

    def test_dict_round_trip(self):
        cfg = tiny_config(glance="mean")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            ModelConfig.from_dict({**tiny_config().to_dict(), "colour": 1})

    def test_base_head_width(self):
        assert ModelConfig(100, 100).d_k == 64


class TestAblation:
    @pytest.mark.parametrize("tie", [True, False])
    def test_flags_off_equals_reference_transformer(self, tie, rng):
        model = tiny_model(seed=3, phrase_representation=False, tie_target_classifier=tie)
        src, tgt = random_batch(rng)
        tin = shift_right(tgt)
        with T.no_grad():
            ours = model(src, tin).data
        assert np.array_equal(ours, reference_logits(model.state_dict(), model.config, src, tin))

    @pytest.mark.parametrize("row", sorted(ABLATIONS))
    def test_rows_are_config_toggles(self, row, rng):
        model = tiny_model(seed=1, **ABLATIONS[row])
        src, tgt = random_batch(rng)
        out = logits_of(model, src, tgt)
        assert out.shape == (3, 7, 20) and np.all(np.isfinite(out))
        names = {n.split(".")[0] for n, _ in model.named_parameters()}
        assert ("scorers" in names) == (row in ("+max+attn", "+max+attn+ta"))
        assert ("transparent" in names) == (row == "+max+attn+ta")

    def test_rows_share_baseline_tensors(self):
        # Every row carries the baseline parameter names with the same shapes.
        base = dict(tiny_model(**ABLATIONS["base"]).named_parameters())
        for row, kw in ABLATIONS.items():
            other = dict(tiny_model(**kw).named_parameters())
            for name, p in base.items():
                assert other[name].shape == p.shape, (row, name)


class TestOracle:
    @pytest.mark.parametrize(
        "kw",
        [{}, dict(transparent_attention=False), dict(phrase_attention=False, glance="mean"), dict(ta_levels="inputs"), dict(tie_target_classifier=False)],
        ids=["full", "no-ta", "mean-pool", "inputs-levels", "untied"],
    )
    def test_full_model_matches_loop_oracle(self, kw, rng):
        model = tiny_model(seed=2, **kw).astype(np.float64)
        if model.transparent is not None:
            model.transparent.logits.data = rng.normal(size=model.transparent.logits.shape)
        src = rng.integers(4, 20, size=13)
        tin = np.concatenate([[1], rng.integers(4, 20, size=6)])
        with T.no_grad():
            ours = model(src[None], tin[None]).data[0]
        ref = reference_phrase_logits(model.state_dict(), model.config, src, tin, segment_ngram(13).phrases())
        np.testing.assert_allclose(ours, ref, rtol=1e-10, atol=1e-12)

    def test_tree_plan_matches_oracle(self, rng):
        model = tiny_model(seed=4, segmentation="tree").astype(np.float64)
        phrases = [[0, 1], [2, 3, 4], [5], [6, 7]]
        src = rng.integers(4, 20, size=8)
        tin = np.array([1, 5, 6, 7])
        with T.no_grad():
            ours = model(src[None], tin[None], batch_plans([PhrasePlan.from_phrases(phrases)])).data[0]
        ref = reference_phrase_logits(model.state_dict(), model.config, src, tin, phrases)
        np.testing.assert_allclose(ours, ref, rtol=1e-10, atol=1e-12)


class TestCombiner:
    def _combiner(self, d=8, seed=0):
        with T.precision(np.float64):
            return AttentiveCombination(d, 2, np.random.default_rng(seed))

    def test_zero_output_path_is_layer_norm(self, rng):
        c = self._combiner()
        c.w4.weight.data[:] = 0
        c.w4.bias.data[:] = 0
        x = T.Tensor(rng.normal(size=(2, 5, 8)))
        ph = T.Tensor(rng.normal(size=(2, 3, 8)))
        out = c(x, ph, AttentionMask.none()).data
        assert np.array_equal(out, c.norm(x).data)

    def test_single_phrase_attends_to_it(self, rng):
        c = self._combiner()
        x = T.Tensor(rng.normal(size=(1, 4, 8)))
        ph = T.Tensor(rng.normal(size=(1, 1, 8)))
        out_phrase = c.mha(x, ph, ph).data
        expected = c.mha.w_o(c.mha.w_v(ph)).data
        np.testing.assert_allclose(out_phrase, np.broadcast_to(expected, out_phrase.shape), rtol=1e-12)

    def test_zero_phrases_rejected(self):
        c = self._combiner()
        with pytest.raises(ValueError, match="phrase"):
            attentive_combination(T.Tensor(np.ones((1, 2, 8))), T.Tensor(np.ones((1, 0, 8))), AttentionMask.none(), c)

    def test_concatenation_width(self):
        assert self._combiner(d=8).w3.weight.shape == (16, 8)

    def test_encoder_layer_keeps_shape(self, rng):
        for pr in (True, False):
            layer = EncoderLayer(tiny_config(phrase_representation=pr), np.random.default_rng(0))
            x = T.Tensor(rng.normal(size=(2, 6, 16)).astype(np.float32))
            mask = AttentionMask.padding(np.ones((2, 6), dtype=bool))
            ph = T.Tensor(rng.normal(size=(2, 2, 16)).astype(np.float32)) if pr else None
            assert layer(x, mask, ph, AttentionMask.padding(np.ones((2, 2), dtype=bool)) if pr else None).shape == (2, 6, 16)


class TestForward:
    def test_encode_shapes(self, rng):
        model = tiny_model()
        src, _ = random_batch(rng, src_len=14)
        state = model.encode(src)
        assert len(state.levels) == 3 and len(state.phrases) == 3
        p = batch_plans([segment_ngram(int(n)) for n in (src != 0).sum(1)]).shape[1]
        assert all(ph.shape == (3, p, 16) for ph in state.phrases)
        assert all(lv.shape == (3, 14, 16) for lv in state.levels)

    def test_encode_without_phrases(self, rng):
        src, _ = random_batch(rng)
        assert tiny_model(phrase_representation=False).encode(src).phrases == []

    def test_deterministic_in_eval(self, rng):
        src, tgt = random_batch(rng)
        a = logits_of(tiny_model(seed=5, dropout=0.3), src, tgt)
        b = logits_of(tiny_model(seed=5, dropout=0.3), src, tgt)
        assert np.array_equal(a, b)

    def test_probabilities_normalized(self, rng):
        src, tgt = random_batch(rng)
        with T.no_grad():
            lp = T.log_softmax(tiny_model().forward_train(src, tgt)).data
        np.testing.assert_allclose(np.exp(lp).sum(-1), 1.0, atol=1e-5)

    def test_zero_parameters_give_uniform_logits(self, rng):
        model = tiny_model(tie_target_classifier=False)
        for p in model.parameters():
            p.data[:] = 0
        src, tgt = random_batch(rng)
        out = logits_of(model, src, tgt)
        assert np.all(out == out[..., :1])

    def test_causality(self, rng):
        model = tiny_model(seed=6)
        src, tgt = random_batch(rng, pad_tail=False)
        tin = shift_right(tgt)
        with T.no_grad():
            base = model(src, tin).data
            for t in range(tin.shape[1] - 1):
                changed = tin.copy()
                changed[:, t + 1 :] = rng.integers(4, 20, size=changed[:, t + 1 :].shape)
                out = model(src, changed).data
                assert np.array_equal(out[:, : t + 1], base[:, : t + 1])

    @pytest.mark.parametrize("pr", [True, False])
    def test_source_padding_invariance(self, pr, rng):
        model = tiny_model(seed=7, phrase_representation=pr)
        src = rng.integers(4, 20, size=(1, 10))
        tgt = rng.integers(4, 20, size=(1, 6))
        padded = np.concatenate([src, np.zeros((1, 5), dtype=src.dtype)], axis=1)
        np.testing.assert_allclose(logits_of(model, src, tgt), logits_of(model, padded, tgt), atol=1e-5)

    def test_target_padding_invariance(self, rng):
        model = tiny_model(seed=8)
        src = rng.integers(4, 20, size=(1, 10))
        tgt = rng.integers(4, 20, size=(1, 6))
        padded = np.concatenate([tgt, np.zeros((1, 3), dtype=tgt.dtype)], axis=1)
        np.testing.assert_allclose(logits_of(model, src, tgt), logits_of(model, src, padded)[:, :6], atol=1e-5)

    def test_batch_rows_independent(self, rng):
        model = tiny_model(seed=9)
        src, tgt = random_batch(rng, batch=4)
        full = logits_of(model, src, tgt)
        one = logits_of(model, src[2:3], tgt[2:3])
        n_src, n_tgt = (src[2] != 0).sum(), (tgt[2] != 0).sum()
        solo = logits_of(model, src[2:3, :n_src], tgt[2:3, :n_tgt])
        np.testing.assert_allclose(full[2:3], one, atol=1e-5)
        np.testing.assert_allclose(full[2, :n_tgt], solo[0], atol=1e-5)

    def test_small_model_gradient(self, rng):
        cfg = tiny_config(d_model=8, d_ffn=8, enc_layers=1, dec_layers=1, src_vocab=8, tgt_vocab=8)
        with T.precision(np.float64):
            model = PRTransformer(cfg, seed=0).astype(np.float64).eval()
        model.transparent.logits.data = rng.normal(size=model.transparent.logits.shape)
        src = np.array([[4, 5, 6, 7, 5, 4, 6], [5, 6, 7, 4, 0, 0, 0]])
        tgt = np.array([[4, 6, 2], [7, 2, 0]])

        def loss():
            return label_smoothed_loss(model.forward_train(src, tgt), tgt, 0.1)

        with T.precision(np.float64):
            model.zero_grad()
            loss().backward()
            worst = 0.0
            for name, p in model.named_parameters():
                num = numeric_grad(lambda: float(loss().data), p.data, h=1e-4)
                worst = max(worst, rel_error(p.grad, num))
        assert worst < 1e-4


class TestScoring:
    def test_one_token_is_log_softmax_entry(self, rng):
        model = tiny_model(seed=10)
        src = rng.integers(4, 20, size=9)
        with T.no_grad():
            lp = T.log_softmax(model(src[None], np.array([[1]]))).data[0, 0]
        assert score_sequence(model, src, [7]) == pytest.approx(float(lp[7]), abs=1e-6)

    def test_appending_lowers_score(self, rng):
        model = tiny_model(seed=11)
        src = rng.integers(4, 20, size=9)
        tgt = list(rng.integers(4, 20, size=4))
        prev = score_sequence(model, src, tgt)
        for tok in (5, 2, 19):
            cur = score_sequence(model, src, tgt + [tok])
            assert cur < prev

    def test_two_paths_agree(self, rng):
        model = tiny_model(seed=12)
        src, tgt = random_batch(rng, batch=3)
        with T.no_grad():
            lp = T.log_softmax(model.forward_train(src, tgt)).data.astype(np.float64)
        for i in range(3):
            n_src, n_tgt = (src[i] != 0).sum(), (tgt[i] != 0).sum()
            gathered = lp[i, np.arange(n_tgt), tgt[i, :n_tgt]].sum()
            direct = score_sequence(model, src[i, :n_src], tgt[i, :n_tgt])
            assert abs(direct - gathered) <= 1e-6 * max(1.0, abs(gathered)) * 10

    def test_empty_target_rejected(self):
        with pytest.raises(ValueError):
            score_sequence(tiny_model(), [4, 5], [])


class TestParameterCount:
    def test_linear(self):
        lin = Linear(7, 7, np.random.default_rng(0))
        assert sum(p.size for p in lin.parameters()) == 7 * 7 + 7

    def test_transparent_logits_six_by_six(self):
        model = PRTransformer(ModelConfig(10, 10, d_model=8, d_ffn=8, n_heads=2), seed=0)
        assert count_parameters(model)["transparent"] == 42

    def test_tied_classifier_adds_nothing(self):
        tied = count_parameters(tiny_model(tie_target_classifier=True))
        untied = count_parameters(tiny_model(tie_target_classifier=False))
        assert "classifier" not in tied
        assert untied["total"] - tied["total"] == untied["classifier"] == 16 * 20

    def test_groups_sum_to_total(self):
        counts = count_parameters(tiny_model())
        assert sum(v for k, v in counts.items() if k != "total") == counts["total"]
        assert counts["total"] == sum(p.size for p in tiny_model().parameters())

    def test_embeddings_not_shared(self):
        model = tiny_model()
        assert model.src_embed.weight is not model.tgt_embed.weight
