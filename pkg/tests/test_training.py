import json
import math

import numpy as np
import pytest

from umst import tensor as T
from umst.data import ToyTaskSpec, generate_toy_corpus, to_examples, vocabs_from
from umst.model import PAD, ModelConfig, Seq2Seq
from umst.structure import build_word_adjacency
from umst.tensor import Parameter, Tensor
from umst.training import (ABLATION_VARIANTS, TrainConfig, TrainingDiverged, ablation_tsv,
                           adam_step, clip_grad_norm, eval_accuracy, label_smoothed_ce,
                           lr_schedule, run_ablation_suite, train_loop)
from umst.verify import check_structure_sample


def small_corpus(n_train=40, n_valid=10, **kw):
    spec = ToyTaskSpec(n_word_types=10, sub_vocab_size=8, max_words=4, n_train=n_train,
                       n_valid=n_valid, **kw)
    corpus = generate_toy_corpus(spec)
    sv, tv = vocabs_from(corpus["train"] + corpus["valid"])
    return (to_examples(corpus["train"], sv, tv), to_examples(corpus["valid"], sv, tv), sv, tv)


def small_model(sv, tv, **kw):
    base = dict(src_vocab_size=len(sv), tgt_vocab_size=len(tv), d_model=16, n_heads=2, d_ffn=32,
                n_enc_layers=1, n_dec_layers=1, dropout=0.0)
    base.update(kw)
    return Seq2Seq(ModelConfig(**base))


class TestToyCorpus:
    def test_deterministic(self):
        a = generate_toy_corpus(ToyTaskSpec(n_train=20, n_valid=5))
        b = generate_toy_corpus(ToyTaskSpec(n_train=20, n_valid=5))
        assert a == b

    def test_single_piece_words(self):
        corpus = generate_toy_corpus(ToyTaskSpec(max_pieces=1, sub_vocab_size=40, n_train=30, n_valid=0))
        for s in corpus["train"]:
            assert not any(s.seg.class_flag)
            assert not build_word_adjacency(s.seg).any()

    def test_structures_valid(self):
        corpus = generate_toy_corpus(ToyTaskSpec(n_train=100, n_valid=0))
        for s in corpus["train"]:
            assert check_structure_sample(s.seg, s.dep) == []
            assert len(s.target) == s.seg.L_words

    def test_decompositions_are_consistent(self):
        corpus = generate_toy_corpus(ToyTaskSpec(n_train=200, n_valid=0))
        seen = {}
        for s in corpus["train"]:
            for w, target in enumerate(s.target):
                pieces = tuple(t for t, i in zip(s.seg.tokens, s.seg.word_index) if i == w)
                assert seen.setdefault(target, pieces) == pieces

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            generate_toy_corpus(ToyTaskSpec(n_word_types=10, sub_vocab_size=2, max_pieces=1))
        with pytest.raises(ValueError):
            generate_toy_corpus(ToyTaskSpec(dependency="star"))


class TestLoss:
    def test_zero_smoothing_is_nll(self):
        logits = np.random.default_rng(0).normal(size=(6, 5))
        tgt = np.array([1, 2, 3, 4, 1, 2])
        lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        want = -lp[np.arange(6), tgt].mean()
        assert abs(float(label_smoothed_ce(Tensor(logits), tgt, 0.0).data) - want) <= 1e-12

    @pytest.mark.parametrize("s", [0.0, 0.1, 0.5])
    def test_uniform_logits_give_log_v(self, s):
        loss = label_smoothed_ce(Tensor(np.zeros((3, 7))), [1, 4, 6], s)
        assert abs(float(loss.data) - math.log(7)) <= 1e-12

    def test_smoothed_closed_form(self):
        logits = np.array([[math.log(3), 0.0, 0.0]])
        lp = np.log([0.6, 0.2, 0.2])
        want = -(0.9 * lp[0] + 0.05 * lp[1] + 0.05 * lp[2])
        assert abs(float(label_smoothed_ce(Tensor(logits), [0], 0.1, pad_id=None).data) - want) <= 1e-12

    def test_pad_rows_ignored(self):
        logits = np.random.default_rng(1).normal(size=(3, 4))
        full = float(label_smoothed_ce(Tensor(logits[:2]), [1, 2], 0.1).data)
        padded = float(label_smoothed_ce(Tensor(logits), [1, 2, PAD], 0.1).data)
        assert abs(full - padded) <= 1e-12

    def test_all_pad(self):
        with pytest.raises(ValueError):
            label_smoothed_ce(Tensor(np.zeros((2, 4))), [PAD, PAD])

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            label_smoothed_ce(Tensor(np.zeros((1, 4))), [4])

    def test_gradient(self):
        p = Parameter("z", Tensor(np.random.default_rng(2).normal(size=(4, 6))))
        rep = T.finite_diff_check(lambda: label_smoothed_ce(p.value, [1, 5, 0, 3], 0.1), [p])
        assert rep.passed, rep.max_rel_error


class TestSchedule:
    def test_peak_at_warmup(self):
        assert lr_schedule(400, 3e-4, 400) == 3e-4

    def test_half_warmup(self):
        assert lr_schedule(200, 3e-4, 400) == pytest.approx(1.5e-4, rel=1e-15)

    def test_four_warmups(self):
        assert lr_schedule(1600, 3e-4, 400) == pytest.approx(1.5e-4, rel=1e-15)

    def test_shape(self):
        lrs = [lr_schedule(s, 1.0, 50) for s in range(1, 500)]
        assert all(a < b for a, b in zip(lrs[:49], lrs[1:50]))
        assert all(a > b for a, b in zip(lrs[49:], lrs[50:]))

    def test_step_zero(self):
        with pytest.raises(ValueError):
            lr_schedule(0, 1.0, 10)


class TestAdam:
    def test_hand_step(self):
        p = Parameter("t", Tensor(np.zeros(1)))
        p.value.grad = np.ones(1)
        adam_step([p], 0.1)
        assert p.data[0] == pytest.approx(-0.1, abs=1e-8)

    def test_zero_gradient(self):
        p = Parameter("t", Tensor(np.array([0.5, -2.0])))
        p.value.grad = np.zeros(2)
        adam_step([p], 0.1)
        assert p.data.tolist() == [0.5, -2.0]

    def test_deterministic_trajectory(self):
        def run():
            p = Parameter("t", Tensor(np.array([1.0, -1.0])))
            for step in range(1, 20):
                p.value.grad = 2 * p.data
                adam_step([p], lr_schedule(step, 0.1, 5))
            return p.data.copy()
        assert np.array_equal(run(), run())

    def test_frozen_parameter(self):
        p = Parameter("t", Tensor(np.ones(1)), trainable=False)
        p.value.grad = np.ones(1)
        adam_step([p], 0.1)
        assert p.data[0] == 1.0

    def test_clip(self):
        p = Parameter("t", Tensor(np.zeros(2)))
        p.value.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([p], 1.0) == 5.0
        assert np.allclose(p.grad, [0.6, 0.8])


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(warmup_steps=0), dict(label_smoothing=1.0),
                                     dict(batch_size=0), dict(word_adjacency="none")])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_toy_preset(self):
        cfg = TrainConfig.toy()
        assert (cfg.beta1, cfg.beta2, cfg.label_smoothing) == (0.9, 0.997, 0.1)
        assert (cfg.peak_lr, cfg.warmup_steps) == (1.5e-3, 400)
        assert TrainConfig().peak_lr == 2e-3 and TrainConfig().warmup_steps == 16000


class TestTrainLoop:
    def test_zero_lr_leaves_parameters(self):
        train, _, sv, tv = small_corpus()
        m = small_model(sv, tv)
        before = {n: p.data.copy() for n, p in m.named_parameters().items()}
        train_loop(m, train, TrainConfig.toy(peak_lr=0.0, max_steps=5, batch_size=4))
        assert all(np.array_equal(before[n], p.data) for n, p in m.named_parameters().items())

    def test_memorizes_single_sentence(self):
        train, _, sv, tv = small_corpus(n_train=1, n_valid=1)
        m = small_model(sv, tv)
        res = train_loop(m, train, TrainConfig.toy(peak_lr=3e-3, warmup_steps=20, max_steps=150,
                                                   label_smoothing=0.0, log_interval=10))
        assert res.metrics[-1]["loss"] <= 0.05
        assert m.greedy_decode(train, 10)[0] == train[0].tgt_ids.tolist()

    def test_reproducible_logs_and_checkpoints(self, tmp_path):
        train, valid, sv, tv = small_corpus()
        cfg = TrainConfig.toy(max_steps=12, batch_size=8, log_interval=4, eval_interval=6)
        for run in ("a", "b"):
            train_loop(small_model(sv, tv, dropout=0.1), train, cfg, valid, tmp_path / run)
        for name in ("metrics.jsonl", "best.ckpt", "last.ckpt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        recs = [json.loads(line) for line in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
        assert [r["step"] for r in recs] == [4, 6, 8, 12]
        assert {"step", "loss", "lr", "acc"} <= set(recs[0]) and "valid_acc" in recs[1]
        assert all(math.isfinite(r.get("loss", 0.0)) for r in recs)

    def test_divergence_names_step(self):
        train, _, sv, tv = small_corpus()
        m = small_model(sv, tv)
        m.tgt_embed.value.data[0, 0] = np.nan
        with pytest.raises(TrainingDiverged) as info:
            train_loop(m, train, TrainConfig.toy(max_steps=3, batch_size=4))
        assert info.value.step == 1 and "step 1" in str(info.value)

    def test_empty_dataset(self):
        _, _, sv, tv = small_corpus()
        with pytest.raises(ValueError):
            train_loop(small_model(sv, tv), [], TrainConfig.toy())

    def test_early_stop(self):
        train, _, sv, tv = small_corpus(n_train=1, n_valid=1)
        res = train_loop(small_model(sv, tv), train,
                         TrainConfig.toy(peak_lr=3e-3, warmup_steps=20, max_steps=400,
                                         eval_interval=10, target_accuracy=1.0),
                         valid=train)
        assert res.steps < 400 and res.best_valid_acc == 1.0


class TestEvalAccuracy:
    def test_oracle_decoder(self):
        _, valid, sv, tv = small_corpus()
        tok, seq = eval_accuracy(None, valid, decode=lambda e: e.tgt_ids.tolist())
        assert (tok, seq) == (1.0, 1.0)

    def test_partial_credit(self):
        _, valid, _, _ = small_corpus()
        ex = valid[:1]
        ref = ex[0].tgt_ids.tolist()
        tok, seq = eval_accuracy(None, ex, decode=lambda e: ref[:-1])
        assert tok == pytest.approx((len(ref) - 1) / len(ref)) and seq == 0.0

    def test_untrained_is_near_chance(self):
        spec = ToyTaskSpec(n_word_types=50, n_train=10, n_valid=100)
        corpus = generate_toy_corpus(spec)
        sv, tv = vocabs_from(corpus["train"] + corpus["valid"])
        m = small_model(sv, tv)
        tok, _ = eval_accuracy(m, to_examples(corpus["valid"], sv, tv))
        assert tok < 0.1

    def test_empty(self):
        with pytest.raises(ValueError):
            eval_accuracy(None, [])


class TestAblation:
    def test_variant_names_cover_table_rows(self):
        for row in ("w/o class-embedding", "w/o intra-group interactions",
                    "w/o inter-group interactions", "replace GCN with pooling"):
            assert row in ABLATION_VARIANTS

    def test_suite_runs_and_records_failures(self):
        train, valid, sv, tv = small_corpus(n_train=8, n_valid=4)
        base = small_model(sv, tv).cfg
        cfg = TrainConfig.toy(max_steps=2, batch_size=4)
        names = ["Transformer", "UMST", "replace GCN with pooling", "shared Q, K in RSAN"]
        rows = run_ablation_suite(base, cfg, train, valid, names)
        assert [r.variant for r in rows] == names and all(r.status == "ok" for r in rows)
        counts = {r.variant: r.params for r in rows}
        assert counts["Transformer"] < counts["shared Q, K in RSAN"] < counts["UMST"]
        assert counts["replace GCN with pooling"] < counts["UMST"]
        again = run_ablation_suite(base, cfg, train, valid, names)
        assert ablation_tsv(rows) == ablation_tsv(again)
        assert ablation_tsv(rows).splitlines()[0].split("\t")[0] == "variant"

    def test_failure_recorded(self):
        train, valid, sv, tv = small_corpus(n_train=8, n_valid=4)
        base = small_model(sv, tv).cfg
        rows = run_ablation_suite(base, TrainConfig.toy(max_steps=1, batch_size=4), train,
                                  [], ["UMST"])
        assert rows[0].status.startswith("failed")
