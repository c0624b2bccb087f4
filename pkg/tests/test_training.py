import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_sentences, tiny_model_config
from factored_nmt.bpe import EOS_ID, PAD_ID, Vocabulary
from factored_nmt.factors import FactoredCorpus
from factored_nmt.gradcheck import NumericalError
from factored_nmt.model import Transformer
from factored_nmt.tensor import Tensor
from factored_nmt.training import (
    Adam,
    TrainConfig,
    TrainingError,
    build_vocabularies,
    evaluate_loss,
    label_smoothed_loss,
    lr_at,
    make_batches,
    train,
    write_metrics,
)


def simple_corpus(sentences):
    return FactoredCorpus(words=sentences, factors={})


class TestBatching:
    def test_hand_computed_packing(self):
        sents = [["a"] * 5, ["b"] * 5, ["c"] * 5]
        corpus = simple_corpus(sents)
        vocabs, tgt = build_vocabularies(corpus, sents)
        batches = make_batches(corpus, sents, vocabs, tgt, token_batch=10)
        # two 5-token sentences fill the 10-token budget; the third overflows
        assert [len(b.indices) for b in batches] == [2, 1]

    def test_single_batch_when_budget_large(self):
        sents = [["a", "b"], ["c"], ["d", "e", "f"]]
        corpus = simple_corpus(sents)
        vocabs, tgt = build_vocabularies(corpus, sents)
        batches = make_batches(corpus, sents, vocabs, tgt, token_batch=1000)
        assert len(batches) == 1
        assert batches[0].padded_source_tokens <= 1000

    def test_oversized_sentence_named(self):
        sents = [["a"] * 3, ["b"] * 50]
        corpus = simple_corpus(sents)
        vocabs, tgt = build_vocabularies(corpus, sents)
        with pytest.raises(TrainingError, match="sentence 1"):
            make_batches(corpus, sents, vocabs, tgt, token_batch=10)

    @given(st.lists(st.integers(1, 12), min_size=1, max_size=30), st.integers(12, 40))
    @settings(max_examples=40, deadline=None)
    def test_partition_and_budget_properties(self, lengths, budget):
        sents = [[f"t{j}" for j in range(n)] for n in lengths]
        corpus = simple_corpus(sents)
        vocabs, tgt = build_vocabularies(corpus, sents)
        batches = make_batches(corpus, sents, vocabs, tgt, token_batch=budget)
        seen = sorted(i for b in batches for i in b.indices)
        assert seen == list(range(len(sents)))  # partition: no loss, no dupes
        for b in batches:
            assert b.padded_source_tokens <= budget
            for name, mat in b.src.items():
                assert mat.shape == b.src_pad.shape

    def test_factor_streams_padded_in_lockstep(self):
        sents = [["a", "b"], ["c", "d", "e"]]
        corpus = FactoredCorpus(words=sents, factors={"lemma": [["A", "B"], ["C", "D", "E"]]})
        vocabs, tgt = build_vocabularies(corpus, sents)
        (batch,) = make_batches(corpus, sents, vocabs, tgt, token_batch=100)
        assert batch.src["words"].shape == batch.src["lemma"].shape
        np.testing.assert_array_equal(
            batch.src["words"] == PAD_ID, batch.src["lemma"] == PAD_ID
        )

    def test_targets_shifted_with_bos_eos(self):
        sents = [["a", "b"]]
        corpus = simple_corpus(sents)
        vocabs, tgt_vocab = build_vocabularies(corpus, sents)
        (batch,) = make_batches(corpus, sents, vocabs, tgt_vocab, token_batch=10)
        a, b = tgt_vocab.id("a"), tgt_vocab.id("b")
        np.testing.assert_array_equal(batch.tgt_in[0], [1, a, b])
        np.testing.assert_array_equal(batch.tgt_out[0], [a, b, EOS_ID])


def smoothed_loss_oracle(logits, targets, eps, pad_id=PAD_ID):
    """Direct summation over the smoothed distribution, float64."""
    logits = np.asarray(logits, dtype=np.float64)
    v = logits.shape[-1]
    total, count = 0.0, 0
    flat_logits = logits.reshape(-1, v)
    flat_targets = np.asarray(targets).reshape(-1)
    for row, gold in zip(flat_logits, flat_targets):
        if gold == pad_id:
            continue
        shifted = row - row.max()
        logp = shifted - math.log(sum(math.exp(x) for x in shifted))
        q = np.full(v, eps / (v - 1))
        q[gold] = 1.0 - eps
        total += -(q * logp).sum()
        count += 1
    return total / count


class TestLoss:
    def test_eps_zero_is_nll(self, rng):
        logits = rng.standard_normal((2, 3, 7))
        targets = rng.integers(1, 7, size=(2, 3))
        loss = label_smoothed_loss(Tensor(logits), targets, eps=0.0)
        nll = smoothed_loss_oracle(logits, targets, eps=0.0)
        assert abs(loss.item() - nll) < 1e-10

    def test_uniform_logits_give_log_vocab(self):
        logits = np.zeros((1, 4, 11))
        targets = np.full((1, 4), 5)
        loss = label_smoothed_loss(Tensor(logits), targets, eps=0.0)
        assert abs(loss.item() - math.log(11)) < 1e-12

    def test_matches_direct_formula_oracle(self, rng):
        logits = rng.standard_normal((2, 4, 7))
        targets = rng.integers(1, 7, size=(2, 4))
        targets[1, 3] = PAD_ID
        loss = label_smoothed_loss(Tensor(logits), targets, eps=0.1)
        oracle = smoothed_loss_oracle(logits, targets, eps=0.1)
        assert abs(loss.item() - oracle) < 1e-10

    def test_all_pad_batch_rejected(self):
        with pytest.raises(TrainingError, match="padding"):
            label_smoothed_loss(Tensor(np.zeros((1, 2, 5))), np.zeros((1, 2), dtype=int), eps=0.1)

    def test_pad_positions_contribute_zero_gradient(self, rng):
        logits = Tensor(rng.standard_normal((2, 3, 7)), requires_grad=True)
        targets = rng.integers(1, 7, size=(2, 3))
        targets[0, 2] = PAD_ID
        targets[1, 1] = PAD_ID
        label_smoothed_loss(logits, targets, eps=0.1).backward()
        np.testing.assert_array_equal(logits.grad[0, 2], 0.0)
        np.testing.assert_array_equal(logits.grad[1, 1], 0.0)
        assert np.any(logits.grad[0, 0] != 0)


class TestSchedule:
    def test_zero_at_step_zero(self):
        assert lr_at(0, peak=1e-3, warmup=100) == 0.0

    def test_peak_at_warmup(self):
        values = [lr_at(s, 1e-3, 100) for s in range(0, 500, 10)]
        assert max(values) == pytest.approx(1e-3)
        assert lr_at(100, 1e-3, 100) == pytest.approx(1e-3)

    def test_inverse_sqrt_decay(self):
        assert lr_at(400, 1e-3, 100) == pytest.approx(1e-3 * math.sqrt(100 / 400))


class TestOptimizer:
    def test_single_step_decreases_loss(self, rng):
        cfg = tiny_model_config("1enc", "sum", d_model=16)
        model = Transformer(cfg, seed=0)
        src = {f.name: rng.integers(4, f.vocab_size, (2, 4)) for f in cfg.factors}
        tgt_in = rng.integers(4, cfg.tgt_vocab_size, (2, 4))
        tgt_out = rng.integers(4, cfg.tgt_vocab_size, (2, 4))

        def loss_value():
            return label_smoothed_loss(model.forward(src, tgt_in), tgt_out, eps=0.0)

        before = loss_value()
        model.zero_grad()
        before.backward()
        Adam(model.parameters()).step(lr=1e-4)
        assert loss_value().item() < before.item()


class TestTrainLoop:
    def test_same_seed_identical_loss_curves(self, copy_corpus):
        corpus, targets = copy_corpus
        vocabs, tgt_vocab = build_vocabularies(corpus, targets)
        curves = []
        for _ in range(2):
            cfg = tiny_model_config(
                "1enc", "sum", d_model=16, dropout=0.1,
                factor_vocabs=(("words", len(vocabs["words"])), ("dup", len(vocabs["dup"]))),
                tgt_vocab=len(tgt_vocab),
            )
            model = Transformer(cfg, seed=5)
            res = train(model, corpus, targets, vocabs, tgt_vocab,
                        TrainConfig(token_batch=200, max_steps=30, eval_every=10,
                                    warmup_steps=10, seed=9))
            curves.append([m.train_loss for m in res.metrics])
        assert curves[0] == curves[1]

    def test_copy_task_loss_below_threshold(self):
        rng = np.random.default_rng(42)
        sents = random_sentences(rng, 200, vocab_size=14, min_len=4, max_len=8)
        corpus = simple_corpus(sents)
        vocabs, tgt_vocab = build_vocabularies(corpus, sents)
        cfg = tiny_model_config(
            "1enc", "sum", d_model=64, layers=1, heads=2,
            factor_vocabs=(("words", len(vocabs["words"])),), tgt_vocab=len(tgt_vocab),
        )
        model = Transformer(cfg, seed=3)
        hits = []

        def stop_when_low(step, train_loss, val_loss):
            hits.append((step, train_loss))
            return train_loss < 0.1

        res = train(model, corpus, sents, vocabs, tgt_vocab,
                    TrainConfig(token_batch=2000, label_smoothing=0.0, lr=3e-3,
                                warmup_steps=100, max_steps=2000, eval_every=50, seed=4),
                    on_eval=stop_when_low)
        assert res.metrics[-1].train_loss < 0.1, f"loss stayed at {res.metrics[-1].train_loss}"
        assert res.steps <= 2000

    def test_nonfinite_loss_aborts_with_step(self, copy_corpus):
        corpus, targets = copy_corpus
        vocabs, tgt_vocab = build_vocabularies(corpus, targets)
        cfg = tiny_model_config(
            factor_vocabs=(("words", len(vocabs["words"])), ("dup", len(vocabs["dup"]))),
            tgt_vocab=len(tgt_vocab),
        )
        model = Transformer(cfg, seed=0)
        model.out_proj.w.data[0, 0] = np.nan
        with pytest.raises(NumericalError, match="step 1"):
            train(model, corpus, targets, vocabs, tgt_vocab,
                  TrainConfig(token_batch=500, max_steps=5, eval_every=5, seed=0))

    def test_checkpoints_and_metrics_written(self, tmp_path, copy_corpus):
        corpus, targets = copy_corpus
        vocabs, tgt_vocab = build_vocabularies(corpus, targets)
        cfg = tiny_model_config(
            factor_vocabs=(("words", len(vocabs["words"])), ("dup", len(vocabs["dup"]))),
            tgt_vocab=len(tgt_vocab),
        )
        model = Transformer(cfg, seed=0)
        res = train(model, corpus, targets, vocabs, tgt_vocab,
                    TrainConfig(token_batch=500, max_steps=20, eval_every=10, seed=0),
                    val_corpus=corpus, val_targets=targets, out_dir=tmp_path)
        assert res.final_path.exists() and res.best_path.exists()
        lines = (tmp_path / "metrics.tsv").read_text().splitlines()
        assert lines[0] == "step\ttrain_loss\tlr\tval_loss"
        assert len(lines) == 1 + len(res.metrics)
        assert all(r.val_loss is not None for r in res.metrics)


def test_evaluate_loss_matches_training_loss_on_same_batch(copy_corpus):
    corpus, targets = copy_corpus
    vocabs, tgt_vocab = build_vocabularies(corpus, targets)
    cfg = tiny_model_config(
        factor_vocabs=(("words", len(vocabs["words"])), ("dup", len(vocabs["dup"]))),
        tgt_vocab=len(tgt_vocab),
    )
    model = Transformer(cfg, seed=1)
    batches = make_batches(corpus, targets, vocabs, tgt_vocab, 10_000)
    assert len(batches) == 1
    direct = label_smoothed_loss(
        model.forward(batches[0].src, batches[0].tgt_in, batches[0].src_pad, batches[0].tgt_pad),
        batches[0].tgt_out, eps=0.1,
    )
    assert evaluate_loss(model, batches, eps=0.1) == pytest.approx(direct.item(), rel=1e-6)
