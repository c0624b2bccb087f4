import itertools

import numpy as np
import pytest

from conftest import random_source, tiny_model_config
from factored_nmt import tensor as T
from factored_nmt.bpe import BOS_ID, EOS_ID, PAD_ID, Vocabulary
from factored_nmt.decoding import BeamHypothesis, beam_search, translate
from factored_nmt.model import EncoderOutput, Transformer
from factored_nmt.tensor import Tensor


def log_probs_for_prefix(model, enc, prefix):
    with T.no_grad():
        logits = model.decode(enc, np.array([prefix], dtype=np.int64)).data[0, -1]
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def greedy_decode(model, src_ids, max_gen):
    """Reference greedy loop: argmax token by token."""
    with T.no_grad():
        enc = model.encode(src_ids)
    prefix = [BOS_ID]
    logprob = 0.0
    for _ in range(max_gen):
        lp = log_probs_for_prefix(model, enc, prefix)
        lp[PAD_ID] = -np.inf
        lp[BOS_ID] = -np.inf
        token = int(np.argmax(lp))
        logprob += float(lp[token])
        prefix.append(token)
        if token == EOS_ID:
            break
    return prefix, logprob


def exhaustive_best(model, src_ids, max_gen, length_penalty=True):
    """Enumerate every candidate sequence and rank like the beam does."""
    with T.no_grad():
        enc = model.encode(src_ids)
    vocab = model.config.tgt_vocab_size
    tokens = [t for t in range(vocab) if t not in (PAD_ID, BOS_ID, EOS_ID)]
    best = None

    def score(ids, logprob):
        gen = len(ids) - 1
        return logprob / max(gen, 1) if length_penalty else logprob

    def consider(ids, logprob):
        nonlocal best
        s = score(ids, logprob)
        if best is None or s > best[0]:
            best = (s, ids)

    for length in range(0, max_gen):
        for body in itertools.product(tokens, repeat=length):
            prefix = [BOS_ID]
            logprob = 0.0
            for tok in body:
                lp = log_probs_for_prefix(model, enc, prefix)
                logprob += float(lp[tok])
                prefix.append(tok)
            lp = log_probs_for_prefix(model, enc, prefix)
            consider(prefix + [EOS_ID], logprob + float(lp[EOS_ID]))
            if length == max_gen - 1:
                for tok in tokens:  # truncated at max_gen without EOS
                    consider(prefix + [tok], logprob + float(lp[tok]))
    return best


@pytest.fixture(scope="module")
def small_model():
    cfg = tiny_model_config(
        "1enc", "sum", d_model=16, factor_vocabs=(("words", 9),), tgt_vocab=7, max_len=16
    )
    return Transformer(cfg, seed=13)


def source_for(model, rng, length=4):
    return {"words": rng.integers(4, 9, size=(1, length))}


class TestBeam:
    def test_beam_one_equals_greedy(self, small_model):
        rng = np.random.default_rng(0)
        for _ in range(5):
            src = source_for(small_model, rng)
            hyp = beam_search(small_model, src, beam_size=1, max_len=6)
            greedy_ids, _ = greedy_decode(small_model, src, max_gen=6)
            assert hyp.ids == greedy_ids

    def test_beam_score_dominates_greedy(self, small_model):
        rng = np.random.default_rng(1)
        for _ in range(5):
            src = source_for(small_model, rng)
            greedy = beam_search(small_model, src, beam_size=1, max_len=6)
            wide = beam_search(small_model, src, beam_size=4, max_len=6)
            assert wide.score(True) >= greedy.score(True) - 1e-12

    @pytest.mark.parametrize("length_penalty", [True, False])
    def test_exhaustive_oracle(self, small_model, length_penalty):
        rng = np.random.default_rng(2)
        src = source_for(small_model, rng, length=3)
        max_gen = 3
        vocab = small_model.config.tgt_vocab_size
        hyp = beam_search(
            small_model, src, beam_size=vocab**max_gen, max_len=max_gen,
            length_penalty=length_penalty,
        )
        best_score, best_ids = exhaustive_best(small_model, src, max_gen, length_penalty)
        assert hyp.score(length_penalty) == pytest.approx(best_score, abs=1e-9)
        assert hyp.ids == best_ids

    def test_deterministic(self, small_model):
        src = source_for(small_model, np.random.default_rng(3))
        runs = [beam_search(small_model, src, beam_size=3, max_len=8) for _ in range(2)]
        assert runs[0].ids == runs[1].ids
        assert runs[0].logprob == runs[1].logprob

    def test_finished_ends_with_eos(self, small_model):
        src = source_for(small_model, np.random.default_rng(4))
        hyp = beam_search(small_model, src, beam_size=2, max_len=12)
        assert hyp.finished
        assert hyp.ids[0] == BOS_ID

    def test_rejects_zero_beam(self, small_model):
        with pytest.raises(ValueError):
            beam_search(small_model, source_for(small_model, np.random.default_rng(0)), beam_size=0)


class TestTranslate:
    def make_vocabs(self, model):
        src = {"words": Vocabulary([f"w{i}" for i in range(5)])}
        tgt = Vocabulary([f"t{i}" for i in range(3)])
        return src, tgt

    def test_empty_source_warns_and_returns_empty(self, small_model, caplog):
        src_vocabs, tgt_vocab = self.make_vocabs(small_model)
        with caplog.at_level("WARNING"):
            out = translate(small_model, {"words": []}, src_vocabs, tgt_vocab)
        assert out == []
        assert any("empty source" in r.message for r in caplog.records)

    def test_output_strips_bos_eos(self, small_model):
        src_vocabs, tgt_vocab = self.make_vocabs(small_model)
        out = translate(small_model, {"words": ["w1", "w2"]}, src_vocabs, tgt_vocab, beam_size=2)
        assert all(tok not in ("<s>", "</s>", "<pad>") for tok in out)

    def test_mismatched_stream_lengths_rejected(self, small_model):
        src_vocabs, tgt_vocab = self.make_vocabs(small_model)
        src_vocabs["lemma"] = Vocabulary(["x"])
        with pytest.raises(ValueError, match="aligned"):
            translate(small_model, {"words": ["w1"], "lemma": ["x", "x"]}, src_vocabs, tgt_vocab)


class TestHypothesisInvariants:
    def test_logprob_non_increasing_with_length(self, small_model):
        rng = np.random.default_rng(5)
        src = source_for(small_model, rng)
        with T.no_grad():
            enc = small_model.encode(src)
        prefix = [BOS_ID]
        logprob = 0.0
        previous = 0.0
        for _ in range(5):
            lp = log_probs_for_prefix(small_model, enc, prefix)
            tok = int(np.argmax(lp))
            logprob += float(lp[tok])
            prefix.append(tok)
            assert logprob <= previous + 1e-12
            previous = logprob

    def test_score_normalizes_by_generated_length(self):
        hyp = BeamHypothesis(ids=[BOS_ID, 5, 6, EOS_ID], logprob=-3.0, finished=True)
        assert hyp.generated == 3
        assert hyp.score(True) == pytest.approx(-1.0)
        assert hyp.score(False) == -3.0
