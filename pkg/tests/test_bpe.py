import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factored_nmt import bpe
from factored_nmt.bpe import (
    BpeModel,
    DataError,
    Vocabulary,
    apply_bpe,
    build_vocab,
    learn_bpe,
    strip_bpe,
)

token = st.text(alphabet="abcdefghij", min_size=1, max_size=8)
sentence = st.lists(token, min_size=1, max_size=10)


def brute_force_learn(sentences, num_merges):
    """Reference learner: explicit pair recount and lexicographic ties."""
    words = {}
    for sent in sentences:
        for w in sent:
            sym = tuple(w[:-1]) + (w[-1] + "</w>",)
            words[sym] = words.get(sym, 0) + 1
    merges = []
    for _ in range(num_merges):
        counts = {}
        for sym, freq in words.items():
            for i in range(len(sym) - 1):
                pair = (sym[i], sym[i + 1])
                counts[pair] = counts.get(pair, 0) + freq
        if not counts:
            break
        best = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
        merges.append(best)
        new_words = {}
        for sym, freq in words.items():
            out = []
            i = 0
            while i < len(sym):
                if i + 1 < len(sym) and (sym[i], sym[i + 1]) == best:
                    out.append(sym[i] + sym[i + 1])
                    i += 2
                else:
                    out.append(sym[i])
                    i += 1
            t = tuple(out)
            new_words[t] = new_words.get(t, 0) + freq
        words = new_words
    return merges


def replay_merges(word, merges):
    """Reference encoder: apply each merge over the word, in learning order."""
    symbols = list(word[:-1]) + [word[-1] + "</w>"]
    for left, right in merges:
        out = []
        i = 0
        while i < len(symbols):
            if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
                out.append(left + right)
                i += 2
            else:
                out.append(symbols[i])
                i += 1
        symbols = out
    return symbols


TOY = [["low"]] * 5 + [["lower"]] * 2


class TestLearn:
    def test_zero_merges_leaves_characters(self):
        model = learn_bpe(TOY, 0)
        assert model.merges == ()
        assert apply_bpe(["low"], model) == ["l@@", "o@@", "w"]

    def test_toy_corpus_merge_order(self):
        model = learn_bpe(TOY, 2)
        # (l,o) occurs 7 times, the most frequent adjacent pair
        assert model.merges[0] == ("l", "o")
        assert model.merges == (("l", "o"), ("lo", "w</w>"))
        assert list(model.merges) == brute_force_learn(TOY, 2)

    @given(st.lists(sentence, min_size=1, max_size=8), st.integers(0, 12))
    @settings(max_examples=40, deadline=None)
    def test_matches_brute_force_learner(self, sentences, num_merges):
        assert list(learn_bpe(sentences, num_merges).merges) == brute_force_learn(
            sentences, num_merges
        )

    def test_deterministic_merges_file(self, tmp_path):
        paths = []
        for i in range(2):
            model = learn_bpe(TOY, 2)
            path = tmp_path / f"merges{i}"
            model.save(path)
            paths.append(path.read_bytes())
        assert paths[0] == paths[1]

    def test_empty_corpus_rejected(self):
        with pytest.raises(DataError):
            learn_bpe([], 3)

    def test_stops_early_when_fully_merged(self):
        model = learn_bpe([["ab"]], 100)
        assert len(model.merges) == 1


class TestApply:
    def test_whole_word_in_vocab_unsplit(self):
        model = learn_bpe(TOY, 2)
        vocab = build_vocab(TOY, model)
        assert apply_bpe(["low"], model, vocab) == ["low"]

    def test_matches_manual_replay(self):
        model = learn_bpe(TOY, 2)
        out = apply_bpe(["lower"], model)
        replayed = replay_merges("lower", model.merges)
        surfaces = [s[:-4] if s.endswith("</w>") else s + "@@" for s in replayed]
        assert out == surfaces == ["lo@@", "w@@", "e@@", "r"]

    def test_oov_piece_resplit_to_vocab(self):
        model = learn_bpe(TOY, 2)
        vocab = Vocabulary(["lo@@", "w", "e@@", "r"])
        # "low" merges fully, but "low" is out of vocabulary: undo the
        # last merge and emit the in-vocabulary parts
        assert apply_bpe(["low"], model, vocab) == ["lo@@", "w"]

    def test_unseen_characters_become_unk(self):
        model = learn_bpe(TOY, 2)
        vocab = build_vocab(TOY, model)
        out = apply_bpe(["xyz"], model, vocab)
        assert out == [bpe.UNK] * 3

    def test_subword_count_at_least_one_per_word(self):
        model = learn_bpe(TOY, 1)
        words = ["low", "lower", "l"]
        out = apply_bpe(words, model)
        assert len(out) >= len(words)

    def test_sentinel_in_token_rejected(self):
        model = learn_bpe(TOY, 0)
        with pytest.raises(DataError):
            apply_bpe(["bad</w>token"], model)


class TestStrip:
    def test_three_piece_join(self):
        assert strip_bpe(["un@@", "believ@@", "able"]) == ["unbelievable"]

    def test_marker_free_identity(self):
        assert strip_bpe(["plain", "words"]) == ["plain", "words"]

    def test_dangling_marker_warns_and_drops(self, caplog):
        with caplog.at_level("WARNING"):
            out = strip_bpe(["oops@@"])
        assert out == ["oops"]
        assert any("dangling" in r.message for r in caplog.records)

    @given(st.lists(sentence, min_size=2, max_size=10), st.integers(0, 20))
    @settings(max_examples=40, deadline=None)
    def test_roundtrip_property(self, sentences, num_merges):
        model = learn_bpe(sentences, num_merges)
        for sent in sentences:
            assert strip_bpe(apply_bpe(sent, model)) == sent


class TestVocabulary:
    def test_reserved_ids_fixed(self):
        vocab = Vocabulary(["hello"])
        assert [vocab.id(t) for t in (bpe.PAD, bpe.BOS, bpe.EOS, bpe.UNK)] == [0, 1, 2, 3]
        assert vocab.id("hello") == 4

    def test_threshold_keeps_frequent_tokens(self):
        sents = [["a"] * 5, ["b"] * 2, ["c"]]
        vocab = Vocabulary.from_corpus(sents, threshold=2)
        assert "a" in vocab and "b" in vocab and "c" not in vocab
        assert vocab.id("c") == bpe.UNK_ID

    def test_bijective_encode_decode(self):
        vocab = Vocabulary.from_corpus([["x", "y", "z"]])
        ids = vocab.encode(["x", "y", "z"])
        assert len(set(ids)) == 3
        assert vocab.decode(ids) == ["x", "y", "z"]

    def test_file_roundtrip_sorted_by_frequency(self, tmp_path):
        sents = [["the"] * 9 + ["cat"] * 3 + ["sat"]]
        vocab = Vocabulary.from_corpus(sents)
        path = tmp_path / "vocab.tsv"
        vocab.save(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "the\t9"
        loaded = Vocabulary.load(path)
        assert loaded.tokens == vocab.tokens

    def test_merges_file_roundtrip(self, tmp_path):
        model = learn_bpe(TOY, 2)
        path = tmp_path / "merges"
        model.save(path)
        assert BpeModel.load(path).merges == model.merges
        assert path.read_text() == "l o\nlo w</w>\n"
