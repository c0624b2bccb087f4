import numpy as np
import pytest

from factored_nmt.factors import FactoredCorpus
from factored_nmt.model import Arch, Combine, FactorSpec, ModelConfig, Transformer


def random_sentences(rng, n, vocab_size=12, min_len=3, max_len=9, prefix="w"):
    vocab = [f"{prefix}{i}" for i in range(vocab_size)]
    return [
        [vocab[rng.integers(0, vocab_size)] for _ in range(int(rng.integers(min_len, max_len + 1)))]
        for _ in range(n)
    ]


def tiny_model_config(
    arch="1enc",
    combine="sum",
    d_model=16,
    layers=1,
    heads=2,
    factor_vocabs=(("words", 20), ("lemma", 14)),
    tgt_vocab=20,
    dropout=0.0,
    max_len=64,
):
    comb = Combine(combine)
    n = len(factor_vocabs)
    dim = d_model if comb is Combine.SUM else d_model // n
    return ModelConfig(
        factors=tuple(FactorSpec(name, vocab, dim) for name, vocab in factor_vocabs),
        tgt_vocab_size=tgt_vocab,
        arch=Arch(arch),
        combine=comb,
        layers_enc=layers,
        layers_dec=layers,
        heads=heads,
        d_model=d_model,
        d_ffn=2 * d_model,
        dropout=dropout,
        max_len=max_len,
    )


def random_source(config, rng, batch=2, length=5):
    src = {f.name: rng.integers(4, f.vocab_size, size=(batch, length)) for f in config.factors}
    pad = np.zeros((batch, length), dtype=bool)
    return src, pad


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def copy_corpus(rng):
    sents = random_sentences(rng, 40)
    return FactoredCorpus(words=sents, factors={"dup": [list(s) for s in sents]}), [
        list(s) for s in sents
    ]
