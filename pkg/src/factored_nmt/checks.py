"""Built-in verification suites: op-level and full-model gradient checks,
and the architecture/combination grid runner."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .bleu import corpus_bleu
from .bpe import strip_bpe
from .config import RunConfig
from .decoding import translate_corpus
from .factors import FactoredCorpus
from .gradcheck import GradCheckReport, grad_check
from .model import Arch, Combine, FactorSpec, ModelConfig, Transformer, causal_bias
from .tensor import Tensor
from .training import build_vocabularies, label_smoothed_loss, make_batches, train


def all_variants() -> List[Tuple[str, str]]:
    return [("1enc", "sum"), ("1enc", "concat"), ("nenc", "sum"), ("nenc", "concat")]


# -- op-level gradient checks ----------------------------------------------------


def op_grad_checks(seed: int = 0) -> Dict[str, GradCheckReport]:
    """Finite-difference check of every differentiable op at float64."""
    rng = np.random.default_rng(seed)

    def p(*shape) -> Tensor:
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    reports: Dict[str, GradCheckReport] = {}

    a, b = p(3, 4), p(4, 5)
    w0 = Tensor(rng.standard_normal((3, 5)))
    reports["matmul"] = grad_check(lambda: (T.matmul(a, b) * w0).sum(), {"a": a, "b": b})

    ab, bb = p(2, 3, 4), p(2, 4, 5)
    w1 = Tensor(rng.standard_normal((2, 3, 5)))
    reports["matmul_batched"] = grad_check(lambda: (T.matmul(ab, bb) * w1).sum(), {"a": ab, "b": bb})

    x = p(4, 6)
    w2 = Tensor(rng.standard_normal((4, 6)))
    reports["softmax"] = grad_check(lambda: (T.softmax(x, axis=-1) * w2).sum(), {"x": x})
    reports["log_softmax"] = grad_check(lambda: (T.log_softmax(x, axis=-1) * w2).sum(), {"x": x})

    xn, gamma, beta = p(3, 8), p(8), p(8)
    w3 = Tensor(rng.standard_normal((3, 8)))
    reports["layer_norm"] = grad_check(
        lambda: (T.layer_norm(xn, gamma, beta) * w3).sum(), {"x": xn, "gamma": gamma, "beta": beta}
    )

    table = p(7, 4)
    ids = rng.integers(0, 7, size=(2, 5))
    w4 = Tensor(rng.standard_normal((2, 5, 4)))
    reports["embedding"] = grad_check(lambda: (T.embedding(table, ids) * w4).sum(), {"table": table})

    xp = p(3, 6)
    idx = rng.integers(0, 6, size=(3,))
    reports["pick"] = grad_check(lambda: T.pick(xp, idx).sum(), {"x": xp})

    q, k, v = p(1, 3, 8), p(1, 3, 8), p(1, 3, 8)
    mask = causal_bias(3, np.float64)
    w5 = Tensor(rng.standard_normal((1, 3, 8)))
    reports["multi_head_attention"] = grad_check(
        lambda: (T.multi_head_attention(q, k, v, 2, mask) * w5).sum(), {"q": q, "k": k, "v": v}
    )

    xr = p(3, 5)
    w7 = Tensor(rng.standard_normal((3, 5)))
    reports["relu"] = grad_check(lambda: (T.relu(xr) * w7).sum(), {"x": xr})

    xc, yc = p(2, 3), p(2, 4)
    w6 = Tensor(rng.standard_normal((2, 7)))
    reports["concat"] = grad_check(lambda: (T.concat([xc, yc], axis=-1) * w6).sum(), {"x": xc, "y": yc})

    logits = p(2, 4, 9)
    tgt = rng.integers(1, 9, size=(2, 4))
    tgt[1, 3] = 0  # one pad position
    reports["label_smoothed_loss"] = grad_check(
        lambda: label_smoothed_loss(logits, tgt, eps=0.1), {"logits": logits}
    )

    return reports


# -- full-model gradient checks -----------------------------------------------------


def tiny_config(arch: str, combine: str, d_model: int = 8, layers: int = 2, heads: int = 2) -> ModelConfig:
    comb = Combine(combine)
    if comb is Combine.SUM:
        dims = (d_model, d_model)
    else:
        dims = (d_model // 2, d_model // 2)
    return ModelConfig(
        factors=(
            FactorSpec("words", 11, dims[0]),
            FactorSpec("lemma", 7, dims[1]),
        ),
        tgt_vocab_size=13,
        arch=Arch(arch),
        combine=comb,
        layers_enc=layers,
        layers_dec=layers,
        heads=heads,
        d_model=d_model,
        d_ffn=2 * d_model,
        dropout=0.0,
        max_len=32,
    )


def random_batch(config: ModelConfig, rng: np.random.Generator, batch: int = 2, length: int = 5):
    src = {
        f.name: rng.integers(4, f.vocab_size, size=(batch, length))
        for f in config.factors
    }
    src_pad = np.zeros((batch, length), dtype=bool)
    src_pad[-1, -1] = True  # exercise the padding path
    tgt_in = rng.integers(4, config.tgt_vocab_size, size=(batch, length))
    tgt_in[:, 0] = 1
    tgt_out = rng.integers(4, config.tgt_vocab_size, size=(batch, length))
    tgt_out[-1, -1] = 0
    tgt_pad = tgt_out == 0
    return src, src_pad, tgt_in, tgt_out, tgt_pad


def model_loss_grad_check(
    arch: str,
    combine: str,
    seed: int = 0,
    eps: float = 1e-5,
    tol: float = 1e-4,
    min_total_coords: int = 150,
) -> GradCheckReport:
    """Check the full training loss of one architecture/combination variant."""
    config = tiny_config(arch, combine)
    model = Transformer(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    src, src_pad, tgt_in, tgt_out, tgt_pad = random_batch(config, rng)

    def loss() -> Tensor:
        logits = model.forward(src, tgt_in, src_pad, tgt_pad, rng=None)
        return label_smoothed_loss(logits, tgt_out, eps=0.1)

    return grad_check(
        loss, model.parameters(), eps=eps, tol=tol,
        min_total_coords=min_total_coords, rng=np.random.default_rng(seed + 2),
    )


# -- grid runner ----------------------------------------------------------------------


@dataclass
class GridRow:
    arch: str
    combine: str
    factors: str
    bleu: float


def _grid_dims(cfg: RunConfig, names: Sequence[str]) -> Dict[str, int]:
    if all(n in cfg.factor_dims for n in names):
        return {n: cfg.factor_dims[n] for n in names}
    n = len(names)
    dim = cfg.d_model // n
    if dim * n != cfg.d_model or dim % cfg.heads != 0 or dim % 2 != 0:
        raise ValueError(
            f"cannot split d_model={cfg.d_model} evenly over {n} factors for concatenation; "
            "pass explicit --factor-dims"
        )
    return {name: dim for name in names}


def _train_and_score(
    corpus: FactoredCorpus,
    targets: Sequence[Sequence[str]],
    cfg: RunConfig,
    arch: str,
    combine: str,
) -> float:
    src_vocabs, tgt_vocab = build_vocabularies(corpus, targets, threshold=cfg.vocab_threshold)
    sizes = {name: len(v) for name, v in src_vocabs.items()}
    names = list(sizes)
    dims = (
        {n: cfg.d_model for n in names}
        if Combine(combine) is Combine.SUM
        else _grid_dims(cfg, names)
    )
    config = ModelConfig(
        factors=tuple(FactorSpec(n, sizes[n], dims[n]) for n in names),
        tgt_vocab_size=len(tgt_vocab),
        arch=Arch(arch),
        combine=Combine(combine),
        layers_enc=cfg.layers_enc,
        layers_dec=cfg.layers_dec,
        heads=cfg.heads,
        d_model=cfg.d_model,
        d_ffn=cfg.d_ffn,
        dropout=cfg.dropout,
        max_len=cfg.max_len,
    )
    model = Transformer(config, seed=cfg.seed)
    train(model, corpus, targets, src_vocabs, tgt_vocab, cfg.train_config())
    streams = {"words": corpus.words, **corpus.factors}
    hyps = translate_corpus(
        model, streams, src_vocabs, tgt_vocab,
        beam_size=cfg.beam, length_penalty=cfg.length_penalty,
    )
    return corpus_bleu([strip_bpe(h) for h in hyps], [strip_bpe(list(t)) for t in targets]).score


def run_grid(
    corpus: FactoredCorpus,
    targets: Sequence[Sequence[str]],
    cfg: RunConfig,
    out_dir: Optional[Path] = None,
) -> List[GridRow]:
    """Baseline, lemmas-for-words, and the four factored cells, each trained
    on the supplied toy corpus and scored on it (structural comparison only)."""
    rows: List[GridRow] = []
    baseline = FactoredCorpus(words=corpus.words, factors={})
    rows.append(GridRow("baseline", "-", "-", _train_and_score(baseline, targets, cfg, "1enc", "sum")))
    if "lemma" in corpus.factors:
        lemmas_only = FactoredCorpus(words=corpus.factors["lemma"], factors={})
        rows.append(
            GridRow("lemmas", "-", "-", _train_and_score(lemmas_only, targets, cfg, "1enc", "sum"))
        )
    factor_names = ",".join(corpus.factors) if corpus.factors else "-"
    for arch, comb in all_variants():
        rows.append(
            GridRow(arch, comb, factor_names, _train_and_score(corpus, targets, cfg, arch, comb))
        )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "grid_results.tsv", "w", encoding="utf-8") as fh:
            fh.write("model\tcombination\tfactors\tbleu\n")
            for row in rows:
                fh.write(f"{row.arch}\t{row.combine}\t{row.factors}\t{row.bleu:.2f}\n")
    return rows
