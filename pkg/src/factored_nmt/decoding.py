"""Greedy and beam-search decoding."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .bpe import BOS_ID, EOS_ID, PAD_ID, Vocabulary
from .model import EncoderOutput, Transformer
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class BeamHypothesis:
    ids: List[int]  # starts with BOS; finished hypotheses end with EOS
    logprob: float
    finished: bool = False

    @property
    def generated(self) -> int:
        """Tokens emitted after BOS (EOS included when finished)."""
        return len(self.ids) - 1

    def score(self, length_penalty: bool) -> float:
        if not length_penalty:
            return self.logprob
        return self.logprob / max(self.generated, 1)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def beam_search(
    model: Transformer,
    src_ids: Dict[str, np.ndarray],
    beam_size: int = 4,
    max_len: Optional[int] = None,
    length_penalty: bool = True,
) -> BeamHypothesis:
    """Beam search over one source sentence (id matrices of shape (1, L)).

    Hypotheses are ranked by length-normalized log-probability (or raw
    log-probability with the penalty off). Hypotheses that hit ``max_len``
    without EOS are finalized as-is. The search stops once no live
    hypothesis can still beat the best finished one.
    """
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    max_gen = max_len if max_len is not None else model.config.max_len - 1
    max_gen = min(max_gen, model.config.max_len - 1)

    with T.no_grad():
        enc = model.encode(src_ids)
        live = [BeamHypothesis(ids=[BOS_ID], logprob=0.0)]
        finished: List[BeamHypothesis] = []

        for _ in range(max_gen):
            tgt_in = np.array([h.ids for h in live], dtype=np.int64)
            n = len(live)
            states = Tensor(np.repeat(enc.states.data, n, axis=0))
            pad = np.repeat(enc.src_pad, n, axis=0)
            logits = model.decode(EncoderOutput(states, pad), tgt_in)
            logp = _log_softmax_np(logits.data[:, -1, :])  # (n, V)

            candidates = []  # (neg score sort handled via explicit key)
            for i, hyp in enumerate(live):
                for tok in range(logp.shape[-1]):
                    if tok == PAD_ID or tok == BOS_ID:
                        continue
                    candidates.append((hyp.logprob + float(logp[i, tok]), i, tok))
            # highest cumulative log-prob first; ties to the earlier beam
            # entry then the smaller token id, matching greedy argmax
            candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

            new_live: List[BeamHypothesis] = []
            for score, i, tok in candidates:
                if tok == EOS_ID:
                    finished.append(
                        BeamHypothesis(live[i].ids + [tok], score, finished=True)
                    )
                elif len(new_live) < beam_size:
                    new_live.append(BeamHypothesis(live[i].ids + [tok], score))
                if len(new_live) >= beam_size and len(finished) >= beam_size:
                    break
            finished.sort(key=lambda h: -h.score(length_penalty))
            del finished[max(beam_size, 1) :]
            live = new_live
            if not live:
                break
            if finished:
                best_done = finished[0].score(length_penalty)
                if length_penalty:
                    # cumulative log-probs only decrease; the best reachable
                    # normalized score divides by the longest possible length
                    optimistic = max(h.logprob / max_gen for h in live)
                else:
                    optimistic = max(h.logprob for h in live)
                if best_done > optimistic:
                    break

        for hyp in live:
            finished.append(BeamHypothesis(hyp.ids, hyp.logprob, finished=True))
        finished.sort(key=lambda h: -h.score(length_penalty))
        return finished[0]


def translate(
    model: Transformer,
    src_tokens: Dict[str, Sequence[str]],
    src_vocabs: Dict[str, Vocabulary],
    tgt_vocab: Vocabulary,
    beam_size: int = 4,
    max_len: Optional[int] = None,
    length_penalty: bool = True,
) -> List[str]:
    """Translate one factored sentence; returns target tokens without BOS/EOS."""
    lengths = {name: len(toks) for name, toks in src_tokens.items()}
    if len(set(lengths.values())) > 1:
        raise ValueError(f"source factor streams must be aligned, got lengths {lengths}")
    if not next(iter(src_tokens.values()), []):
        logger.warning("empty source sentence; emitting empty translation")
        return []
    src_ids = {
        name: np.array([src_vocabs[name].encode(toks)], dtype=np.int64)
        for name, toks in src_tokens.items()
    }
    best = beam_search(model, src_ids, beam_size, max_len, length_penalty)
    return tgt_vocab.decode(best.ids)


def translate_corpus(
    model: Transformer,
    streams: Dict[str, Sequence[Sequence[str]]],
    src_vocabs: Dict[str, Vocabulary],
    tgt_vocab: Vocabulary,
    beam_size: int = 4,
    max_len: Optional[int] = None,
    length_penalty: bool = True,
) -> List[List[str]]:
    n = len(next(iter(streams.values())))
    out = []
    for i in range(n):
        sentence = {name: stream[i] for name, stream in streams.items()}
        out.append(
            translate(model, sentence, src_vocabs, tgt_vocab, beam_size, max_len, length_penalty)
        )
    return out
