"""Byte pair encoding with a joint, frequency-thresholded vocabulary.

Merges are learned greedily from word-type frequencies (ties broken
lexicographically so two runs over the same corpus produce bit-identical
merge files). Word-internal continuation is marked with a ``@@`` suffix on
non-final pieces; end-of-word is tracked internally with a ``</w>``
sentinel on the last symbol and never appears in emitted subwords.

File formats:
  merges file  one merge per line, "left right", in learning order
  vocab file   "token<TAB>frequency", descending frequency
  corpus file  one sentence per line, tokens space-separated
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

logger = logging.getLogger(__name__)

EOW = "</w>"
DEFAULT_MARKER = "@@"

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)


class DataError(ValueError):
    """Malformed or empty input data."""


# -- corpus files -------------------------------------------------------------


def read_corpus(path) -> List[List[str]]:
    """One sentence per line, tokens space-separated."""
    sentences = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            sentences.append(line.split())
    return sentences


def write_corpus(path, sentences: Iterable[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tokens in sentences:
            fh.write(" ".join(tokens) + "\n")


# -- vocabulary ---------------------------------------------------------------


class Vocabulary:
    """Token-to-id map with fixed reserved ids 0..3 (PAD, BOS, EOS, UNK)."""

    def __init__(self, tokens: Sequence[str], freqs: Optional[Mapping[str, int]] = None):
        self._tokens: List[str] = list(RESERVED)
        self._ids: Dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        self.freqs: Dict[str, int] = dict(freqs or {})
        for tok in tokens:
            if tok in self._ids:
                continue
            self._ids[tok] = len(self._tokens)
            self._tokens.append(tok)

    @classmethod
    def from_corpus(cls, sentences: Iterable[Sequence[str]], threshold: int = 0) -> "Vocabulary":
        """Keep every token whose corpus frequency is >= ``threshold``.

        Tokens are ordered by descending frequency, ties lexicographic, so
        id assignment is deterministic.
        """
        counts = Counter(tok for sent in sentences for tok in sent)
        kept = [(t, c) for t, c in counts.items() if c >= threshold]
        kept.sort(key=lambda tc: (-tc[1], tc[0]))
        return cls([t for t, _ in kept], freqs=dict(kept))

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token(self, i: int) -> str:
        return self._tokens[i]

    @property
    def tokens(self) -> List[str]:
        return list(self._tokens)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Sequence[int], strip_special: bool = True) -> List[str]:
        toks = [self._tokens[i] for i in ids]
        if strip_special:
            toks = [t for t in toks if t not in (PAD, BOS, EOS)]
        return toks

    @classmethod
    def from_token_list(cls, tokens: Sequence[str]) -> "Vocabulary":
        """Rebuild from a full id-ordered token list (reserved entries first)."""
        if list(tokens[:4]) != list(RESERVED):
            raise DataError(f"token list must start with reserved entries {RESERVED}")
        return cls(tokens[4:])

    def save(self, path) -> None:
        entries = [(t, self.freqs.get(t, 0)) for t in self._tokens[4:]]
        entries.sort(key=lambda tc: (-tc[1], tc[0]))
        with open(path, "w", encoding="utf-8") as fh:
            for tok, freq in entries:
                fh.write(f"{tok}\t{freq}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, freqs = [], {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise DataError(f"{path}:{lineno}: expected 'token<TAB>frequency'")
                tokens.append(parts[0])
                freqs[parts[0]] = int(parts[1])
        return cls(tokens, freqs=freqs)


# -- BPE model ----------------------------------------------------------------


@dataclass(frozen=True)
class BpeModel:
    """Ordered merge list plus the continuation marker convention."""

    merges: Tuple[Tuple[str, str], ...]
    marker: str = DEFAULT_MARKER
    vocab_threshold: int = 0
    _priority: Dict[Tuple[str, str], int] = field(init=False, repr=False, compare=False)
    _formed_by: Dict[str, Tuple[str, str]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        priority = {pair: i for i, pair in enumerate(self.merges)}
        if len(priority) != len(self.merges):
            raise DataError("duplicate merge pair in model")
        formed: Dict[str, Tuple[str, str]] = {}
        for left, right in self.merges:
            formed.setdefault(left + right, (left, right))
        object.__setattr__(self, "_priority", priority)
        object.__setattr__(self, "_formed_by", formed)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for left, right in self.merges:
                fh.write(f"{left} {right}\n")

    @classmethod
    def load(cls, path, marker: str = DEFAULT_MARKER, vocab_threshold: int = 0) -> "BpeModel":
        merges = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split(" ")
                if len(parts) != 2:
                    raise DataError(f"{path}:{lineno}: expected 'left right'")
                merges.append((parts[0], parts[1]))
        return cls(tuple(merges), marker=marker, vocab_threshold=vocab_threshold)


def _word_symbols(word: str) -> Tuple[str, ...]:
    if EOW in word:
        raise DataError(f"token contains reserved end-of-word sentinel: {word!r}")
    return tuple(word[:-1]) + (word[-1] + EOW,)


def _merge_symbols(symbols: Tuple[str, ...], pair: Tuple[str, str]) -> Tuple[str, ...]:
    left, right = pair
    joined = left + right
    out: List[str] = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
            out.append(joined)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def _pair_counts(words: Dict[Tuple[str, ...], int]) -> Counter:
    counts: Counter = Counter()
    for symbols, freq in words.items():
        for a, b in zip(symbols, symbols[1:]):
            counts[(a, b)] += freq
    return counts


def learn_bpe(
    sentences: Iterable[Sequence[str]],
    num_merges: int,
    marker: str = DEFAULT_MARKER,
    vocab_threshold: int = 0,
) -> BpeModel:
    """Learn ``num_merges`` greedy most-frequent-pair merges.

    For a joint model, pass the sentences of both language sides together.
    Ties between equally frequent pairs go to the lexicographically
    smallest (left, right) pair, which makes learning deterministic.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be non-negative")
    word_freqs = Counter(tok for sent in sentences for tok in sent)
    if not word_freqs:
        raise DataError("cannot learn BPE from an empty corpus")

    words: Dict[Tuple[str, ...], int] = {}
    for word, freq in word_freqs.items():
        symbols = _word_symbols(word)
        words[symbols] = words.get(symbols, 0) + freq

    merges: List[Tuple[str, str]] = []
    for _ in range(num_merges):
        counts = _pair_counts(words)
        if not counts:
            break
        best = None
        best_count = -1
        for pair, count in counts.items():
            if count > best_count or (count == best_count and pair < best):
                best, best_count = pair, count
        merges.append(best)
        updated: Dict[Tuple[str, ...], int] = {}
        for symbols, freq in words.items():
            merged = _merge_symbols(symbols, best)
            updated[merged] = updated.get(merged, 0) + freq
        words = updated
    return BpeModel(tuple(merges), marker=marker, vocab_threshold=vocab_threshold)


def _surface(symbol: str, marker: str) -> str:
    if symbol.endswith(EOW):
        return symbol[: -len(EOW)]
    return symbol + marker


def _encode_word(word: str, model: BpeModel) -> List[str]:
    symbols = list(_word_symbols(word))
    prio = model._priority
    while len(symbols) > 1:
        best_rank = None
        for i in range(len(symbols) - 1):
            rank = prio.get((symbols[i], symbols[i + 1]))
            if rank is not None and (best_rank is None or rank < best_rank):
                best_rank = rank
        if best_rank is None:
            break
        symbols = list(_merge_symbols(tuple(symbols), model.merges[best_rank]))
    return symbols


def _resplit_oov(symbol: str, model: BpeModel, vocab: Vocabulary, out: List[str]) -> None:
    # Undo merges until every piece is in-vocabulary; unseen atoms become UNK.
    surface = _surface(symbol, model.marker)
    if surface in vocab:
        out.append(surface)
        return
    pair = model._formed_by.get(symbol)
    if pair is None:
        logger.debug("subword atom %r not in vocabulary, emitting %s", surface, UNK)
        out.append(UNK)
        return
    _resplit_oov(pair[0], model, vocab, out)
    _resplit_oov(pair[1], model, vocab, out)


def apply_bpe(
    words: Sequence[str],
    model: BpeModel,
    vocab: Optional[Vocabulary] = None,
) -> List[str]:
    """Split each word per the learned merges.

    Non-final pieces carry the continuation marker suffix. With ``vocab``
    given, pieces outside the vocabulary are recursively re-split down to
    in-vocabulary pieces (or UNK at the character level).
    """
    out: List[str] = []
    for word in words:
        if not word:
            continue
        symbols = _encode_word(word, model)
        if vocab is None:
            out.extend(_surface(s, model.marker) for s in symbols)
        else:
            for s in symbols:
                _resplit_oov(s, model, vocab, out)
    return out


def strip_bpe(subwords: Sequence[str], marker: str = DEFAULT_MARKER) -> List[str]:
    """Join marker-suffixed pieces with their successors (inverse of apply)."""
    words: List[str] = []
    current: List[str] = []
    for piece in subwords:
        if piece.endswith(marker):
            current.append(piece[: -len(marker)])
        else:
            current.append(piece)
            words.append("".join(current))
            current = []
    if current:
        logger.warning("dangling continuation marker at sentence end; marker dropped")
        words.append("".join(current))
    return words


def build_vocab(
    sentences: Iterable[Sequence[str]],
    model: BpeModel,
    threshold: Optional[int] = None,
) -> Vocabulary:
    """Apply ``model`` to the corpus and build the thresholded subword vocabulary."""
    thr = model.vocab_threshold if threshold is None else threshold
    segmented = (apply_bpe(sent, model) for sent in sentences)
    return Vocabulary.from_corpus(segmented, threshold=thr)
