"""Linguistic factors: tagged-corpus ingestion, synset resolution and
alignment of word-level factors to the subword tokenization.

External formats:
  tagged corpus   CoNLL-U subset, blank-line-separated sentences with
                  tab-separated columns ID FORM LEMMA UPOS FEATS HEAD DEPREL
                  (extra columns ignored, ``#`` comment lines skipped)
  synset spans    TSV "sentence_index<TAB>char_start<TAB>char_end<TAB>synset_id",
                  offsets over the space-joined token forms
  factor files    one sentence per line, values space-separated, token-parallel
                  to the corpus file they accompany
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

logger = logging.getLogger(__name__)

# Universal Dependencies part-of-speech tags; used both to validate tagger
# output and as the backup factor value for tokens without a synset.
UPOS_TAGS = frozenset(
    "ADJ ADP ADV AUX CCONJ DET INTJ NOUN NUM PART PRON PROPN PUNCT SCONJ SYM VERB X".split()
)

SUBWORD_TAG_FACTOR = "subword_tags"


class FactorError(ValueError):
    """Factor streams violate an alignment or format contract."""


class ConlluParseError(FactorError):
    """Malformed line in a tagged corpus file."""


@dataclass(frozen=True)
class TaggedToken:
    form: str
    lemma: str
    upos: str
    feats: str = "_"
    head: int = 0
    deprel: str = "_"


@dataclass(frozen=True)
class SynsetSpan:
    """Character-offset span (0-based, end-exclusive) carrying a synset id."""

    char_start: int
    char_end: int
    synset_id: str

    def __post_init__(self):
        if self.char_start >= self.char_end:
            raise FactorError(
                f"span [{self.char_start}, {self.char_end}) is empty or reversed"
            )


class AlignmentStrategy(enum.Enum):
    REPEAT = "repeat"
    BPE_MARKER = "bpe-marker"
    SUBWORD_TAGS = "subword-tags"


@dataclass
class FactoredCorpus:
    """Parallel token streams: words plus any number of named factors.

    Every factor stream must be token-parallel to the word stream, sentence
    by sentence.
    """

    words: List[List[str]]
    factors: Dict[str, List[List[str]]] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name, streams in self.factors.items():
            if len(streams) != len(self.words):
                raise FactorError(
                    f"factor {name!r} has {len(streams)} sentences, corpus has {len(self.words)}"
                )
            for i, (w, f) in enumerate(zip(self.words, streams)):
                if len(w) != len(f):
                    raise FactorError(
                        f"factor {name!r}, sentence {i}: {len(f)} values for {len(w)} words"
                    )

    def __len__(self) -> int:
        return len(self.words)


# -- tagged-corpus ingestion ---------------------------------------------------


def parse_tagged(path) -> List[List[TaggedToken]]:
    """Parse a tagged corpus file into per-sentence token lists.

    Multiword-range ids ("1-2") and empty-node ids ("5.1") are skipped so
    the stream aligns with syntactic words. Unknown UPOS values are
    accepted with a warning.
    """
    sentences: List[List[TaggedToken]] = []
    current: List[TaggedToken] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                if current:
                    sentences.append(current)
                    current = []
                continue
            if line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) < 7:
                raise ConlluParseError(
                    f"{path}:{lineno}: expected >=7 tab-separated columns, got {len(cols)}"
                )
            tok_id, form, lemma, upos, feats, head, deprel = cols[:7]
            if "-" in tok_id or "." in tok_id:
                continue
            try:
                int(tok_id)
                head_idx = int(head)
            except ValueError as exc:
                raise ConlluParseError(f"{path}:{lineno}: non-integer ID/HEAD field") from exc
            if not form:
                raise ConlluParseError(f"{path}:{lineno}: empty FORM")
            if upos not in UPOS_TAGS:
                logger.warning("%s:%d: unknown UPOS tag %r", path, lineno, upos)
            current.append(
                TaggedToken(form=form, lemma=lemma, upos=upos, feats=feats, head=head_idx, deprel=deprel)
            )
    if current:
        sentences.append(current)
    return sentences


def ingest_tagged(path, corpus: Optional[Sequence[Sequence[str]]] = None) -> List[List[TaggedToken]]:
    """Parse a tagged corpus, optionally validating token counts against the
    parallel tokenized corpus."""
    sentences = parse_tagged(path)
    if corpus is not None:
        if len(sentences) != len(corpus):
            raise FactorError(
                f"tagged corpus has {len(sentences)} sentences, corpus has {len(corpus)}"
            )
        for i, (tagged, words) in enumerate(zip(sentences, corpus)):
            if len(tagged) != len(words):
                raise FactorError(
                    f"sentence {i}: tagged file has {len(tagged)} tokens, corpus line has {len(words)}"
                )
    return sentences


def factor_streams(tagged: Sequence[Sequence[TaggedToken]]) -> Dict[str, List[List[str]]]:
    """Extract the word-level factor streams from parsed tagged sentences."""
    return {
        "lemma": [[t.lemma for t in sent] for sent in tagged],
        "upos": [[t.upos for t in sent] for sent in tagged],
        "feats": [[t.feats for t in sent] for sent in tagged],
        "deprel": [[t.deprel for t in sent] for sent in tagged],
    }


# -- corpus chunking -------------------------------------------------------------


def chunk_corpus(sentences: Sequence[str], max_chars: int) -> List[List[str]]:
    """Greedily pack whole sentences into chunks of at most ``max_chars``
    characters (one separator character counted between sentences)."""
    for i, sent in enumerate(sentences):
        if len(sent) > max_chars:
            raise FactorError(
                f"sentence {i} has {len(sent)} characters, exceeding max_chars={max_chars}"
            )
    chunks: List[List[str]] = []
    current: List[str] = []
    size = 0
    for sent in sentences:
        extra = len(sent) if not current else len(sent) + 1
        if current and size + extra > max_chars:
            chunks.append(current)
            current, size = [], 0
            extra = len(sent)
        current.append(sent)
        size += extra
    if current:
        chunks.append(current)
    return chunks


# -- synset resolution -----------------------------------------------------------


def token_offsets(forms: Sequence[str]) -> List[Tuple[int, int]]:
    """Character ranges of each token in the space-joined sentence."""
    offsets = []
    pos = 0
    for form in forms:
        offsets.append((pos, pos + len(form)))
        pos += len(form) + 1
    return offsets


def resolve_synsets(
    tokens: Sequence[TaggedToken],
    spans: Sequence[SynsetSpan],
) -> List[str]:
    """Assign one synset (or UPOS backup) per token.

    Spans are snapped to the tokens they fully cover. Where spans compete
    for a token, the span covering more tokens wins; remaining ties go to
    the earlier-starting span, then to input order. Tokens left uncovered
    get their part-of-speech tag.
    """
    forms = [t.form for t in tokens]
    offsets = token_offsets(forms)
    sentence_len = offsets[-1][1] if offsets else 0

    # (token coverage, start, input order) per candidate span
    candidates: List[Tuple[List[int], SynsetSpan, int]] = []
    for order, span in enumerate(spans):
        if span.char_start < 0 or span.char_end > sentence_len:
            raise FactorError(
                f"span [{span.char_start}, {span.char_end}) outside sentence of length {sentence_len}"
            )
        covered = [
            i for i, (s, e) in enumerate(offsets) if s >= span.char_start and e <= span.char_end
        ]
        if not covered:
            logger.warning(
                "span [%d, %d) %r covers no full token; discarded",
                span.char_start,
                span.char_end,
                span.synset_id,
            )
            continue
        candidates.append((covered, span, order))

    result = [t.upos for t in tokens]
    best_key: List[Optional[Tuple[int, int, int]]] = [None] * len(tokens)
    for covered, span, order in candidates:
        key = (-len(covered), span.char_start, order)
        for i in covered:
            if best_key[i] is None or key < best_key[i]:
                best_key[i] = key
                result[i] = span.synset_id
    return result


def read_span_file(path) -> Dict[int, List[SynsetSpan]]:
    """Read the per-sentence synset span TSV."""
    spans: Dict[int, List[SynsetSpan]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FactorError(f"{path}:{lineno}: expected 4 tab-separated fields")
            try:
                sent_idx, start, end = int(parts[0]), int(parts[1]), int(parts[2])
            except ValueError as exc:
                raise FactorError(f"{path}:{lineno}: non-integer offset field") from exc
            spans.setdefault(sent_idx, []).append(SynsetSpan(start, end, parts[3]))
    return spans


# -- subword alignment -------------------------------------------------------------


def subword_group_sizes(subwords: Sequence[str], marker: str) -> List[int]:
    """Number of subword pieces per original word, recovered from markers."""
    sizes: List[int] = []
    count = 0
    for piece in subwords:
        count += 1
        if not piece.endswith(marker):
            sizes.append(count)
            count = 0
    if count:
        sizes.append(count)
    return sizes


def align_to_subwords(
    words: Sequence[str],
    values: Sequence[str],
    subwords: Sequence[str],
    strategy: AlignmentStrategy,
    marker: str = "@@",
) -> List[List[str]]:
    """Align one word-level factor stream to the subword stream.

    Returns a list of aligned streams: the factor values, plus the
    generated B/I/E/O position-tag stream for SUBWORD_TAGS. Every returned
    stream has exactly the subword stream's length.
    """
    if len(words) != len(values):
        raise FactorError(
            f"factor stream length {len(values)} != word stream length {len(words)}"
        )
    sizes = subword_group_sizes(subwords, marker)
    if len(sizes) != len(words):
        raise FactorError(
            f"subword stream decodes to {len(sizes)} words, expected {len(words)}"
        )

    aligned: List[str] = []
    if strategy is AlignmentStrategy.BPE_MARKER:
        for value, size in zip(values, sizes):
            aligned.extend([value + marker] * (size - 1))
            aligned.append(value)
    else:
        for value, size in zip(values, sizes):
            aligned.extend([value] * size)

    if strategy is AlignmentStrategy.SUBWORD_TAGS:
        tags: List[str] = []
        for size in sizes:
            if size == 1:
                tags.append("O")
            else:
                tags.extend(["B"] + ["I"] * (size - 2) + ["E"])
        return [aligned, tags]
    return [aligned]


# -- factor files -------------------------------------------------------------------


def read_factor_file(path) -> List[List[str]]:
    from .bpe import read_corpus

    return read_corpus(path)


def write_factor_file(path, streams: Sequence[Sequence[str]]) -> None:
    from .bpe import write_corpus

    write_corpus(path, streams)
