"""Desk-scale factored neural machine translation toolkit."""

from .bleu import BleuResult, corpus_bleu
from .bpe import BpeModel, Vocabulary, apply_bpe, build_vocab, learn_bpe, strip_bpe
from .decoding import BeamHypothesis, beam_search, translate, translate_corpus
from .factors import (
    AlignmentStrategy,
    FactoredCorpus,
    SynsetSpan,
    TaggedToken,
    align_to_subwords,
    chunk_corpus,
    ingest_tagged,
    resolve_synsets,
)
from .gradcheck import GradCheckReport, grad_check
from .model import (
    Arch,
    Combine,
    ConfigError,
    EncoderOutput,
    FactorSpec,
    ModelConfig,
    Transformer,
    combine,
    load_checkpoint,
    positional_encoding,
    save_checkpoint,
)
from .tensor import Tensor, no_grad
from .training import (
    Adam,
    Batch,
    TrainConfig,
    label_smoothed_loss,
    lr_at,
    make_batches,
    train,
)

__version__ = "0.1.0"
