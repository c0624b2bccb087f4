"""Token-budget batching, label-smoothed cross-entropy and the optimizer loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .bpe import BOS_ID, EOS_ID, PAD_ID, Vocabulary
from .factors import FactoredCorpus
from .gradcheck import NumericalError
from .model import ModelConfig, Transformer, save_checkpoint
from .tensor import Tensor

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    token_batch: int = 4000
    label_smoothing: float = 0.1
    lr: float = 2e-3  # peak rate, reached at the end of warmup
    warmup_steps: int = 400
    max_steps: int = 1000
    seed: int = 1
    eval_every: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.token_batch < 1:
            raise ValueError("token_batch must be positive")


@dataclass
class Batch:
    src: Dict[str, np.ndarray]  # factor name -> (B, L) int ids
    src_pad: np.ndarray  # bool (B, L)
    tgt_in: np.ndarray  # (B, Lt): BOS + tokens
    tgt_out: np.ndarray  # (B, Lt): tokens + EOS
    tgt_pad: np.ndarray  # bool (B, Lt), True where tgt_out is padding
    indices: List[int]  # original sentence positions

    @property
    def padded_source_tokens(self) -> int:
        first = next(iter(self.src.values()))
        return int(first.shape[0] * first.shape[1])


def source_streams(corpus: FactoredCorpus) -> Dict[str, List[List[str]]]:
    """Factor name -> sentences, with the word stream under ``words``."""
    return {"words": corpus.words, **corpus.factors}


def build_vocabularies(
    corpus: FactoredCorpus,
    targets: Sequence[Sequence[str]],
    threshold: int = 0,
) -> Tuple[Dict[str, Vocabulary], Vocabulary]:
    src_vocabs = {
        name: Vocabulary.from_corpus(stream, threshold=threshold)
        for name, stream in source_streams(corpus).items()
    }
    tgt_vocab = Vocabulary.from_corpus(targets, threshold=threshold)
    return src_vocabs, tgt_vocab


def make_batches(
    corpus: FactoredCorpus,
    targets: Sequence[Sequence[str]],
    src_vocabs: Dict[str, Vocabulary],
    tgt_vocab: Vocabulary,
    token_batch: int,
) -> List[Batch]:
    """Pack length-sorted sentences so each batch's padded source token
    count stays within ``token_batch``. Every sentence lands in exactly one
    batch; factor streams are batched in lockstep with identical padding.
    """
    n = len(corpus.words)
    if len(targets) != n:
        raise TrainingError(f"{n} source sentences but {len(targets)} target sentences")
    lengths = [len(s) for s in corpus.words]
    for i, length in enumerate(lengths):
        if length > token_batch:
            raise TrainingError(
                f"sentence {i} has {length} tokens, larger than the {token_batch}-token budget"
            )
        if length == 0:
            raise TrainingError(f"sentence {i} is empty")

    order = sorted(range(n), key=lambda i: (lengths[i], i))
    groups: List[List[int]] = []
    current: List[int] = []
    cur_max = 0
    for i in order:
        new_max = max(cur_max, lengths[i])
        if current and (len(current) + 1) * new_max > token_batch:
            groups.append(current)
            current, cur_max = [], 0
            new_max = lengths[i]
        current.append(i)
        cur_max = new_max
    if current:
        groups.append(current)

    streams = source_streams(corpus)
    batches = []
    for group in groups:
        src_len = max(lengths[i] for i in group)
        tgt_len = max(len(targets[i]) for i in group) + 1  # +1 for BOS/EOS shift
        b = len(group)
        src = {
            name: np.full((b, src_len), PAD_ID, dtype=np.int64) for name in streams
        }
        src_pad = np.ones((b, src_len), dtype=bool)
        tgt_in = np.full((b, tgt_len), PAD_ID, dtype=np.int64)
        tgt_out = np.full((b, tgt_len), PAD_ID, dtype=np.int64)
        tgt_pad = np.ones((b, tgt_len), dtype=bool)
        for row, i in enumerate(group):
            L = lengths[i]
            for name, stream in streams.items():
                src[name][row, :L] = src_vocabs[name].encode(stream[i])
            src_pad[row, :L] = False
            t_ids = tgt_vocab.encode(targets[i])
            tgt_in[row, 0] = BOS_ID
            tgt_in[row, 1 : len(t_ids) + 1] = t_ids
            tgt_out[row, : len(t_ids)] = t_ids
            tgt_out[row, len(t_ids)] = EOS_ID
            tgt_pad[row, : len(t_ids) + 1] = False
        batches.append(Batch(src, src_pad, tgt_in, tgt_out, tgt_pad, list(group)))
    return batches


def label_smoothed_loss(
    logits: Tensor,
    targets: np.ndarray,
    eps: float,
    pad_id: int = PAD_ID,
) -> Tensor:
    """Cross-entropy against the smoothed target distribution.

    The smoothed distribution puts mass ``1-eps`` on the gold token and
    ``eps/(V-1)`` on every other vocabulary entry; the loss is averaged
    over non-pad target positions. ``eps=0`` is exactly negative
    log-likelihood.
    """
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {eps}")
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    mask = (targets != pad_id)
    count = int(mask.sum())
    if count == 0:
        raise TrainingError("batch contains only padding targets")

    logp = T.log_softmax(logits, axis=-1)
    gold = T.pick(logp, targets)
    if eps == 0.0:
        per_token = -gold
    else:
        rest = logp.sum(axis=-1) - gold
        per_token = -((1.0 - eps) * gold + (eps / (vocab - 1)) * rest)
    masked = per_token * Tensor(mask.astype(logits.dtype))
    return masked.sum() / count


def lr_at(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` at ``step == warmup``, then inverse-sqrt decay."""
    if warmup <= 0:
        return peak if step <= 0 else peak * math.sqrt(1.0 / step)
    if step <= warmup:
        return peak * step / warmup
    return peak * math.sqrt(warmup / step)


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, params: Dict[str, Tensor], beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correction1 = 1.0 - b1 ** self.t
        correction2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


@dataclass
class MetricsRow:
    step: int
    train_loss: float
    lr: float
    val_loss: Optional[float] = None


@dataclass
class TrainResult:
    steps: int
    metrics: List[MetricsRow] = field(default_factory=list)
    final_path: Optional[Path] = None
    best_path: Optional[Path] = None
    best_val: float = math.inf


def evaluate_loss(model: Transformer, batches: Sequence[Batch], eps: float) -> float:
    """Teacher-forced loss with dropout disabled, averaged over tokens."""
    total, tokens = 0.0, 0
    with T.no_grad():
        for batch in batches:
            logits = model.forward(batch.src, batch.tgt_in, batch.src_pad, batch.tgt_pad, rng=None)
            n = int((batch.tgt_out != PAD_ID).sum())
            total += float(label_smoothed_loss(logits, batch.tgt_out, eps).data) * n
            tokens += n
    return total / max(tokens, 1)


def write_metrics(path, rows: Sequence[MetricsRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step\ttrain_loss\tlr\tval_loss\n")
        for r in rows:
            val = f"{r.val_loss:.6f}" if r.val_loss is not None else ""
            fh.write(f"{r.step}\t{r.train_loss:.6f}\t{r.lr:.8f}\t{val}\n")


def train(
    model: Transformer,
    corpus: FactoredCorpus,
    targets: Sequence[Sequence[str]],
    src_vocabs: Dict[str, Vocabulary],
    tgt_vocab: Vocabulary,
    cfg: TrainConfig,
    val_corpus: Optional[FactoredCorpus] = None,
    val_targets: Optional[Sequence[Sequence[str]]] = None,
    out_dir: Optional[Path] = None,
    on_eval: Optional[Callable[[int, float, Optional[float]], bool]] = None,
) -> TrainResult:
    """Optimize ``model`` on the corpus; returns metrics and checkpoint paths.

    Batch order is reshuffled every epoch under the run seed, so two runs
    with the same seed produce identical loss curves. ``on_eval`` (called
    every ``eval_every`` steps with step, train loss, validation loss) can
    return True to stop early. The best checkpoint tracks a smoothed
    validation loss (exponential moving average), falling back to training
    loss when no validation set is given.
    """
    rng = np.random.default_rng(cfg.seed)
    batches = make_batches(corpus, targets, src_vocabs, tgt_vocab, cfg.token_batch)
    val_batches = None
    if val_corpus is not None and val_targets is not None:
        val_batches = make_batches(val_corpus, val_targets, src_vocabs, tgt_vocab, cfg.token_batch)

    optimizer = Adam(model.parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    result = TrainResult(steps=0)
    smoothed: Optional[float] = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    step = 0
    stop = False
    while step < cfg.max_steps and not stop:
        for batch_idx in rng.permutation(len(batches)):
            batch = batches[batch_idx]
            step += 1
            lr = lr_at(step, cfg.lr, cfg.warmup_steps)
            model.zero_grad()
            logits = model.forward(
                batch.src, batch.tgt_in, batch.src_pad, batch.tgt_pad,
                rng=rng if model.config.dropout > 0 else None,
            )
            loss = label_smoothed_loss(logits, batch.tgt_out, cfg.label_smoothing)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                raise NumericalError(
                    f"non-finite training loss at step {step} (batch {batch_idx})"
                )
            loss.backward()
            optimizer.step(lr)

            if step % cfg.eval_every == 0 or step == cfg.max_steps:
                val_loss = None
                if val_batches is not None:
                    val_loss = evaluate_loss(model, val_batches, cfg.label_smoothing)
                result.metrics.append(MetricsRow(step, loss_value, lr, val_loss))
                tracked = val_loss if val_loss is not None else loss_value
                smoothed = tracked if smoothed is None else 0.6 * smoothed + 0.4 * tracked
                if out_dir is not None and smoothed < result.best_val:
                    result.best_val = smoothed
                    result.best_path = out_dir / "best.npz"
                    save_checkpoint(result.best_path, model, src_vocabs, tgt_vocab)
                if on_eval is not None and on_eval(step, loss_value, val_loss):
                    stop = True
            if step >= cfg.max_steps or stop:
                break

    result.steps = step
    if out_dir is not None:
        result.final_path = out_dir / "final.npz"
        save_checkpoint(result.final_path, model, src_vocabs, tgt_vocab)
        write_metrics(out_dir / "metrics.tsv", result.metrics)
        if result.best_path is None:
            result.best_path = result.final_path
    return result
