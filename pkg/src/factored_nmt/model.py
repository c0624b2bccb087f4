"""Transformer encoder-decoder over factored source input.

Two source-side variants share a standard decoder:

  one_encoder   every factor (the words included) has its own embedding
                table; the embedding vectors are combined, positional
                encoding is added once to the combined vector, and a single
                shared encoder stack runs on top.
  n_encoders    every factor gets its own full encoder (embeddings,
                positional encoding, stack); the encoder outputs are
                combined.

Combination is elementwise summation (dimension-preserving; all inputs
must share one width) or feature-axis concatenation (widths add up). The
decoder always runs at the combined encoder output width. Layers use the
original post-norm residual arrangement; the target side is never
factored.
"""

from __future__ import annotations

import enum
import json
import math
import zipfile
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .bpe import Vocabulary
from .factors import SUBWORD_TAG_FACTOR
from .tensor import NEG_INF, Tensor


class ConfigError(ValueError):
    """Model or run configuration violates a structural constraint."""


class Arch(enum.Enum):
    ONE_ENCODER = "1enc"
    N_ENCODERS = "nenc"


class Combine(enum.Enum):
    SUM = "sum"
    CONCAT = "concat"


@dataclass(frozen=True)
class FactorSpec:
    name: str
    vocab_size: int
    embed_dim: int


@dataclass(frozen=True)
class ModelConfig:
    factors: Tuple[FactorSpec, ...]
    tgt_vocab_size: int
    arch: Arch = Arch.ONE_ENCODER
    combine: Combine = Combine.SUM
    layers_enc: int = 2
    layers_dec: int = 2
    heads: int = 2
    d_model: int = 64
    d_ffn: int = 128
    dropout: float = 0.1
    max_len: int = 256

    def __post_init__(self):
        if not self.factors:
            raise ConfigError("at least one source factor (the words) is required")
        names = [f.name for f in self.factors]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate factor names: {names}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        dims = [f.embed_dim for f in self.factors]
        if self.combine is Combine.SUM and any(d != self.d_model for d in dims):
            raise ConfigError(
                "summation requires every factor embedding to share the model "
                f"dimensionality {self.d_model}, got {dims}"
            )
        if self.arch is Arch.ONE_ENCODER:
            if self.combine is Combine.CONCAT and sum(dims) != self.d_model:
                raise ConfigError(
                    f"concatenated factor embeddings ({sum(dims)}) must fill the "
                    f"encoder width d_model={self.d_model}"
                )
            self._check_attention_dim(self.d_model)
        else:
            if SUBWORD_TAG_FACTOR in names:
                raise ConfigError(
                    "subword position tags are only usable with the single-encoder "
                    "architecture, not with one encoder per factor"
                )
            for f in self.factors:
                self._check_attention_dim(f.embed_dim, what=f"factor {f.name!r} encoder")
        self._check_attention_dim(self.decoder_dim, what="decoder")

    def _check_attention_dim(self, dim: int, what: str = "encoder") -> None:
        if dim % self.heads != 0:
            raise ConfigError(f"{what} width {dim} not divisible by {self.heads} heads")
        if dim % 2 != 0:
            raise ConfigError(f"{what} width {dim} is odd; positional encoding needs an even dim")

    @property
    def encoder_output_dim(self) -> int:
        if self.combine is Combine.SUM:
            return self.d_model
        return sum(f.embed_dim for f in self.factors)

    @property
    def decoder_dim(self) -> int:
        # the decoder embedding size always matches the encoder output size
        return self.encoder_output_dim

    def to_dict(self) -> dict:
        return {
            "factors": [[f.name, f.vocab_size, f.embed_dim] for f in self.factors],
            "tgt_vocab_size": self.tgt_vocab_size,
            "arch": self.arch.value,
            "combine": self.combine.value,
            "layers_enc": self.layers_enc,
            "layers_dec": self.layers_dec,
            "heads": self.heads,
            "d_model": self.d_model,
            "d_ffn": self.d_ffn,
            "dropout": self.dropout,
            "max_len": self.max_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            factors=tuple(FactorSpec(*f) for f in d["factors"]),
            tgt_vocab_size=d["tgt_vocab_size"],
            arch=Arch(d["arch"]),
            combine=Combine(d["combine"]),
            layers_enc=d["layers_enc"],
            layers_dec=d["layers_dec"],
            heads=d["heads"],
            d_model=d["d_model"],
            d_ffn=d["d_ffn"],
            dropout=d["dropout"],
            max_len=d["max_len"],
        )


@dataclass
class EncoderOutput:
    states: Tensor  # (batch, src_len, encoder_output_dim)
    src_pad: np.ndarray  # bool (batch, src_len), True at padding


# -- building blocks ----------------------------------------------------------


def positional_encoding(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal position table: sin on even feature indices, cos on odd."""
    if dim % 2 != 0:
        raise ConfigError(f"positional encoding requires an even dimension, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freqs = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * freqs)
    table[:, 1::2] = np.cos(pos * freqs)
    return table.astype(dtype)


def combine(vectors: Sequence[Tensor], strategy: Combine) -> Tensor:
    """Merge per-factor representations in declaration order."""
    if not vectors:
        raise ConfigError("combine needs at least one input stream")
    if strategy is Combine.SUM:
        dims = {v.shape[-1] for v in vectors}
        if len(dims) > 1:
            raise ConfigError(
                f"summation requires all inputs to share the same dimensionality, got {sorted(dims)}"
            )
        out = vectors[0]
        for v in vectors[1:]:
            out = out + v
        return out
    return T.concat(list(vectors), axis=-1)


def padding_bias(pad: np.ndarray, dtype) -> np.ndarray:
    """(B, L) bool pad flags -> (B, 1, 1, L) additive attention bias."""
    return np.where(pad[:, None, None, :], NEG_INF, 0.0).astype(dtype)


def causal_bias(length: int, dtype) -> np.ndarray:
    """(1, 1, L, L) additive bias hiding positions after the query."""
    mask = np.triu(np.full((length, length), NEG_INF), k=1)
    return mask[None, None].astype(dtype)


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype):
        bound = 1.0 / math.sqrt(d_in)
        self.w = Tensor(rng.uniform(-bound, bound, (d_in, d_out)).astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.w) + self.b

    def parameters(self) -> Dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


class Embedding:
    """Lookup table scaled by sqrt(dim), as in the original architecture."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator, dtype):
        bound = 1.0 / math.sqrt(dim)
        self.table = Tensor(
            rng.uniform(-bound, bound, (vocab_size, dim)).astype(dtype), requires_grad=True
        )
        self._scale = math.sqrt(dim)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.table, ids) * self._scale

    def parameters(self) -> Dict[str, Tensor]:
        return {"table": self.table}


class LayerNorm:
    def __init__(self, dim: int, dtype):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)

    def parameters(self) -> Dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}


class MultiHeadAttention:
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype):
        if dim % heads != 0:
            raise ConfigError(f"attention width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(dim, dim, rng, dtype)
        self.wk = Linear(dim, dim, rng, dtype)
        self.wv = Linear(dim, dim, rng, dtype)
        self.wo = Linear(dim, dim, rng, dtype)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray]) -> Tensor:
        ctx = T.multi_head_attention(self.wq(q), self.wk(k), self.wv(v), self.heads, mask)
        return self.wo(ctx)

    def parameters(self) -> Dict[str, Tensor]:
        out = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.update(_prefixed(name, lin.parameters()))
        return out


class FeedForward:
    def __init__(self, dim: int, d_ffn: int, rng: np.random.Generator, dtype):
        self.lin1 = Linear(dim, d_ffn, rng, dtype)
        self.lin2 = Linear(d_ffn, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(T.relu(self.lin1(x)))

    def parameters(self) -> Dict[str, Tensor]:
        return {**_prefixed("lin1", self.lin1.parameters()), **_prefixed("lin2", self.lin2.parameters())}


class EncoderLayer:
    def __init__(self, dim: int, heads: int, d_ffn: int, dropout: float, rng, dtype):
        self.self_attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, d_ffn, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.dropout = dropout

    def __call__(self, x: Tensor, mask: Optional[np.ndarray], rng) -> Tensor:
        x = self.norm1(x + T.dropout(self.self_attn(x, x, x, mask), self.dropout, rng))
        x = self.norm2(x + T.dropout(self.ffn(x), self.dropout, rng))
        return x

    def parameters(self) -> Dict[str, Tensor]:
        out = {}
        for name, mod in (("self_attn", self.self_attn), ("norm1", self.norm1),
                          ("ffn", self.ffn), ("norm2", self.norm2)):
            out.update(_prefixed(name, mod.parameters()))
        return out


class DecoderLayer:
    def __init__(self, dim: int, heads: int, d_ffn: int, dropout: float, rng, dtype):
        self.self_attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.cross_attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, d_ffn, rng, dtype)
        self.norm3 = LayerNorm(dim, dtype)
        self.dropout = dropout

    def __call__(self, x, enc_states, self_mask, cross_mask, rng) -> Tensor:
        x = self.norm1(x + T.dropout(self.self_attn(x, x, x, self_mask), self.dropout, rng))
        x = self.norm2(x + T.dropout(self.cross_attn(x, enc_states, enc_states, cross_mask), self.dropout, rng))
        x = self.norm3(x + T.dropout(self.ffn(x), self.dropout, rng))
        return x

    def parameters(self) -> Dict[str, Tensor]:
        out = {}
        for name, mod in (("self_attn", self.self_attn), ("norm1", self.norm1),
                          ("cross_attn", self.cross_attn), ("norm2", self.norm2),
                          ("ffn", self.ffn), ("norm3", self.norm3)):
            out.update(_prefixed(name, mod.parameters()))
        return out


class EncoderStack:
    def __init__(self, dim: int, layers: int, heads: int, d_ffn: int, dropout: float, rng, dtype):
        self.layers = [EncoderLayer(dim, heads, d_ffn, dropout, rng, dtype) for _ in range(layers)]

    def __call__(self, x: Tensor, mask: Optional[np.ndarray], rng) -> Tensor:
        for layer in self.layers:
            x = layer(x, mask, rng)
        return x

    def parameters(self) -> Dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(_prefixed(f"layers.{i}", layer.parameters()))
        return out


def _prefixed(prefix: str, params: Dict[str, Tensor]) -> Dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


# -- the model -----------------------------------------------------------------


class Transformer:
    """Factored encoder-decoder; construction is deterministic per seed."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        c = config

        self.src_embeddings: Dict[str, Embedding] = {}
        self.encoders: Dict[str, EncoderStack] = {}
        self.enc_pe: Dict[str, np.ndarray] = {}
        if c.arch is Arch.ONE_ENCODER:
            for f in c.factors:
                self.src_embeddings[f.name] = Embedding(f.vocab_size, f.embed_dim, rng, self.dtype)
            self.encoder = EncoderStack(c.d_model, c.layers_enc, c.heads, c.d_ffn, c.dropout, rng, self.dtype)
            self.pe = positional_encoding(c.max_len, c.d_model, self.dtype)
        else:
            self.encoder = None
            for f in c.factors:
                self.src_embeddings[f.name] = Embedding(f.vocab_size, f.embed_dim, rng, self.dtype)
                self.encoders[f.name] = EncoderStack(
                    f.embed_dim, c.layers_enc, c.heads, c.d_ffn, c.dropout, rng, self.dtype
                )
                self.enc_pe[f.name] = positional_encoding(c.max_len, f.embed_dim, self.dtype)

        d_dec = c.decoder_dim
        self.tgt_embedding = Embedding(c.tgt_vocab_size, d_dec, rng, self.dtype)
        self.dec_pe = positional_encoding(c.max_len, d_dec, self.dtype)
        self.decoder_layers = [
            DecoderLayer(d_dec, c.heads, c.d_ffn, c.dropout, rng, self.dtype)
            for _ in range(c.layers_dec)
        ]
        self.out_proj = Linear(d_dec, c.tgt_vocab_size, rng, self.dtype)

    # -- parameters ------------------------------------------------------------

    def parameters(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for name, emb in self.src_embeddings.items():
            out.update(_prefixed(f"src_emb.{name}", emb.parameters()))
        if self.encoder is not None:
            out.update(_prefixed("encoder", self.encoder.parameters()))
        for name, stack in self.encoders.items():
            out.update(_prefixed(f"encoders.{name}", stack.parameters()))
        out.update(_prefixed("tgt_emb", self.tgt_embedding.parameters()))
        for i, layer in enumerate(self.decoder_layers):
            out.update(_prefixed(f"decoder.layers.{i}", layer.parameters()))
        out.update(_prefixed("out_proj", self.out_proj.parameters()))
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def load_parameters(self, source: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = self.parameters()
        for name, tensor in own.items():
            if name not in source:
                if strict:
                    raise CheckpointError(f"missing parameter {name!r}")
                continue
            arr = np.asarray(source[name])
            if arr.shape != tensor.data.shape:
                raise CheckpointError(
                    f"parameter {name!r}: stored shape {arr.shape} != expected {tensor.data.shape}"
                )
            tensor.data = arr.astype(self.dtype, copy=True)

    # -- forward ---------------------------------------------------------------

    def _check_source(self, src: Dict[str, np.ndarray]) -> None:
        names = [f.name for f in self.config.factors]
        missing = [n for n in names if n not in src]
        if missing:
            raise ValueError(f"missing source factor streams: {missing}")
        shapes = {n: np.asarray(src[n]).shape for n in names}
        if len(set(shapes.values())) != 1:
            raise ValueError(f"source factor streams must share one shape, got {shapes}")

    def encode(
        self,
        src: Dict[str, np.ndarray],
        src_pad: Optional[np.ndarray] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> EncoderOutput:
        """Run the factored source side. ``src`` maps factor name -> (B, L) ids."""
        self._check_source(src)
        c = self.config
        first = np.asarray(src[c.factors[0].name])
        batch, length = first.shape
        if length > c.max_len:
            raise ValueError(f"source length {length} exceeds max_len {c.max_len}")
        if src_pad is None:
            src_pad = np.zeros((batch, length), dtype=bool)
        bias = padding_bias(src_pad, self.dtype)

        if c.arch is Arch.ONE_ENCODER:
            embedded = [self.src_embeddings[f.name](np.asarray(src[f.name])) for f in c.factors]
            x = combine(embedded, c.combine)
            # positional encoding goes on the combined vector, not on the
            # individual factor embeddings: combining does not change the
            # sequence length, so relative positions are unchanged
            x = x + Tensor(self.pe[:length])
            x = T.dropout(x, c.dropout, rng)
            states = self.encoder(x, bias, rng)
        else:
            outputs = []
            for f in c.factors:
                x = self.src_embeddings[f.name](np.asarray(src[f.name]))
                x = x + Tensor(self.enc_pe[f.name][:length])
                x = T.dropout(x, c.dropout, rng)
                outputs.append(self.encoders[f.name](x, bias, rng))
            states = combine(outputs, c.combine)
        return EncoderOutput(states=states, src_pad=src_pad)

    def decode(
        self,
        enc: EncoderOutput,
        tgt_in: np.ndarray,
        tgt_pad: Optional[np.ndarray] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """Next-token logits for every prefix position (causal self-attention)."""
        tgt_in = np.asarray(tgt_in)
        batch, length = tgt_in.shape
        if length > self.config.max_len:
            raise ValueError(f"target prefix length {length} exceeds max_len {self.config.max_len}")
        self_mask = causal_bias(length, self.dtype)
        if tgt_pad is not None:
            self_mask = self_mask + padding_bias(tgt_pad, self.dtype)
        cross_mask = padding_bias(enc.src_pad, self.dtype)

        y = self.tgt_embedding(tgt_in)
        y = y + Tensor(self.dec_pe[:length])
        y = T.dropout(y, self.config.dropout, rng)
        for layer in self.decoder_layers:
            y = layer(y, enc.states, self_mask, cross_mask, rng)
        return self.out_proj(y)

    def forward(
        self,
        src: Dict[str, np.ndarray],
        tgt_in: np.ndarray,
        src_pad: Optional[np.ndarray] = None,
        tgt_pad: Optional[np.ndarray] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        enc = self.encode(src, src_pad, rng)
        return self.decode(enc, tgt_in, tgt_pad, rng)


# -- checkpoints -----------------------------------------------------------------


CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable, incomplete, or inconsistent."""


def save_checkpoint(
    path,
    model: Transformer,
    src_vocabs: Optional[Dict[str, Vocabulary]] = None,
    tgt_vocab: Optional[Vocabulary] = None,
) -> None:
    """Write a self-contained, versioned model container."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "dtype": np.dtype(model.dtype).name,
        "src_vocabs": {n: v.tokens for n, v in (src_vocabs or {}).items()} or None,
        "tgt_vocab": tgt_vocab.tokens if tgt_vocab is not None else None,
    }
    arrays = {f"param/{name}": t.data for name, t in model.parameters().items()}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> Tuple[Transformer, Optional[Dict[str, Vocabulary]], Optional[Vocabulary]]:
    """Rebuild the model (and vocabularies, when stored) from a checkpoint."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            files = dict(npz)
    except (OSError, ValueError, zipfile.BadZipFile, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "meta" not in files:
        raise CheckpointError(f"checkpoint {path} has no metadata record")
    meta = json.loads(str(files["meta"][()]))
    version = meta.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    config = ModelConfig.from_dict(meta["config"])
    model = Transformer(config, seed=0, dtype=np.dtype(meta["dtype"]))
    params = {k[len("param/"):]: v for k, v in files.items() if k.startswith("param/")}
    model.load_parameters(params, strict=True)

    src_vocabs = None
    if meta.get("src_vocabs"):
        src_vocabs = {n: Vocabulary.from_token_list(toks) for n, toks in meta["src_vocabs"].items()}
    tgt_vocab = Vocabulary.from_token_list(meta["tgt_vocab"]) if meta.get("tgt_vocab") else None
    return model, src_vocabs, tgt_vocab
