"""Toy transformer encoders used as frozen backbones.

Two builds compute the same function family but name their sub-modules
differently: convention ``"A"`` follows BERT, ``"B"`` follows T5. Every
sub-module is a :class:`~deltaplug.modtree.ModuleNode` whose forward takes the
hidden state as its first argument and returns one tensor, so any node can be
intercepted from outside.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, TokenIndexError
from .modtree import Container, ModuleNode
from .tensor import Tensor

MASK_FILL = -1e9
INIT_RANGE = 0.1
CONVENTIONS = ("A", "B")


@dataclass(frozen=True)
class ToyformerConfig:
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    n_layers: int = 2
    vocab: int = 64
    max_len: int = 16
    n_classes: int = 2
    seed: int = 0

    def validate(self):
        for name in ("d_model", "n_heads", "d_ff", "n_layers", "vocab", "max_len", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


class Linear(ModuleNode):
    def __init__(self, d_in, d_out, rng):
        super().__init__()
        self.add_param("weight", Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, (d_in, d_out)), requires_grad=True))
        self.add_param("bias", Tensor(np.zeros(d_out), requires_grad=True))

    def forward(self, h):
        return T.matmul(h, self.weight) + self.bias


class LayerNorm(ModuleNode):
    def __init__(self, d, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.add_param("weight", Tensor(np.ones(d), requires_grad=True))
        self.add_param("bias", Tensor(np.zeros(d), requires_grad=True))

    def forward(self, h):
        return T.layer_norm(h, self.weight, self.bias, self.eps)


class Embedding(ModuleNode):
    def __init__(self, n, d, rng):
        super().__init__()
        self.add_param("weight", Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, (n, d)), requires_grad=True))

    def forward(self, ids):
        return T.embedding_lookup(self.weight, ids)


def split_heads(x, n_heads):
    b, s, d = x.shape
    return T.transpose(T.reshape(x, (b, s, n_heads, d // n_heads)), 1, 2)


def merge_heads(x):
    b, h, s, dh = x.shape
    return T.reshape(T.transpose(x, 1, 2), (b, s, h * dh))


def attention_probs(q, k, n_heads, pad_mask):
    """Softmax attention weights of shape (batch, heads, q_len, k_len).

    Keys may carry extra leading rows beyond the query length; those
    positions are always attendable.
    """
    qh, kh = split_heads(q, n_heads), split_heads(k, n_heads)
    dh = qh.shape[-1]
    scores = T.matmul(qh, T.transpose(kh, -1, -2)) / math.sqrt(dh)
    k_len = k.shape[1]
    keep = np.asarray(pad_mask, dtype=bool)
    extra = k_len - keep.shape[1]
    if extra > 0:
        keep = np.concatenate([np.ones((keep.shape[0], extra), dtype=bool), keep], axis=1)
    scores = T.masked_fill(scores, keep[:, None, None, :], MASK_FILL)
    return T.softmax(scores)


def attend(q, k, v, n_heads, pad_mask):
    if k.shape != v.shape:
        raise DimensionError(f"key {k.shape} and value {v.shape} disagree")
    probs = attention_probs(q, k, n_heads, pad_mask)
    return merge_heads(T.matmul(probs, split_heads(v, n_heads)))


# ---------------------------------------------------------------- convention A (BERT)

class BertEmbeddings(ModuleNode):
    def __init__(self, cfg, rng):
        super().__init__()
        self.add_child("word_embeddings", Embedding(cfg.vocab, cfg.d_model, rng))
        self.add_child("position_embeddings", Embedding(cfg.max_len, cfg.d_model, rng))
        self.add_child("LayerNorm", LayerNorm(cfg.d_model))

    def forward(self, ids):
        pos = np.broadcast_to(np.arange(ids.shape[1]), ids.shape)
        return self.LayerNorm(self.word_embeddings(ids) + self.position_embeddings(pos))


class BertSelfAttention(ModuleNode):
    def __init__(self, cfg, rng):
        super().__init__()
        self.n_heads = cfg.n_heads
        for name in ("query", "key", "value"):
            self.add_child(name, Linear(cfg.d_model, cfg.d_model, rng))

    def probs(self, h, pad_mask):
        return attention_probs(self.query(h), self.key(h), self.n_heads, pad_mask)

    def forward(self, h, pad_mask):
        return attend(self.query(h), self.key(h), self.value(h), self.n_heads, pad_mask)


class BertResidualOutput(ModuleNode):
    def __init__(self, d_in, d_model, rng):
        super().__init__()
        self.add_child("dense", Linear(d_in, d_model, rng))
        self.add_child("LayerNorm", LayerNorm(d_model))

    def forward(self, h, residual):
        return self.LayerNorm(self.dense(h) + residual)


class BertAttention(ModuleNode):
    def __init__(self, cfg, rng):
        super().__init__()
        self.add_child("self", BertSelfAttention(cfg, rng))
        self.add_child("output", BertResidualOutput(cfg.d_model, cfg.d_model, rng))

    def forward(self, h, pad_mask):
        return self.output(self.children["self"](h, pad_mask), h)


class BertIntermediate(ModuleNode):
    def __init__(self, cfg, rng):
        super().__init__()
        self.add_child("dense", Linear(cfg.d_model, cfg.d_ff, rng))

    def forward(self, h):
        return T.gelu(self.dense(h))


class BertLayer(ModuleNode):
    def __init__(self, cfg, rng):
        super().__init__()
        self.add_child("attention", BertAttention(cfg, rng))
        self.add_child("intermediate", BertIntermediate(cfg, rng))
        self.add_child("output", BertResidualOutput(cfg.d_ff, cfg.d_model, rng))

    def forward(self, h, pad_mask):
        a = self.attention(h, pad_mask)
        return self.output(self.intermediate(a), a)


class Encoder(ModuleNode):
    """Runs the numbered children of ``stack_name`` in order."""

    stack_name = "layer"

    def layers(self):
        stack = self.children[self.stack_name]
        return [child for name, child in stack.children.items() if name.isdigit()]

    def forward(self, h, pad_mask):
        for layer in self.layers():
            h = layer(h, pad_mask)
        return h


class Pooler(ModuleNode):
    def __init__(self, cfg, rng):
        super().__init__()
        self.add_child("dense", Linear(cfg.d_model, cfg.d_model, rng))

    def forward(self, h):
        return T.tanh(self.dense(T.select_row(h, 0)))


class Toyformer(ModuleNode):
    """Root of a toy encoder classifier; ``model(ids, pad_mask) -> logits``."""

    def __init__(self, cfg, convention):
        super().__init__()
        self.local_name = "toyformer"
        self.config = cfg
        self.convention = convention

    def check_inputs(self, ids, pad_mask):
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise DimensionError(f"token ids must be (batch, seq), got {ids.shape}")
        if ids.dtype.kind not in "iu":
            raise TypeError(f"token ids must be integers, got {ids.dtype}")
        if ids.shape[1] > self.config.max_len:
            raise TokenIndexError(f"sequence length {ids.shape[1]} exceeds max_len {self.config.max_len}",
                                  ids.shape[1])
        if pad_mask is None:
            pad_mask = np.ones(ids.shape, dtype=bool)
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if pad_mask.shape != ids.shape:
            raise DimensionError(f"pad mask {pad_mask.shape} vs ids {ids.shape}")
        return ids, pad_mask

    def pseudo_input(self):
        return np.zeros((1, 4), dtype=np.int64), np.ones((1, 4), dtype=bool)


class BertToyformer(Toyformer):
    def __init__(self, cfg, rng):
        super().__init__(cfg, "A")
        self.add_child("embeddings", BertEmbeddings(cfg, rng))
        encoder = self.add_child("encoder", Encoder())
        stack = encoder.add_child("layer", Container())
        for i in range(cfg.n_layers):
            stack.add_child(str(i), BertLayer(cfg, rng))
        self.add_child("pooler", Pooler(cfg, rng))
        self.add_child("classifier", Linear(cfg.d_model, cfg.n_classes, rng))

    def forward(self, ids, pad_mask=None):
        ids, pad_mask = self.check_inputs(ids, pad_mask)
        h = self.embeddings(ids)
        h = self.encoder(h, pad_mask)
        return self.classifier(self.pooler(h))


# ---------------------------------------------------------------- convention B (T5)

class T5SelfAttention(ModuleNode):
    def __init__(self, cfg, rng):
        super().__init__()
        self.n_heads = cfg.n_heads
        for name in ("q", "k", "v", "o"):
            self.add_child(name, Linear(cfg.d_model, cfg.d_model, rng))

    def probs(self, h, pad_mask):
        return attention_probs(self.q(h), self.k(h), self.n_heads, pad_mask)

    def forward(self, h, pad_mask):
        return self.o(attend(self.q(h), self.k(h), self.v(h), self.n_heads, pad_mask))


class T5LayerSelfAttention(ModuleNode):
    def __init__(self, cfg, rng):
        super().__init__()
        self.add_child("SelfAttention", T5SelfAttention(cfg, rng))
        self.add_child("layer_norm", LayerNorm(cfg.d_model))

    def forward(self, h, pad_mask):
        return self.layer_norm(h + self.SelfAttention(h, pad_mask))


class T5DenseReluDense(ModuleNode):
    def __init__(self, cfg, rng):
        super().__init__()
        self.add_child("wi", Linear(cfg.d_model, cfg.d_ff, rng))
        self.add_child("wo", Linear(cfg.d_ff, cfg.d_model, rng))

    def forward(self, h):
        return self.wo(T.relu(self.wi(h)))


class T5LayerFF(ModuleNode):
    def __init__(self, cfg, rng):
        super().__init__()
        self.add_child("DenseReluDense", T5DenseReluDense(cfg, rng))
        self.add_child("layer_norm", LayerNorm(cfg.d_model))

    def forward(self, h):
        return self.layer_norm(h + self.DenseReluDense(h))


class T5Block(ModuleNode):
    def __init__(self, cfg, rng):
        super().__init__()
        sub = self.add_child("layer", Container())
        sub.add_child("0", T5LayerSelfAttention(cfg, rng))
        sub.add_child("1", T5LayerFF(cfg, rng))

    def forward(self, h, pad_mask):
        sub = self.children["layer"].children
        return sub["1"](sub["0"](h, pad_mask))


class T5Encoder(Encoder):
    stack_name = "block"

    def __init__(self, cfg, rng):
        super().__init__()
        self.add_child("embed_positions", Embedding(cfg.max_len, cfg.d_model, rng))
        self.add_child("embed_layer_norm", LayerNorm(cfg.d_model))
        stack = self.add_child("block", Container())
        for i in range(cfg.n_layers):
            stack.add_child(str(i), T5Block(cfg, rng))

    def forward(self, h, pad_mask):
        pos = np.broadcast_to(np.arange(h.shape[1]), h.shape[:2])
        h = self.embed_layer_norm(h + self.embed_positions(pos))
        return super().forward(h, pad_mask)


class T5Toyformer(Toyformer):
    def __init__(self, cfg, rng):
        super().__init__(cfg, "B")
        # Creation order matches convention A so both draw identical weights.
        self.add_child("shared", Embedding(cfg.vocab, cfg.d_model, rng))
        self.add_child("encoder", T5Encoder(cfg, rng))
        self.add_child("pooler", Pooler(cfg, rng))
        self.add_child("classifier", Linear(cfg.d_model, cfg.n_classes, rng))

    def forward(self, ids, pad_mask=None):
        ids, pad_mask = self.check_inputs(ids, pad_mask)
        h = self.encoder(self.shared(ids), pad_mask)
        return self.classifier(self.pooler(h))


def build_toyformer(config=None, convention="A"):
    config = config or ToyformerConfig()
    config.validate()
    if convention not in CONVENTIONS:
        raise ConfigError(f"unknown naming convention {convention!r}; expected one of {CONVENTIONS}")
    rng = np.random.default_rng(config.seed)
    if convention == "A":
        return BertToyformer(config, rng)
    return T5Toyformer(config, rng)
