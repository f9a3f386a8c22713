"""The two towers.

CollaborativeEncoder turns per-field integer ids into a dense representation
via one embedding table per field followed by a feature-interaction backbone
(autoint: stacked multi-head self-attention over fields; dcn: cross network in
parallel with an MLP; mlp: plain stack). TextEncoder is a compact transformer
over prompt token ids with mean pooling of the unmasked last hidden states.

All parameters live in a shared ParamStore under dotted prefixes; layers look
their tensors up by name at call time so optimizer updates are always visible.
"""

from __future__ import annotations

import warnings
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DTensor
from .config import ModelConfig, TextConfig
from .data import Batch, FeatureSchema
from .exceptions import ShapeError, UsageError
from .params import ParamStore, xavier_uniform


class Linear:
    def __init__(self, store: ParamStore, prefix: str, d_in: int, d_out: int,
                 rng, bias: bool = True):
        store.add(f"{prefix}.w", xavier_uniform(rng, d_in, d_out))
        if bias:
            store.add(f"{prefix}.b", np.zeros(d_out))
        self.store = store
        self.prefix = prefix
        self.bias = bias
        self.d_in = d_in
        self.d_out = d_out

    def __call__(self, x: DTensor) -> DTensor:
        out = ad.matmul(x, self.store[f"{self.prefix}.w"])
        if self.bias:
            out = ad.add(out, self.store[f"{self.prefix}.b"])
        return out


class BatchNorm1d:
    def __init__(self, store: ParamStore, prefix: str, dim: int):
        store.add(f"{prefix}.gamma", np.ones(dim))
        store.add(f"{prefix}.beta", np.zeros(dim))
        store.add_buffer(f"{prefix}.running_mean", np.zeros(dim))
        store.add_buffer(f"{prefix}.running_var", np.ones(dim))
        self.store = store
        self.prefix = prefix

    def __call__(self, x: DTensor, train: bool) -> DTensor:
        s, p = self.store, self.prefix
        return ad.batch_norm(x, s[f"{p}.gamma"], s[f"{p}.beta"],
                             s.buffer(f"{p}.running_mean"),
                             s.buffer(f"{p}.running_var"), train=train)


class LayerNorm:
    def __init__(self, store: ParamStore, prefix: str, dim: int):
        store.add(f"{prefix}.gamma", np.ones(dim))
        store.add(f"{prefix}.beta", np.zeros(dim))
        self.store = store
        self.prefix = prefix

    def __call__(self, x: DTensor) -> DTensor:
        s, p = self.store, self.prefix
        return ad.layer_norm(x, s[f"{p}.gamma"], s[f"{p}.beta"])


class MLPStack:
    """linear -> batch norm -> relu -> dropout, repeated over `hidden`."""

    def __init__(self, store, prefix, d_in, hidden, rng,
                 batch_norm: bool = True, dropout: float = 0.0):
        self.layers = []
        self.norms = []
        self.dropout = dropout
        d = d_in
        for i, h in enumerate(hidden):
            # bias is redundant under batch norm (beta plays that role)
            self.layers.append(Linear(store, f"{prefix}.l{i}", d, h, rng,
                                      bias=not batch_norm))
            self.norms.append(BatchNorm1d(store, f"{prefix}.bn{i}", h)
                              if batch_norm else None)
            d = h
        self.d_out = d

    def __call__(self, x: DTensor, train: bool, rng=None) -> DTensor:
        for lin, norm in zip(self.layers, self.norms):
            x = lin(x)
            if norm is not None:
                x = norm(x, train)
            x = ad.relu(x)
            if self.dropout > 0.0:
                x = ad.dropout(x, self.dropout, train=train, rng=rng)
        return x


def scaled_attention(q: DTensor, k: DTensor, v: DTensor,
                     additive_mask: Optional[np.ndarray] = None):
    """Scaled dot-product attention over the last two axes.

    q, k, v: (..., L, d_head). Returns (context (..., L, d_head),
    weights (..., L, L)); weights rows sum to 1 over keys.
    """
    d_head = q.shape[-1]
    axes = tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2)
    scores = ad.matmul(q, ad.transpose(k, axes))
    scores = ad.mul(scores, DTensor(1.0 / np.sqrt(d_head)))
    if additive_mask is not None:
        scores = ad.add(scores, DTensor(additive_mask))
    weights = ad.softmax(scores, axis=scores.data.ndim - 1)
    return ad.matmul(weights, v), weights


def _split_heads(x: DTensor, n_heads: int, d_head: int) -> DTensor:
    n, length = x.shape[0], x.shape[1]
    x = ad.reshape(x, (n, length, n_heads, d_head))
    return ad.transpose(x, (0, 2, 1, 3))  # (N, H, L, d_head)


def _merge_heads(x: DTensor) -> DTensor:
    n, h, length, d_head = x.shape
    x = ad.transpose(x, (0, 2, 1, 3))
    return ad.reshape(x, (n, length, h * d_head))


class FieldAttention:
    """One multi-head self-attention interaction layer over field embeddings,
    with a residual projection and relu (AutoInt-style)."""

    def __init__(self, store, prefix, d_in, n_heads, d_head, rng):
        d_out = n_heads * d_head
        self.q = Linear(store, f"{prefix}.q", d_in, d_out, rng, bias=False)
        self.k = Linear(store, f"{prefix}.k", d_in, d_out, rng, bias=False)
        self.v = Linear(store, f"{prefix}.v", d_in, d_out, rng, bias=False)
        self.res = Linear(store, f"{prefix}.res", d_in, d_out, rng, bias=False)
        self.n_heads = n_heads
        self.d_head = d_head
        self.d_out = d_out

    def __call__(self, x: DTensor) -> DTensor:
        q = _split_heads(self.q(x), self.n_heads, self.d_head)
        k = _split_heads(self.k(x), self.n_heads, self.d_head)
        v = _split_heads(self.v(x), self.n_heads, self.d_head)
        ctx, _ = scaled_attention(q, k, v)
        return ad.relu(ad.add(_merge_heads(ctx), self.res(x)))


class CrossLayer:
    """x_{l+1} = x0 * (x_l w) + b + x_l, bit-wise feature crossing."""

    def __init__(self, store, prefix, dim, rng):
        store.add(f"{prefix}.w", xavier_uniform(rng, dim, 1))
        store.add(f"{prefix}.b", np.zeros(dim))
        self.store = store
        self.prefix = prefix

    def __call__(self, x0: DTensor, x: DTensor) -> DTensor:
        s, p = self.store, self.prefix
        gate = ad.matmul(x, s[f"{p}.w"])  # (N, 1)
        return ad.add(ad.add(ad.mul(x0, gate), s[f"{p}.b"]), x)


class CollaborativeEncoder:
    """Field-embedding tower with a pluggable interaction backbone."""

    def __init__(self, store: ParamStore, schema: FeatureSchema,
                 cfg: ModelConfig, rng, prefix: str = "collab"):
        if not schema.fitted:
            raise UsageError("collaborative encoder needs a fitted schema")
        self.store = store
        self.schema = schema
        self.cfg = cfg
        self.prefix = prefix
        d = cfg.d
        for f in schema.fields:
            store.add(f"{prefix}.emb.{f.name}", xavier_uniform(rng, f.vocab_size, d))
        self.n_fields = len(schema.fields)
        flat = self.n_fields * d

        if cfg.backbone == "autoint":
            self.attn = []
            d_in = d
            for i in range(cfg.attn_layers):
                layer = FieldAttention(store, f"{prefix}.attn{i}", d_in,
                                       cfg.attn_heads, cfg.attn_head_dim, rng)
                self.attn.append(layer)
                d_in = layer.d_out
            flat_out = self.n_fields * d_in
            self.out_dim = cfg.d_col or flat_out
            self.head = Linear(store, f"{prefix}.out", flat_out, self.out_dim, rng)
        elif cfg.backbone == "dcn":
            self.cross = [CrossLayer(store, f"{prefix}.cross{i}", flat, rng)
                          for i in range(cfg.cross_layers)]
            self.mlp = MLPStack(store, f"{prefix}.mlp", flat, cfg.hidden, rng,
                                batch_norm=cfg.batch_norm, dropout=cfg.dropout)
            self.out_dim = cfg.d_col or cfg.hidden[-1]
            self.head = Linear(store, f"{prefix}.out", flat + self.mlp.d_out,
                               self.out_dim, rng)
        else:  # mlp
            self.mlp = MLPStack(store, f"{prefix}.mlp", flat, cfg.hidden, rng,
                                batch_norm=cfg.batch_norm, dropout=cfg.dropout)
            self.out_dim = cfg.d_col or cfg.hidden[-1]
            self.head = (Linear(store, f"{prefix}.out", self.mlp.d_out,
                                self.out_dim, rng)
                         if self.out_dim != self.mlp.d_out else None)

    def field_embeddings(self, batch: Batch) -> list:
        """One (N, d) tensor per schema field; sequence fields are mean-pooled
        over valid positions (all-padding rows pool to the zero vector)."""
        expected_cat = {f.name for f in self.schema.fields if f.kind == "categorical"}
        expected_seq = {f.name for f in self.schema.fields if f.kind == "sequence"}
        if set(batch.cat_ids) != expected_cat or set(batch.seq_ids) != expected_seq:
            raise ShapeError("batch fields do not match the encoder's schema")
        out = []
        for f in self.schema.fields:
            table = self.store[f"{self.prefix}.emb.{f.name}"]
            if f.kind == "categorical":
                out.append(ad.embedding_lookup(table, batch.cat_ids[f.name]))
            else:
                ids = batch.seq_ids[f.name]
                mask = batch.seq_mask[f.name]
                n, length = ids.shape
                rows = ad.embedding_lookup(table, ids.reshape(-1))
                rows = ad.reshape(rows, (n, length, self.cfg.d))
                masked = ad.mul(rows, DTensor(mask[:, :, None]))
                summed = ad.sum_(masked, axis=1)
                count = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
                out.append(ad.div(summed, DTensor(count)))
        return out

    def __call__(self, batch: Batch, train: bool = False, rng=None) -> DTensor:
        fields = self.field_embeddings(batch)
        if self.cfg.backbone == "autoint":
            stacked = ad.concat(
                [ad.reshape(e, (e.shape[0], 1, self.cfg.d)) for e in fields], axis=1)
            x = stacked
            for layer in self.attn:
                x = layer(x)
            n = x.shape[0]
            flat = ad.reshape(x, (n, x.shape[1] * x.shape[2]))
            return self.head(flat)
        flat = ad.concat(fields, axis=1)
        if self.cfg.backbone == "dcn":
            x = flat
            for layer in self.cross:
                x = layer(flat, x)
            deep = self.mlp(flat, train=train, rng=rng)
            return self.head(ad.concat([x, deep], axis=1))
        deep = self.mlp(flat, train=train, rng=rng)
        return self.head(deep) if self.head is not None else deep

    def param_names(self) -> list:
        pre = self.prefix + "."
        return [n for n in self.store.names() if n.startswith(pre)]


class TransformerBlock:
    """Post-norm block: self-attention + residual + LN, then feed-forward +
    residual + LN. Padding is excluded via a large negative additive mask."""

    def __init__(self, store, prefix, d_model, n_heads, d_ff, rng):
        if d_model % n_heads != 0:
            raise UsageError("d_model must be divisible by n_heads")
        self.d_head = d_model // n_heads
        self.n_heads = n_heads
        self.q = Linear(store, f"{prefix}.q", d_model, d_model, rng, bias=False)
        self.k = Linear(store, f"{prefix}.k", d_model, d_model, rng, bias=False)
        self.v = Linear(store, f"{prefix}.v", d_model, d_model, rng, bias=False)
        self.o = Linear(store, f"{prefix}.o", d_model, d_model, rng)
        self.ln1 = LayerNorm(store, f"{prefix}.ln1", d_model)
        self.ff1 = Linear(store, f"{prefix}.ff1", d_model, d_ff, rng)
        self.ff2 = Linear(store, f"{prefix}.ff2", d_ff, d_model, rng)
        self.ln2 = LayerNorm(store, f"{prefix}.ln2", d_model)

    def __call__(self, x: DTensor, mask: np.ndarray) -> DTensor:
        additive = (mask[:, None, None, :] - 1.0) * 1e9  # (N,1,1,L) over keys
        q = _split_heads(self.q(x), self.n_heads, self.d_head)
        k = _split_heads(self.k(x), self.n_heads, self.d_head)
        v = _split_heads(self.v(x), self.n_heads, self.d_head)
        ctx, _ = scaled_attention(q, k, v, additive_mask=additive)
        x = self.ln1(ad.add(x, self.o(_merge_heads(ctx))))
        ff = self.ff2(ad.relu(self.ff1(x)))
        return self.ln2(ad.add(x, ff))


class TextEncoder:
    """Token + learned positional embeddings, a small transformer stack, and
    mean pooling over unmasked last hidden states."""

    def __init__(self, store: ParamStore, vocab_size: int, cfg: TextConfig,
                 rng, prefix: str = "text"):
        if vocab_size < 2:
            raise UsageError("text vocabulary must include pad and unk")
        self.store = store
        self.cfg = cfg
        self.prefix = prefix
        self.vocab_size = vocab_size
        store.add(f"{prefix}.tok_emb", xavier_uniform(rng, vocab_size, cfg.d_model))
        store.add(f"{prefix}.pos_emb",
                  xavier_uniform(rng, cfg.max_tokens, cfg.d_model))
        self.blocks = [TransformerBlock(store, f"{prefix}.block{i}", cfg.d_model,
                                        cfg.n_heads, cfg.d_ff, rng)
                       for i in range(cfg.n_layers)]
        self.out_dim = cfg.d_model

    def hidden_states(self, token_ids: np.ndarray, mask: np.ndarray) -> DTensor:
        """Last-layer hidden states, (N, L, d_model)."""
        if token_ids.shape != mask.shape:
            raise ShapeError("token ids and mask must share shape")
        n, length = token_ids.shape
        if length > self.cfg.max_tokens:
            raise ShapeError(f"sequence length {length} exceeds "
                             f"max_tokens {self.cfg.max_tokens}")
        tok = ad.embedding_lookup(self.store[f"{self.prefix}.tok_emb"],
                                  token_ids.reshape(-1))
        x = ad.reshape(tok, (n, length, self.cfg.d_model))
        pos = ad.embedding_lookup(self.store[f"{self.prefix}.pos_emb"],
                                  np.arange(length))
        x = ad.add(x, pos)
        for block in self.blocks:
            x = block(x, mask)
        return x

    def __call__(self, token_ids: np.ndarray, mask: np.ndarray) -> DTensor:
        x = self.hidden_states(token_ids, mask)
        counts = mask.sum(axis=1)
        if (counts == 0).any():
            warnings.warn(f"{int((counts == 0).sum())} all-masked text row(s); "
                          "pooled output is the zero vector")
        masked = ad.mul(x, DTensor(mask[:, :, None]))
        summed = ad.sum_(masked, axis=1)
        denom = np.maximum(counts, 1.0)[:, None]
        return ad.div(summed, DTensor(denom))

    def param_names(self) -> list:
        pre = self.prefix + "."
        return [n for n in self.store.names() if n.startswith(pre)]
