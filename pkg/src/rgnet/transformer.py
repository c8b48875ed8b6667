"""Transformer reasoning: one encoder layer over image tokens, one decoder
layer over padded relation queries, then the classification head with
optional pair-score symmetrization.

Padding and diagonal query slots are excluded by masking attention keys with
a large negative score bias (their softmax weight underflows to exactly
zero) and by zeroing the decoder output rows, so padded slots can neither
influence valid slots nor leak gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .nn import Linear, Module
from .tensor import Tensor, concat

MASK_BIAS = -1e30


class Dropout:
    """Inverted dropout; identity when not training or rate is zero."""

    def __init__(self, rate: float, rng=None, training: bool = False):
        self.rate = rate
        self.rng = rng
        self.training = training and rate > 0.0

    def __call__(self, t: Tensor) -> Tensor:
        if not self.training:
            return t
        keep = (self.rng.random(t.shape) >= self.rate).astype(t.data.dtype)
        return t * Tensor(keep / (1.0 - self.rate))


def sincos_positions(h: int, w: int, d_m: int, dtype) -> np.ndarray:
    """Fixed 2-D sinusoidal encodings for an h x w grid, shape [h*w, d_m]."""
    if d_m % 4:
        raise ShapeError(f"model width {d_m} must be divisible by 4 for 2-D encodings")
    dq = d_m // 4
    omega = 1.0 / (10000.0 ** (np.arange(dq) / dq))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.concatenate(
        [
            np.sin(ys.reshape(-1, 1) * omega),
            np.cos(ys.reshape(-1, 1) * omega),
            np.sin(xs.reshape(-1, 1) * omega),
            np.cos(xs.reshape(-1, 1) * omega),
        ],
        axis=1,
    )
    return out.astype(dtype)


class MultiHeadAttention(Module):
    def __init__(self, d_m: int, heads: int, rng, dtype=np.float32):
        if d_m % heads:
            raise ShapeError(f"model width {d_m} not divisible by head count {heads}")
        self.d_m = d_m
        self.heads = heads
        self.head_dim = d_m // heads
        self.wq = Linear(d_m, d_m, rng, dtype)
        self.wk = Linear(d_m, d_m, rng, dtype)
        self.wv = Linear(d_m, d_m, rng, dtype)
        self.wo = Linear(d_m, d_m, rng, dtype)
        self.last_attention = None

    def __call__(self, q_in: Tensor, kv_in: Tensor, key_valid=None, drop: Dropout | None = None,
                 weight_hook=None) -> Tensor:
        q = self.wq(q_in, weight_hook)
        k = self.wk(kv_in, weight_hook)
        v = self.wv(kv_in, weight_hook)
        nq, nk = q.shape[0], k.shape[0]
        bias = None
        if key_valid is not None:
            if len(key_valid) != nk:
                raise ShapeError(f"key mask length {len(key_valid)} != key count {nk}")
            row = np.where(np.asarray(key_valid, bool), 0.0, MASK_BIAS).astype(q.data.dtype)
            bias = Tensor(np.repeat(row[None, :], nq, axis=0))
        scale = 1.0 / np.sqrt(self.head_dim)
        outs = []
        attn_maps = []
        for hd in range(self.heads):
            lo, hi = hd * self.head_dim, (hd + 1) * self.head_dim
            qh, kh, vh = q[:, lo:hi], k[:, lo:hi], v[:, lo:hi]
            scores = qh.matmul(kh.transpose_last_two()) * scale
            if bias is not None:
                scores = scores + bias
            attn = scores.softmax()
            attn_maps.append(attn.data)
            if drop is not None:
                attn = drop(attn)
            outs.append(attn.matmul(vh))
        self.last_attention = np.stack(attn_maps)
        return self.wo(concat(outs, axis=1), weight_hook)


class FeedForward(Module):
    def __init__(self, d_m: int, hidden: int, rng, dtype=np.float32):
        self.fc1 = Linear(d_m, hidden, rng, dtype)
        self.fc2 = Linear(hidden, d_m, rng, dtype)

    def __call__(self, x: Tensor, drop: Dropout | None = None, weight_hook=None) -> Tensor:
        z = self.fc1(x, weight_hook).relu()
        if drop is not None:
            z = drop(z)
        return self.fc2(z, weight_hook)


class EncoderLayer(Module):
    def __init__(self, d_m: int, heads: int, ff_dim: int, rng, dtype=np.float32):
        self.attn = MultiHeadAttention(d_m, heads, rng, dtype)
        self.ff = FeedForward(d_m, ff_dim, rng, dtype)

    def __call__(self, x: Tensor, drop=None, weight_hook=None) -> Tensor:
        z = x + self.attn(x, x, drop=drop, weight_hook=weight_hook)
        return z + self.ff(z, drop=drop, weight_hook=weight_hook)


class DecoderLayer(Module):
    def __init__(self, d_m: int, heads: int, ff_dim: int, rng, dtype=np.float32):
        self.self_attn = MultiHeadAttention(d_m, heads, rng, dtype)
        self.cross_attn = MultiHeadAttention(d_m, heads, rng, dtype)
        self.ff = FeedForward(d_m, ff_dim, rng, dtype)

    def __call__(self, queries: Tensor, memory: Tensor, query_valid, drop=None, weight_hook=None) -> Tensor:
        z = queries + self.self_attn(queries, queries, key_valid=query_valid, drop=drop, weight_hook=weight_hook)
        z = z + self.cross_attn(z, memory, drop=drop, weight_hook=weight_hook)
        z = z + self.ff(z, drop=drop, weight_hook=weight_hook)
        # invalid rows carry the zero vector and contribute no gradient
        row_mask = np.repeat(np.asarray(query_valid, bool)[:, None], z.shape[1], axis=1)
        return z * Tensor(row_mask.astype(z.data.dtype))


class ReasoningModule(Module):
    """Encoder over image tokens plus decoder over padded relation queries."""

    def __init__(self, feat_channels: int, query_dim: int, d_m: int, heads: int, ff_dim: int,
                 rng, dtype=np.float32):
        self.d_m = d_m
        self.in_proj = Linear(feat_channels, d_m, rng, dtype)
        self.query_proj = Linear(query_dim, d_m, rng, dtype)
        self.encoder = EncoderLayer(d_m, heads, ff_dim, rng, dtype)
        self.decoder = DecoderLayer(d_m, heads, ff_dim, rng, dtype)
        self._dtype = dtype

    def encode(self, f: Tensor, drop=None, weight_hook=None) -> Tensor:
        c, h, w = f.shape
        tokens = f.reshape(c, h * w).transpose_last_two()
        x = self.in_proj(tokens, weight_hook) + Tensor(sincos_positions(h, w, self.d_m, f.data.dtype))
        return self.encoder(x, drop=drop, weight_hook=weight_hook)

    def decode(self, queries: Tensor, memory: Tensor, query_valid, drop=None, weight_hook=None) -> Tensor:
        q = self.query_proj(queries, weight_hook)
        return self.decoder(q, memory, query_valid, drop=drop, weight_hook=weight_hook)


@dataclass
class LogitCube:
    """Raw pair-class scores over the padded person grid.

    scores is a [P*P, C] tensor in row-major (i, j) layout; valid marks the
    slots that correspond to real ordered pairs of distinct persons.
    """

    scores: Tensor
    p: int
    valid: np.ndarray

    @property
    def cube(self) -> np.ndarray:
        c = self.scores.shape[1]
        return self.scores.data.reshape(self.p, self.p, c)

    @property
    def valid_grid(self) -> np.ndarray:
        return self.valid.reshape(self.p, self.p)


def transpose_pair_slots(p: int) -> np.ndarray:
    """Index map sending slot (i, j) to slot (j, i) in the flattened grid."""
    idx = np.arange(p * p).reshape(p, p)
    return idx.T.ravel()


def symmetrize_scores(m: Tensor, p: int) -> Tensor:
    """Add each slot's transpose partner: out[i,j] = m[i,j] + m[j,i].

    Addition commutes bitwise, so the result is exactly symmetric in the
    person axes.
    """
    if m.shape[0] != p * p:
        raise ShapeError(f"scores have {m.shape[0]} slots, expected {p * p}")
    return m + m.gather_rows(transpose_pair_slots(p))


class ClassifierHead(Module):
    def __init__(self, d_m: int, num_classes: int, rng, dtype=np.float32):
        self.num_classes = num_classes
        self.fc = Linear(d_m, num_classes, rng, dtype)

    def __call__(self, decoded: Tensor, p: int, valid, symmetric: bool = True,
                 weight_hook=None) -> LogitCube:
        m = self.fc(decoded, weight_hook)
        if symmetric:
            m = symmetrize_scores(m, p)
        return LogitCube(scores=m, p=p, valid=np.asarray(valid, bool))
