"""Complete-graph message passing over persons, producing relation queries.

Vertex states start from projected per-person RoI features, every edge state
starts from the same projected global feature. Each iteration updates edges
first, then vertices from the fresh edges:

    e_ij <- relu(W h_i + W h_j + W_e e_ij)
    h_i  <- h_i + relu(W' h_i + mean_{j != i} e_ij * W' h_j)

The same matrix multiplies h_i and h_j inside each update, which preserves
e_ij == e_ji exactly whenever the inputs are symmetric. The neighbor mean
accumulates summands in ascending value order, making the whole module
exactly equivariant to person relabeling.
"""

from __future__ import annotations

import numpy as np

from .errors import GraphTooSmallError, ShapeError
from .nn import Linear, Module, uniform_init
from .tensor import Tensor, concat


def pair_index_maps(p: int):
    """Row indices of h for the first and second person of each ordered pair."""
    rep_i = np.repeat(np.arange(p), p)
    rep_j = np.tile(np.arange(p), p)
    return rep_i, rep_j


def offdiag_mask(p: int, d: int, dtype) -> np.ndarray:
    m = np.ones((p * p, d), dtype=dtype)
    m[np.arange(p) * (p + 1)] = 0
    return m


class GQMLayer(Module):
    """Per-iteration parameter set: one matrix role per update equation."""

    def __init__(self, d: int, rng, dtype=np.float32):
        self.w_edge_h = uniform_init(rng, (d, d), d, dtype)
        self.w_e = uniform_init(rng, (d, d), d, dtype)
        self.w_vertex_h = uniform_init(rng, (d, d), d, dtype)


def edge_update(h: Tensor, e: Tensor, layer: GQMLayer, weight_hook=None) -> Tensor:
    p, d = h.shape
    if e.shape != (p * p, d):
        raise ShapeError(f"edge state {e.shape} inconsistent with {p} persons of width {d}")
    w = layer.w_edge_h if weight_hook is None else weight_hook(layer.w_edge_h)
    we = layer.w_e if weight_hook is None else weight_hook(layer.w_e)
    hw = h.matmul(w)
    rep_i, rep_j = pair_index_maps(p)
    return (hw.gather_rows(rep_i) + hw.gather_rows(rep_j) + e.matmul(we)).relu()


def vertex_update(h: Tensor, e_new: Tensor, layer: GQMLayer, weight_hook=None) -> Tensor:
    p, d = h.shape
    if p < 2:
        raise GraphTooSmallError(f"vertex update needs at least 2 persons, got {p}")
    w = layer.w_vertex_h if weight_hook is None else weight_hook(layer.w_vertex_h)
    hw = h.matmul(w)
    _, rep_j = pair_index_maps(p)
    messages = e_new * hw.gather_rows(rep_j)
    messages = messages * Tensor(offdiag_mask(p, d, h.data.dtype))
    agg = messages.reshape(p, p, d).sorted_sum(axis=1) * (1.0 / (p - 1))
    return h + (hw + agg).relu()


def extract_queries(h: Tensor, e: Tensor, mode: str) -> tuple[Tensor, np.ndarray]:
    """Per-ordered-pair query vectors plus a validity mask (diagonal invalid).

    mode "concat" concatenates the two vertex states (width 2d); mode "edge"
    returns the edge state itself (width d).
    """
    p, d = h.shape
    rep_i, rep_j = pair_index_maps(p)
    if mode == "concat":
        q = concat([h.gather_rows(rep_i), h.gather_rows(rep_j)], axis=1)
    elif mode == "edge":
        q = e
    else:
        raise ValueError(f"unknown query mode {mode!r}")
    valid = rep_i != rep_j
    return q, valid


class GraphQueryModule(Module):
    """Projections plus T rounds of edge/vertex updates."""

    def __init__(self, roi_dim: int, global_dim: int, d: int, iterations: int, rng, dtype=np.float32):
        self.d = d
        self.iterations = iterations
        self.proj_vertex = Linear(roi_dim, d, rng, dtype)
        self.proj_edge = Linear(global_dim, d, rng, dtype)
        self.layers = []
        for t in range(iterations):
            layer = GQMLayer(d, rng, dtype)
            setattr(self, f"t{t}", layer)
            self.layers.append(layer)

    def init_graph(self, x_rois: Tensor, x_global: Tensor, weight_hook=None):
        p = x_rois.shape[0]
        h = self.proj_vertex(x_rois, weight_hook)
        e = self.proj_edge(x_global, weight_hook).gather_rows([0] * (p * p))
        return h, e

    def __call__(self, x_rois: Tensor, x_global: Tensor, mode: str, weight_hook=None):
        if x_rois.shape[0] < 2:
            raise GraphTooSmallError(f"graph needs at least 2 persons, got {x_rois.shape[0]}")
        h, e = self.init_graph(x_rois, x_global, weight_hook)
        for layer in self.layers:
            e = edge_update(h, e, layer, weight_hook)
            h = vertex_update(h, e, layer, weight_hook)
        return extract_queries(h, e, mode)
