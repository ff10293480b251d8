"""Axial fusion transformer: inter-slice then intra-slice attention per block.

Internal token layout is ``(N_A, P, C)`` with ``P = H_L * W_L`` flattened
row-major (``p = W_L * h + w``).  Per-head tensors are ``(A, N_A, P, C_h)``.
Public helpers take and return the group layout ``(C, H_L, W_L, N_A)``.
"""
import contextlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, ShapeError
from .nn import LayerNorm, Linear, Module, Parameter

MODES = ("axial", "intra", "full")


# -- instrumentation ------------------------------------------------------------

@dataclass
class AttentionEvent:
    kind: str
    heads: int
    queries: int          # query tokens per head
    comparisons: int      # query-key dot products per head
    map_elements: int     # attention weights materialized, all heads


class AttentionCounter:
    """Collects one event per attention call made while it is active."""

    def __init__(self):
        self.events = []

    def comparisons_per_query(self, kinds=None):
        ev = [e for e in self.events if kinds is None or e.kind in kinds]
        if not ev:
            return 0
        queries = ev[0].queries
        if any(e.queries != queries for e in ev):
            raise ValueError("events cover different query sets")
        total = sum(e.comparisons for e in ev)
        if total % queries:
            raise ValueError("comparisons are not a whole number per query")
        return total // queries

    def map_elements(self, kinds=None):
        return sum(e.map_elements for e in self.events if kinds is None or e.kind in kinds)


_COUNTERS = []


@contextlib.contextmanager
def count_attention():
    counter = AttentionCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


# -- attention cores on the head layout -------------------------------------------

def _attend(q, k, v, kind):
    """softmax(q k^T / sqrt(C_h)) v over the second-to-last axis of k and v."""
    ch = q.shape[-1]
    scores = T.matmul(q, T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    weights = T.softmax(scores * (1.0 / np.sqrt(ch)), axis=-1)
    if _COUNTERS:
        heads = q.shape[0]
        queries = q.size // (heads * ch)
        ev = AttentionEvent(kind, heads, queries, scores.size // heads, weights.size)
        for c in _COUNTERS:
            c.events.append(ev)
    return T.matmul(weights, v)


def intra_heads(q, k, v):
    """Keys restricted to the query's own slice; inputs (A, N, P, C_h)."""
    return _attend(q, k, v, "intra")


def inter_heads(q, k, v):
    """Keys restricted to the query's own (h, w) across the N slices."""
    perm = (0, 2, 1, 3)
    out = _attend(T.transpose(q, perm), T.transpose(k, perm), T.transpose(v, perm), "inter")
    return T.transpose(out, perm)


def full_heads(q, k, v):
    """Every query against all N * P keys."""
    a, n, p, c = q.shape
    flat = lambda t: T.reshape(t, (a, n * p, c))
    return T.reshape(_attend(flat(q), flat(k), flat(v), "full"), (a, n, p, c))


def _grid_to_heads(t):
    t = T._wrap(t)
    single = t.ndim == 4
    if single:
        t = T.reshape(t, (1,) + t.shape)
    a, c, h, w, n = t.shape
    return T.reshape(T.transpose(t, (0, 4, 2, 3, 1)), (a, n, h * w, c)), (single, h, w)


def _heads_to_grid(t, meta):
    single, h, w = meta
    a, n, p, c = t.shape
    t = T.transpose(T.reshape(t, (a, n, h, w, c)), (0, 4, 2, 3, 1))
    return T.reshape(t, t.shape[1:]) if single else t


def _public(core):
    def run(q, k, v):
        qh, meta = _grid_to_heads(q)
        kh, _ = _grid_to_heads(k)
        vh, _ = _grid_to_heads(v)
        return _heads_to_grid(core(qh, kh, vh), meta)

    run.__name__ = core.__name__
    run.__doc__ = (f"Grid-layout wrapper of ``{core.__name__}``: q, k, v are "
                   "(C_h, H_L, W_L, N_A) or (A, C_h, H_L, W_L, N_A).")
    return run


attention_full3d = _public(full_heads)
attention_intra = _public(intra_heads)
attention_inter = _public(inter_heads)


# -- parameterized pieces ------------------------------------------------------

class QKV(Module):
    """LayerNorm followed by the stacked per-head query/key/value maps."""

    def __init__(self, width, heads, rng, dtype):
        self.norm = LayerNorm(width, dtype)
        self.q = Linear(width, width, rng, bias=False, dtype=dtype)
        self.k = Linear(width, width, rng, bias=False, dtype=dtype)
        self.v = Linear(width, width, rng, bias=False, dtype=dtype)
        self.heads = heads

    def split(self, t):
        n, p, c = t.shape
        return T.transpose(T.reshape(t, (n, p, self.heads, c // self.heads)), (2, 0, 1, 3))

    def forward(self, z):
        x = self.norm(z)
        return self.split(self.q(x)), self.split(self.k(x)), self.split(self.v(x))


def merge_heads(u, fc, z_prev):
    """Concatenate heads, project with ``fc``, add the residual."""
    a, n, p, c = u.shape
    cat = T.reshape(T.transpose(u, (1, 2, 0, 3)), (n, p, a * c))
    return fc(cat) + z_prev


class MLP(Module):
    def __init__(self, width, rng, dtype, ratio=4):
        self.norm = LayerNorm(width, dtype)
        self.fc1 = Linear(width, ratio * width, rng, dtype=dtype)
        self.fc2 = Linear(ratio * width, width, rng, dtype=dtype)

    def forward(self, z):
        return self.fc2(T.relu(self.fc1(self.norm(z)))) + z


class AFTBlock(Module):
    """inter (axial set) -> merge -> intra (slice set) -> merge -> MLP.

    ``mode="intra"`` drops the axial pass; ``mode="full"`` replaces both
    passes by one full 3D attention through the axial weight set.
    ``shared_merge`` uses one head-merge projection for both passes.
    """

    def __init__(self, width, heads, rng, dtype=np.float64, mode="axial", shared_merge=False):
        if width % heads:
            raise ConfigError(f"width {width} is not divisible by heads {heads}")
        if mode not in MODES:
            raise ConfigError(f"attention mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.shared_merge = shared_merge
        self.axial = QKV(width, heads, rng, dtype)
        self.slice = QKV(width, heads, rng, dtype)
        self.merge_inter = Linear(width, width, rng, dtype=dtype)
        self.merge_intra = None if shared_merge else Linear(width, width, rng, dtype=dtype)
        self.mlp = MLP(width, rng, dtype)

    def forward(self, z):
        if self.mode == "full":
            z = merge_heads(full_heads(*self.axial(z)), self.merge_inter, z)
        else:
            if self.mode == "axial":
                z = merge_heads(inter_heads(*self.axial(z)), self.merge_inter, z)
            fc = self.merge_inter if self.shared_merge else self.merge_intra
            z = merge_heads(intra_heads(*self.slice(z)), fc, z)
        return self.mlp(z)


def tokens_from_grid(g):
    """(C, H, W, N) -> (N, H*W, C)."""
    c, h, w, n = g.shape
    return T.reshape(T.transpose(g, (3, 1, 2, 0)), (n, h * w, c))


def grid_from_tokens(z, h, w):
    n, p, c = z.shape
    return T.transpose(T.reshape(z, (n, h, w, c)), (3, 1, 2, 0))


class AxialFusionTransformer(Module):
    """Positional embedding plus ``layers`` AFT blocks over a fixed token grid."""

    def __init__(self, width, grid, heads, layers, rng, dtype=np.float64, mode="axial",
                 shared_merge=False, pos_std=0.02):
        h, w, n = grid
        self.grid = (h, w, n)
        self.pos = Parameter(rng.normal(0.0, pos_std, size=(width, h, w, n)).astype(dtype))
        self.blocks = [AFTBlock(width, heads, rng, dtype, mode, shared_merge) for _ in range(layers)]

    def add_positional(self, g):
        if g.shape != self.pos.shape:
            raise ShapeError(f"feature group {g.shape} does not match positional table {self.pos.shape}")
        return g + self.pos

    def forward(self, g):
        h, w, _ = self.grid
        z = tokens_from_grid(self.add_positional(g))
        for i, block in enumerate(self.blocks):
            z = block(z)
            if not np.isfinite(z.data).all():
                raise NumericError(f"non-finite activations after transformer block {i}")
        return grid_from_tokens(z, h, w)
