"""Non-local token enhancement of adjacent encoder layers.

Two token sequences from neighbouring encoder layers are normalized and
fused into a shared query.  For each input, the query reweights that
input's key projection, which is then pooled down to ``n_vertices``
anchors.  Anchor/key similarities give an attention map that projects the
value tokens onto a small graph.  One first-order spectral graph
convolution runs on that graph before the vertices are projected back
onto the tokens, added to the raw input and reshaped into a feature map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .encoder import TokenSequence, deserialize
from .nn import LayerNorm, Linear, Module, init_parameter
from .tensor import ShapeError, Tensor, concat, matmul, swapaxes


@dataclass
class NlTemIntermediates:
    t_v: Tensor
    t_k: Tensor
    t_q: Tensor
    t_q_w: Tensor
    t_q_prime: Tensor
    t_a: Tensor
    t_g: Tensor
    t_g_hat: Tensor


def fuse_query(n1: Tensor, n2: Tensor) -> Tensor:
    """Concatenate two (already normalized) token matrices along the feature axis."""
    if n1.shape != n2.shape:
        raise ShapeError(f"fuse_query: token shapes {n1.shape} and {n2.shape} differ")
    return concat([n1, n2], axis=-1)


def weighted_pool(t_k: Tensor, t_q: Tensor, w_q: Linear, n_vertices: int) -> tuple[Tensor, Tensor]:
    """Pool the query-weighted keys to ``n_vertices`` rows.

    Returns (pooled anchors, softmax weight map).
    """
    if n_vertices > t_k.shape[-2]:
        raise ShapeError(f"weighted_pool: {n_vertices} vertices exceed sequence length {t_k.shape[-2]}")
    weights = F.softmax(w_q(t_q), axis=-1)
    if weights.shape != t_k.shape:
        raise ShapeError(f"weighted_pool: weight map {weights.shape} does not match keys {t_k.shape}")
    return F.adaptive_avg_pool_seq(t_k * weights, n_vertices), weights


def attention_map(t_q_prime: Tensor, t_k: Tensor) -> Tensor:
    """Row-stochastic (.., N_v, l) map from anchor/key similarities."""
    if t_q_prime.shape[-1] != t_k.shape[-1]:
        raise ShapeError(f"attention_map: feature dims {t_q_prime.shape} and {t_k.shape} differ")
    return F.softmax(matmul(t_q_prime, swapaxes(t_k, -1, -2)), axis=-1)


def graph_project(t_v: Tensor, t_a: Tensor) -> Tensor:
    """Vertex features as attention-weighted averages of the value tokens."""
    if t_a.shape[-1] != t_v.shape[-2]:
        raise ShapeError(f"graph_project: attention {t_a.shape} does not match values {t_v.shape}")
    return matmul(t_a, t_v)


def gcn(t_g: Tensor, adjacency: Tensor, w_g: Tensor) -> Tensor:
    """ReLU((I - A) T_g w_g)."""
    n = t_g.shape[-2]
    if adjacency.shape != (n, n):
        raise ShapeError(f"gcn: adjacency {adjacency.shape} does not match {n} vertices")
    if w_g.shape[0] != t_g.shape[-1]:
        raise ShapeError(f"gcn: weight {w_g.shape} does not match vertex features {t_g.shape}")
    laplacian = Tensor(np.eye(n)) - adjacency
    return F.relu(matmul(matmul(laplacian, t_g), w_g))


def reproject_and_deserialize(
    t_g_hat: Tensor, t_a: Tensor, original: TokenSequence, restore: Linear
) -> Tensor:
    """Back-project vertices to tokens, lift to c channels, add the input, reshape to 2D."""
    if not isinstance(original, TokenSequence):
        raise ShapeError("reproject_and_deserialize: the residual input needs grid provenance")
    back = matmul(swapaxes(t_a, -1, -2), t_g_hat)
    enhanced = original.tokens + restore(back)
    return deserialize(original.with_tokens(enhanced))


class GraphBranch(Module):
    """Per-input projections plus the graph fusion weights."""

    def __init__(self, rng: np.random.Generator, dim: int, n_vertices: int):
        half = dim // 2
        self.omega_v = Linear(rng, dim, half)
        self.omega_k = Linear(rng, dim, half)
        self.adjacency = init_parameter(rng, (n_vertices, n_vertices), "zeros")
        self.w_g = init_parameter(rng, (half, half), "trunc_normal")
        # bias-free so that a zero graph output leaves the residual untouched
        self.restore = Linear(rng, half, dim, bias=False)


class NlTem(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        dim: int,
        n_vertices: int,
        share_branches: bool = False,
    ):
        if dim % 2:
            raise ValueError(f"embed dim {dim} must be even")
        self.n_vertices = n_vertices
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)
        self.w_q = Linear(rng, 2 * dim, dim // 2)
        first = GraphBranch(rng, dim, n_vertices)
        self.branches = [first] if share_branches else [first, GraphBranch(rng, dim, n_vertices)]
        self.zero_graph = False
        self.last_intermediates: list[NlTemIntermediates] = []

    def _branch(self, branch: GraphBranch, normed: Tensor, t_q: Tensor, original: TokenSequence):
        t_v = branch.omega_v(normed)
        t_k = branch.omega_k(normed)
        t_q_prime, t_q_w = weighted_pool(t_k, t_q, self.w_q, self.n_vertices)
        t_a = attention_map(t_q_prime, t_k)
        t_g = graph_project(t_v, t_a)
        t_g_hat = gcn(t_g, branch.adjacency, branch.w_g)
        if self.zero_graph:
            t_g_hat = t_g_hat * 0.0
        self.last_intermediates.append(
            NlTemIntermediates(t_v, t_k, t_q, t_q_w, t_q_prime, t_a, t_g, t_g_hat)
        )
        return reproject_and_deserialize(t_g_hat, t_a, original, branch.restore)

    def forward(self, t1: TokenSequence, t2: TokenSequence) -> tuple[Tensor, Tensor]:
        if t1.tokens.shape != t2.tokens.shape:
            raise ShapeError(f"NL-TEM inputs differ: {t1.tokens.shape} vs {t2.tokens.shape}")
        self.last_intermediates = []
        n1 = self.norm1(t1.tokens)
        n2 = self.norm2(t2.tokens)
        t_q = fuse_query(n1, n2)
        b1 = self.branches[0]
        b2 = self.branches[-1]
        return self._branch(b1, n1, t_q, t1), self._branch(b2, n2, t_q, t2)


def enhance_pairs(modules: list[NlTem], layers: list[TokenSequence]) -> list[Tensor]:
    """Run one NL-TEM per disjoint adjacent pair (1,2), (3,4), ... and keep layer order."""
    if len(layers) != 2 * len(modules):
        raise ShapeError(f"{len(layers)} encoder layers cannot feed {len(modules)} NL-TEM pairs")
    out: list[Tensor] = []
    for j, module in enumerate(modules):
        out.extend(module(layers[2 * j], layers[2 * j + 1]))
    return out


__all__ = [
    "NlTem",
    "NlTemIntermediates",
    "GraphBranch",
    "fuse_query",
    "weighted_pool",
    "attention_map",
    "graph_project",
    "gcn",
    "reproject_and_deserialize",
    "enhance_pairs",
]
