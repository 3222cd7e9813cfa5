"""Graph attention stage: global statistics across the 64 intra-block
positions of the 8x8 JPEG grid.

The residual stack is aggregated to a single map (channel mean), folded so
that each of the 64 intra-block positions becomes one node of a complete
graph whose feature vector collects that position's value in every block
(length B = h*w/64). Two single-head attention layers transform the node
features (ELU between layers, linear output), the result is unfolded back
to an h x w map and replicated across 30 channels so the caller can add it
to the enhancement output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .sfe import CHANNELS, he_normal

N_NODES = 64
N_EDGES = N_NODES * (N_NODES - 1) // 2  # undirected, no self loops counted


def n_undirected_edges(n_nodes: int) -> int:
    return n_nodes * (n_nodes - 1) // 2


def fold_to_blocks(m: Tensor) -> Tensor:
    """(N, h, w) maps -> (N, 64, B) node features, B = (h/8)*(w/8).

    Node index is the intra-block position 8*(y mod 8) + (x mod 8); feature
    index is the block position (y div 8)*(w/8) + (x div 8), row-major.
    """
    if m.ndim != 3:
        raise ValueError("fold_to_blocks expects (N, h, w)")
    n, h, w = m.shape
    if h % 8 or w % 8:
        raise ValueError("dims must be multiples of 8")
    t = T.reshape(m, (n, h // 8, 8, w // 8, 8))
    t = T.transpose(t, (0, 2, 4, 1, 3))
    return T.reshape(t, (n, N_NODES, (h // 8) * (w // 8)))


def unfold_from_blocks(nf: Tensor, h: int, w: int) -> Tensor:
    """Exact inverse of `fold_to_blocks`."""
    if nf.ndim != 3 or nf.shape[1] != N_NODES:
        raise ValueError("unfold_from_blocks expects (N, 64, B)")
    n = nf.shape[0]
    if nf.shape[2] != (h // 8) * (w // 8):
        raise ValueError(f"feature dim {nf.shape[2]} does not match {h}x{w}")
    t = T.reshape(nf, (n, 8, 8, h // 8, w // 8))
    t = T.transpose(t, (0, 3, 1, 4, 2))
    return T.reshape(t, (n, h, w))


@dataclass
class GatLayerParams:
    """Shared linear map W (square, feature-preserving) and attention vector a."""
    W: Tensor  # (B, B)
    a: Tensor  # (2B,)

    def __post_init__(self):
        if self.W.ndim != 2 or self.W.shape[0] != self.W.shape[1]:
            raise ValueError("W must be square (output dim = input dim)")
        if self.a.shape != (2 * self.W.shape[0],):
            raise ValueError("a must have length 2 * feature dim")


@dataclass
class GalParams:
    """Exactly two attention layers over the fixed 64-node complete graph."""
    layer1: GatLayerParams
    layer2: GatLayerParams

    def __post_init__(self):
        assert N_NODES == 64 and n_undirected_edges(N_NODES) == 2016


def init_gal(rng: np.random.Generator, feature_dim: int) -> GalParams:
    def layer():
        return GatLayerParams(
            W=Tensor(he_normal(rng, (feature_dim, feature_dim)), requires_grad=True),
            a=Tensor(rng.normal(0.0, 0.01, size=2 * feature_dim), requires_grad=True),
        )
    return GalParams(layer1=layer(), layer2=layer())


def gat_layer(nf: Tensor, p: GatLayerParams, out_activation: str = "elu") -> Tensor:
    """Single-head graph attention on a complete graph with self-loops.

    e_ij = leaky_relu(a . [W nf_i || W nf_j], slope 0.2), attention is the
    softmax of e over j, and out_i = activation(sum_j alpha_ij W nf_j).
    Accepts (nodes, F) or batched (N, nodes, F).
    """
    if out_activation not in ("elu", "identity"):
        raise ValueError("out_activation must be 'elu' or 'identity'")
    squeeze = nf.ndim == 2
    if squeeze:
        nf = T.reshape(nf, (1,) + nf.shape)
    if nf.ndim != 3:
        raise ValueError("node features must be (nodes, F) or (N, nodes, F)")
    f = nf.shape[2]
    if p.W.shape != (f, f):
        raise ValueError(f"W is {p.W.shape}, features have dim {f}")
    h = T.matmul(nf, T.transpose(p.W, (1, 0)))           # (N, nodes, F)
    a_src = T.reshape(T.slice1d(p.a, 0, f), (f, 1))
    a_dst = T.reshape(T.slice1d(p.a, f, 2 * f), (f, 1))
    s_src = T.matmul(h, a_src)                           # (N, nodes, 1)
    s_dst = T.transpose(T.matmul(h, a_dst), (0, 2, 1))   # (N, 1, nodes)
    logits = T.activation(s_src + s_dst, "leaky_relu")   # (N, i, j)
    alpha = T.softmax_last(logits)
    out = T.matmul(alpha, h)
    if out_activation == "elu":
        out = T.activation(out, "elu")
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out


def attention_matrix(nf: np.ndarray, p: GatLayerParams) -> np.ndarray:
    """Attention coefficients for inspection/testing; rows sum to 1."""
    h = nf @ p.W.data.T
    f = nf.shape[-1]
    s_src = h @ p.a.data[:f]
    s_dst = h @ p.a.data[f:]
    e = s_src[..., :, None] + s_dst[..., None, :]
    e = np.where(e > 0, e, 0.2 * e)
    e -= e.max(axis=-1, keepdims=True)
    w = np.exp(e)
    return w / w.sum(axis=-1, keepdims=True)


def gal_forward(r: Tensor, p: GalParams, training: bool) -> Tensor:
    """Residual stack (N, 30, h, w) -> globally attended map on 30 channels.

    The stack is reduced to one map by a channel mean, folded to the 64-node
    graph, passed through both attention layers, unfolded, and replicated
    across the 30 channels. The caller adds the result to the SFE output.
    """
    if r.ndim != 4:
        raise ValueError("expected a batched residual stack (N, C, h, w)")
    n, c, h, w = r.shape
    m = T.reduce_mean(r, axis=1)                 # (N, h, w)
    nf = fold_to_blocks(m)
    nf = gat_layer(nf, p.layer1, "elu")
    nf = gat_layer(nf, p.layer2, "identity")
    out_map = unfold_from_blocks(nf, h, w)
    return T.repeat_channels(out_map, CHANNELS)
