"""Graph transformer encoder blocks and fixed-weight dual-encoder fusion.

Each block applies, in order: layer norm, multi-head self-attention with a
residual connection, a graph-convolution residual over the mesh adjacency,
a second layer norm, and an MLP with a residual connection.  Two
independently initialized encoder stacks consume the same token sequence;
their vertex-token outputs are fused with a fixed scalar weighting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import TokenLayout, TokenSequence
from .errors import ConfigError, ContractError, ShapeError
from .mesh import MeshTemplate, coarse_adjacency


@dataclass(frozen=True)
class EncoderConfig:
    token_dim: int = 32
    heads: int = 4
    depth: int = 2
    mlp_hidden: int = 128
    fusion_weights: tuple = (1.0, 0.1)

    def validate(self):
        if self.depth < 1:
            raise ConfigError(f"encoder depth must be >= 1, got {self.depth}")
        if self.token_dim % self.heads:
            raise ConfigError(
                f"head count {self.heads} does not divide token_dim {self.token_dim}"
            )


def init_encoder_params(prefix: str, config: EncoderConfig, rng) -> dict:
    config.validate()
    d, h = config.token_dim, config.mlp_hidden
    params = {}
    for b in range(config.depth):
        p = f"{prefix}.block{b}"
        params[f"{p}.ln1.gamma"] = np.ones(d)
        params[f"{p}.ln1.beta"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{p}.attn.{name}"] = rng.normal(0.0, np.sqrt(1.0 / d), size=(d, d))
        for name in ("bq", "bk", "bv", "bo"):
            params[f"{p}.attn.{name}"] = np.zeros(d)
        params[f"{p}.graph.wg"] = rng.normal(0.0, np.sqrt(1.0 / d), size=(d, d))
        params[f"{p}.ln2.gamma"] = np.ones(d)
        params[f"{p}.ln2.beta"] = np.zeros(d)
        params[f"{p}.mlp.w1"] = rng.normal(0.0, np.sqrt(2.0 / d), size=(d, h))
        params[f"{p}.mlp.b1"] = np.zeros(h)
        params[f"{p}.mlp.w2"] = rng.normal(0.0, np.sqrt(2.0 / h), size=(h, d))
        params[f"{p}.mlp.b2"] = np.zeros(d)
    return params


def token_adjacency(template: MeshTemplate, layout: TokenLayout) -> np.ndarray:
    """Embed the coarse-mesh adjacency into the token graph.

    Vertex tokens mix over the mesh graph; image and joint tokens sit on
    isolated self-loops.  Rows sum to 1.
    """
    t = layout.total
    a = np.eye(t)
    s = layout.vertex_start
    a[s:, s:] = coarse_adjacency(template)
    return a


def mhsa(tokens: Tensor, params: dict, prefix: str, heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention with output projection."""
    t, d = tokens.shape
    if d % heads:
        raise ConfigError(f"head count {heads} does not divide token width {d}")
    dh = d // heads
    q = ad.add(ad.matmul(tokens, params[f"{prefix}.attn.wq"]), params[f"{prefix}.attn.bq"])
    k = ad.add(ad.matmul(tokens, params[f"{prefix}.attn.wk"]), params[f"{prefix}.attn.bk"])
    v = ad.add(ad.matmul(tokens, params[f"{prefix}.attn.wv"]), params[f"{prefix}.attn.bv"])

    def split(x):  # (T, D) -> (heads, T, dh)
        return ad.transpose(ad.reshape(x, (t, heads, dh)), (1, 0, 2))

    q3, k3, v3 = split(q), split(k), split(v)
    scores = ad.mul(ad.matmul(q3, ad.transpose(k3, (0, 2, 1))), Tensor(1.0 / np.sqrt(dh)))
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v3), (1, 0, 2)), (t, d))
    return ad.add(ad.matmul(ctx, params[f"{prefix}.attn.wo"]), params[f"{prefix}.attn.bo"])


def graph_residual(tokens: Tensor, adjacency: np.ndarray, wg: Tensor) -> Tensor:
    """H' = GELU(A @ H @ Wg) + H over the fixed token adjacency."""
    if adjacency.shape != (tokens.shape[0], tokens.shape[0]):
        raise ShapeError(
            f"adjacency extent {adjacency.shape} does not match {tokens.shape[0]} tokens"
        )
    mixed = ad.matmul(ad.matmul(Tensor(adjacency), tokens), wg)
    return ad.add(ad.gelu(mixed), tokens)


def encoder_block(tokens: Tensor, adjacency: np.ndarray, params: dict, prefix: str,
                  config: EncoderConfig) -> Tensor:
    x = ad.add(
        tokens,
        mhsa(
            ad.layer_norm(tokens, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"]),
            params, prefix, config.heads,
        ),
    )
    x = graph_residual(x, adjacency, params[f"{prefix}.graph.wg"])
    h = ad.layer_norm(x, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])
    h = ad.add(ad.matmul(h, params[f"{prefix}.mlp.w1"]), params[f"{prefix}.mlp.b1"])
    h = ad.gelu(h)
    h = ad.add(ad.matmul(h, params[f"{prefix}.mlp.w2"]), params[f"{prefix}.mlp.b2"])
    return ad.add(x, h)


def run_encoder(tokens: Tensor, adjacency: np.ndarray, params: dict, prefix: str,
                config: EncoderConfig) -> Tensor:
    x = tokens
    for b in range(config.depth):
        x = encoder_block(x, adjacency, params, f"{prefix}.block{b}", config)
    return x


def dual_encode(sequence: TokenSequence, adjacency: np.ndarray, params: dict,
                config: EncoderConfig):
    """Run both encoder stacks and fuse their vertex tokens.

    Returns (fused, m_a, m_b): the fixed-weight combination
    fusion_weights[0]*m_a + fusion_weights[1]*m_b plus the individual
    per-encoder vertex features, which the per-encoder losses consume.
    """
    layout = sequence.layout
    if adjacency.shape[0] != layout.total:
        raise ContractError(
            f"adjacency built for {adjacency.shape[0]} tokens, sequence has {layout.total}"
        )
    out_a = run_encoder(sequence.tokens, adjacency, params, "enc_a", config)
    out_b = run_encoder(sequence.tokens, adjacency, params, "enc_b", config)
    m_a = ad.narrow(out_a, 0, layout.vertex_start, layout.n_vertex)
    m_b = ad.narrow(out_b, 0, layout.vertex_start, layout.n_vertex)
    wa, wb = config.fusion_weights
    fused = ad.add(ad.mul(Tensor(wa), m_a), ad.mul(Tensor(wb), m_b))
    return fused, m_a, m_b
