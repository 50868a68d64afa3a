"""Dual-stream graph learning: temporal transformer, distance and semantic graphs, GCN streams."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tn
from .config import ConfigError, ModelConfig
from .layers import ParamStore, add_layer_norm, add_linear, add_mha, layer_norm, linear, mha
from .tensor import Tensor

GCN_LAYERS = ("gc1", "gc2", "gc3", "gc4")


@dataclass
class AdjacencyMatrix:
    values: np.ndarray | Tensor
    kind: str  # "distance" or "semantic"
    mask: np.ndarray | None = None


@dataclass
class FramePredictions:
    probs: Tensor
    logits: Tensor
    F_final: Tensor
    X: Tensor
    A_sim: AdjacencyMatrix | None = None


def init_dsgl(store: ParamStore, cfg: ModelConfig, rng_tf: np.random.Generator,
              rng_graph: np.random.Generator) -> None:
    D = cfg.D
    for i in range(cfg.transformer_layers):
        p = f"dsgl.tf{i}"
        add_layer_norm(store, f"{p}.ln1", D)
        add_mha(store, rng_tf, f"{p}.attn", D)
        add_layer_norm(store, f"{p}.ln2", D)
        add_linear(store, rng_tf, f"{p}.ff1", D, cfg.ffn_mult * D)
        add_linear(store, rng_tf, f"{p}.ff2", cfg.ffn_mult * D, D)
    add_linear(store, rng_graph, "dsgl.w_theta", D, D, bias=False)
    add_linear(store, rng_graph, "dsgl.w_phi", D, D, bias=False)
    for name in GCN_LAYERS:
        # small init keeps the unnormalised distance graph from blowing up activations
        add_linear(store, rng_graph, f"dsgl.{name}", D, D, scale=0.3)
    add_linear(store, rng_graph, "dsgl.fuse", 2 * D, D)


def temporal_transformer(x: Tensor, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """Pre-norm self-attention encoder stack (no final norm)."""
    for i in range(cfg.transformer_layers):
        p = f"dsgl.tf{i}"
        h = layer_norm(x, store, f"{p}.ln1", cfg.ln_eps)
        x = x + mha(h, h, h, store, f"{p}.attn", cfg.n_heads)
        h = layer_norm(x, store, f"{p}.ln2", cfg.ln_eps)
        x = x + linear(tn.gelu(linear(h, store, f"{p}.ff1")), store, f"{p}.ff2")
    return x


@lru_cache(maxsize=32)
def _distance_values(T: int, sigma: float) -> np.ndarray:
    idx = np.arange(T, dtype=np.float64)
    diff = idx[:, None] - idx[None, :]
    out = np.exp(-(diff * diff) / (2.0 * sigma * sigma))
    out.setflags(write=False)
    return out


def build_distance_graph(T: int, sigma: float) -> AdjacencyMatrix:
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    return AdjacencyMatrix(_distance_values(int(T), float(sigma)), "distance")


def _row_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    return x / tn.sqrt(tn.tsum(x * x, axis=-1, keepdims=True) + eps)


def build_semantic_graph(x: Tensor, w_theta: Tensor, w_phi: Tensor, tau: float) -> AdjacencyMatrix:
    """Cosine similarity of the two projections, masked below ``tau``, softmax over survivors.

    The diagonal is always kept so no row is empty.
    """
    a = _row_normalize(tn.matmul(x, w_theta))
    b = _row_normalize(tn.matmul(x, w_phi))
    sim = tn.matmul(a, b.transpose())
    T = sim.shape[-1]
    mask = (sim.data >= tau) | np.eye(T, dtype=bool)
    mask = tn.frozen(mask)
    return AdjacencyMatrix(tn.softmax_rows(sim, mask), "semantic", mask)


def gcn_layer(h: Tensor, A, w: Tensor, b: Tensor) -> Tensor:
    """``A (h W) + b + h``."""
    A = A.values if isinstance(A, AdjacencyMatrix) else A
    return tn.matmul(A, tn.matmul(h, w)) + b + h


def _gcn(h: Tensor, A, store: ParamStore, name: str) -> Tensor:
    return gcn_layer(h, A, store[f"dsgl.{name}.w"], store[f"dsgl.{name}.b"])


def graph_streams(x: Tensor, store: ParamStore, cfg: ModelConfig) -> tuple[Tensor, AdjacencyMatrix]:
    A_sim = build_semantic_graph(x, store["dsgl.w_theta.w"], store["dsgl.w_phi.w"], cfg.tau)
    A_dist = build_distance_graph(x.shape[-2], cfg.sigma)
    s = _gcn(_gcn(x, A_sim, store, "gc1"), A_sim, store, "gc2")
    d = _gcn(_gcn(x, A_dist, store, "gc3"), A_dist, store, "gc4")
    return linear(tn.concat([s, d], axis=-1), store, "dsgl.fuse"), A_sim


def dsgl_forward(fused: Tensor, store: ParamStore, cfg: ModelConfig) -> FramePredictions:
    x = temporal_transformer(fused, store, cfg)
    A_sim = None
    if cfg.use_gcn:
        f_final, A_sim = graph_streams(x, store, cfg)
    else:
        f_final = x
    logits = linear(f_final, store, "head.frame")
    logits = logits.reshape(logits.shape[:-1])
    return FramePredictions(tn.sigmoid(logits), logits, f_final, x, A_sim)
