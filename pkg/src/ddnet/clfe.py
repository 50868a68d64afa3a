"""Cross-level feature embedding: fuse the semantic and textural streams."""
from __future__ import annotations

import numpy as np

from . import tensor as tn
from .config import ConfigError, ModelConfig
from .layers import ParamStore, add_layer_norm, add_linear, add_mha, layer_norm, linear, mha
from .tensor import Tensor


def init_clfe(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    D = cfg.D
    add_linear(store, rng, "clfe.proj_sem", cfg.D_sem, D)
    add_linear(store, rng, "clfe.proj_tex", cfg.D_tex, D)
    for i in range(cfg.clfe_blocks):
        p = f"clfe.block{i}"
        for stream in ("sem", "tex"):
            add_layer_norm(store, f"{p}.ln_{stream}", D)
        # sem2tex: semantic queries attend to textural keys/values, and vice versa
        add_mha(store, rng, f"{p}.sem2tex", D)
        add_mha(store, rng, f"{p}.tex2sem", D)
    add_linear(store, rng, "clfe.fuse", 2 * D, D)
    store.add("clfe.pos_emb", 0.02 * rng.standard_normal((cfg.T_max, D)))


def project_streams(sem: Tensor, tex: Tensor, store: ParamStore) -> tuple[Tensor, Tensor]:
    w_sem, w_tex = store["clfe.proj_sem.w"], store["clfe.proj_tex.w"]
    if sem.shape[-1] != w_sem.shape[0] or tex.shape[-1] != w_tex.shape[0]:
        raise ConfigError(
            f"stream dims ({sem.shape[-1]}, {tex.shape[-1]}) do not match the model "
            f"({w_sem.shape[0]}, {w_tex.shape[0]})")
    return linear(sem, store, "clfe.proj_sem"), linear(tex, store, "clfe.proj_tex")


def cross_attention_block(h_sem: Tensor, h_tex: Tensor, store: ParamStore, block: int, n_heads: int,
                          eps: float = 1e-5, return_attn: bool = False):
    """One bidirectional block; both directions read the block inputs, with residuals."""
    if h_sem.shape != h_tex.shape:
        raise ValueError(f"stream shapes differ: {h_sem.shape} vs {h_tex.shape}")
    p = f"clfe.block{block}"
    n_sem = layer_norm(h_sem, store, f"{p}.ln_sem", eps)
    n_tex = layer_norm(h_tex, store, f"{p}.ln_tex", eps)
    upd_sem, a_sem = mha(n_sem, n_tex, n_tex, store, f"{p}.sem2tex", n_heads, return_attn=True)
    upd_tex, a_tex = mha(n_tex, n_sem, n_sem, store, f"{p}.tex2sem", n_heads, return_attn=True)
    out = (h_sem + upd_sem, h_tex + upd_tex)
    return (out, (a_sem, a_tex)) if return_attn else out


def fuse_and_embed(h_sem: Tensor, h_tex: Tensor, store: ParamStore) -> Tensor:
    T = h_sem.shape[-2]
    pos = store["clfe.pos_emb"]
    if T > pos.shape[0]:
        raise ConfigError(f"sequence length {T} exceeds position table T_max={pos.shape[0]}")
    fused = linear(tn.concat([h_sem, h_tex], axis=-1), store, "clfe.fuse")
    return fused + pos[:T]


def clfe_forward(sem: Tensor, tex: Tensor, store: ParamStore, cfg: ModelConfig) -> Tensor:
    h_sem, h_tex = project_streams(sem, tex, store)
    for i in range(cfg.clfe_blocks):
        h_sem, h_tex = cross_attention_block(h_sem, h_tex, store, i, cfg.n_heads, cfg.ln_eps)
    return fuse_and_embed(h_sem, h_tex, store)
