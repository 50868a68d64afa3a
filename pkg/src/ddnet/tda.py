"""Trace disentanglement and adaptation branch (training only)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .config import ModelConfig
from .layers import ParamStore, add_linear, linear
from .tensor import Tensor

ORTH_EPS = 1e-8


@dataclass
class DisentangledPair:
    F_f: Tensor  # (B, D_t)
    F_s: Tensor


@dataclass
class AdversarialOutput:
    omega: Tensor          # (B, K)
    expert_logits: Tensor  # (K, B, K): expert k's logits for each video
    O_adv: Tensor          # (B, K)


def init_tda(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    D = D_c = D_t = cfg.D
    H = cfg.expert_hidden or D_t
    K = cfg.K
    for k in cfg.kernel_sizes:
        store.add(f"tda.conv{k}", rng.standard_normal((k, D, D_c)) * np.sqrt(1.0 / (k * D)))
    add_linear(store, rng, "tda.merge", len(cfg.kernel_sizes) * D_c, D_t)
    add_linear(store, rng, "tda.proj_f", D_t, D_t)
    add_linear(store, rng, "tda.proj_s", D_t, D_t)
    add_linear(store, rng, "tda.weight_gen", D_t, K)
    store.add("tda.experts.w1", rng.standard_normal((K, D_t, H)) * np.sqrt(1.0 / D_t))
    store.add("tda.experts.b1", np.zeros((K, 1, H)))
    store.add("tda.experts.w2", rng.standard_normal((K, H, K)) * np.sqrt(1.0 / H))
    store.add("tda.experts.b2", np.zeros((K, 1, K)))


def video_prototype(frames: Tensor) -> Tensor:
    if frames.shape[-2] == 0:
        raise ValueError("cannot pool an empty sequence")
    return tn.mean(frames, axis=-2)


def encode_multiscale(frames: Tensor, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """Multi-scale temporal convolutions, each pooled over time, merged by a linear map.

    With ``tda_order="pool_then_conv"`` the frames are pooled first and the
    convolutions see a length-1 sequence.
    """
    if cfg.tda_order == "pool_then_conv":
        seq = video_prototype(frames)
        seq = seq.reshape(seq.shape[:-1] + (1, seq.shape[-1]))
    else:
        seq = frames
    pooled = [video_prototype(tn.conv1d(seq, store[f"tda.conv{k}"])) for k in cfg.kernel_sizes]
    return linear(tn.concat(pooled, axis=-1), store, "tda.merge")


def disentangle(encoded: Tensor, store: ParamStore) -> DisentangledPair:
    return DisentangledPair(linear(encoded, store, "tda.proj_f"), linear(encoded, store, "tda.proj_s"))


def cosine(a: Tensor, b: Tensor, eps: float = ORTH_EPS) -> Tensor:
    dot = tn.tsum(a * b, axis=-1)
    # the tiny floor keeps sqrt differentiable at a zero vector
    na = tn.sqrt(tn.tsum(a * a, axis=-1) + 1e-30)
    nb = tn.sqrt(tn.tsum(b * b, axis=-1) + 1e-30)
    return dot / (na * nb + eps)


def orthogonality_loss(pair: DisentangledPair) -> Tensor:
    """Mean absolute cosine similarity between F_f and F_s over the batch."""
    return tn.mean(tn.tabs(cosine(pair.F_f, pair.F_s)))


def domain_weights(F_f: Tensor, store: ParamStore, stop_grad: bool = True) -> Tensor:
    src = tn.stop_gradient(F_f) if stop_grad else F_f
    return tn.softmax_rows(linear(src, store, "tda.weight_gen"))


def expert_bank(x: Tensor, store: ParamStore) -> Tensor:
    """All K experts at once: (B, D_t) -> (K, B, K) logits.

    Each expert sees its input L2-normalised, which bounds how far the
    reversed gradient can push the features; only their direction is contested.
    """
    x = x / tn.sqrt(tn.tsum(x * x, axis=-1, keepdims=True) + 1e-12)
    h = tn.gelu(tn.matmul(x, store["tda.experts.w1"]) + store["tda.experts.b1"])
    return tn.matmul(h, store["tda.experts.w2"]) + store["tda.experts.b2"]


def adversarial_decision(F_f: Tensor, omega: Tensor, store: ParamStore, grl_lambda: float = 1.0,
                         use_grl: bool = True) -> AdversarialOutput:
    src = tn.grad_reverse(F_f, grl_lambda) if use_grl else F_f
    experts = expert_bank(src, store)
    w = omega.transpose((1, 0)).reshape(omega.shape[1], omega.shape[0], 1)
    return AdversarialOutput(omega, experts, tn.tsum(w * experts, axis=0))


@dataclass
class TdaOutput:
    pair: DisentangledPair
    adv: AdversarialOutput
    L_orth: Tensor


def tda_forward(f_final: Tensor, store: ParamStore, cfg: ModelConfig, use_grl: bool = True,
                stop_grad: bool = True) -> TdaOutput:
    pair = disentangle(encode_multiscale(f_final, store, cfg), store)
    omega = domain_weights(pair.F_f, store, stop_grad=stop_grad)
    adv = adversarial_decision(pair.F_f, omega, store, cfg.grl_lambda, use_grl=use_grl)
    return TdaOutput(pair, adv, orthogonality_loss(pair))
