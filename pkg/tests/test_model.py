import dataclasses

import numpy as np
import pytest

from conftest import micro_batch, micro_config
from ddnet import tensor as tn
from ddnet.clfe import clfe_forward, cross_attention_block, fuse_and_embed, project_streams
from ddnet.config import ConfigError, LossWeights
from ddnet.dsgl import (
    build_distance_graph,
    build_semantic_graph,
    dsgl_forward,
    gcn_layer,
    temporal_transformer,
)
from ddnet.gradcheck import finite_diff_check
from ddnet.layers import ParamStore, add_mha, mha
from ddnet.losses import adv_loss, bce
from ddnet.model import DDNet
from ddnet.tda import (
    DisentangledPair,
    adversarial_decision,
    domain_weights,
    encode_multiscale,
    orthogonality_loss,
    video_prototype,
)
from ddnet.tensor import Tensor
from ddnet.training import compute_loss
from oracles import gcn_oracle, np_clfe, np_dsgl, semantic_graph_oracle


def zero_params(model, prefix):
    for n in model.params.names(prefix):
        model.params[n].data = np.zeros_like(model.params[n].data)


# -- clfe -------------------------------------------------------------------

def test_identity_projection_passes_input():
    cfg = micro_config(D_sem=8, D_tex=8)
    m = DDNet(cfg)
    m.params["clfe.proj_sem.w"].data = np.eye(8)
    x = np.random.default_rng(0).standard_normal((6, 8))
    h_sem, _ = project_streams(Tensor(x), Tensor(x), m.params)
    np.testing.assert_array_equal(h_sem.data, x)


def test_projection_dim_mismatch():
    m = DDNet(micro_config())
    with pytest.raises(ConfigError):
        project_streams(Tensor(np.ones((6, 3))), Tensor(np.ones((6, 4))), m.params)


def test_zero_output_projection_leaves_residual():
    m = DDNet(micro_config())
    zero_params(m, "clfe.block0.sem2tex.o")
    zero_params(m, "clfe.block0.tex2sem.o")
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((6, 8)), rng.standard_normal((6, 8))
    out_sem, out_tex = cross_attention_block(Tensor(a), Tensor(b), m.params, 0, 2)
    np.testing.assert_array_equal(out_sem.data, a)
    np.testing.assert_array_equal(out_tex.data, b)


def test_two_frame_attention_by_hand():
    store = ParamStore()
    add_mha(store, np.random.default_rng(0), "att", 2)
    for p in "qkvo":
        store[f"att.{p}.w"].data = np.eye(2)
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    kv = np.array([[2.0, 0.0], [0.0, 0.0]])
    out, attn = mha(Tensor(q), Tensor(kv), Tensor(kv), store, "att", 1, return_attn=True)
    # frame 0 scores (2, 0)/sqrt(2); frame 1 scores (0, 0)
    w = 1 / (1 + np.exp(-2 / np.sqrt(2)))
    np.testing.assert_allclose(attn.data[0], [[w, 1 - w], [0.5, 0.5]], rtol=1e-14)
    np.testing.assert_allclose(out.data, [[2 * w, 0.0], [1.0, 0.0]], rtol=1e-14)


def test_cross_attention_permutation_equivariant():
    m = DDNet(micro_config())
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((6, 8)), rng.standard_normal((6, 8))
    perm = rng.permutation(6)
    s1, t1 = cross_attention_block(Tensor(a), Tensor(b), m.params, 0, 2)
    s2, t2 = cross_attention_block(Tensor(a[perm]), Tensor(b[perm]), m.params, 0, 2)
    np.testing.assert_allclose(s1.data[perm], s2.data, atol=1e-12)
    np.testing.assert_allclose(t1.data[perm], t2.data, atol=1e-12)


def test_clfe_shape_and_length_limit():
    cfg = micro_config()
    m = DDNet(cfg)
    rng = np.random.default_rng(3)
    for T in (1, 4, 6):
        out = clfe_forward(Tensor(rng.standard_normal((T, 5))), Tensor(rng.standard_normal((T, 4))), m.params, cfg)
        assert out.shape == (T, 8)
    with pytest.raises(ConfigError):
        fuse_and_embed(Tensor(np.ones((7, 8))), Tensor(np.ones((7, 8))), m.params)


def test_clfe_two_block_gradients():
    cfg = micro_config(clfe_blocks=2)
    m = DDNet(cfg)
    rng = np.random.default_rng(4)
    sem, tex = rng.standard_normal((2, 6, 5)), rng.standard_normal((2, 6, 4))
    w = rng.standard_normal((2, 6, 8))
    params = m.params.tensors("clfe.")
    rep = finite_diff_check(lambda: tn.tsum(clfe_forward(Tensor(sem), Tensor(tex), m.params, cfg) * w),
                            params, h=1e-5, tol=1e-5)
    assert rep.passed, rep


# -- graphs -----------------------------------------------------------------

def test_distance_graph_closed_form():
    A1 = build_distance_graph(5, 1.0).values
    A2 = build_distance_graph(9, 2.0).values
    assert A1[2, 3] == np.exp(-0.5)
    assert A2[0, 4] == np.exp(-2.0)
    assert np.all(np.diag(A2) == 1.0)
    assert np.array_equal(A2, A2.T)
    assert np.all(np.diff(A2[0]) <= 0)


def test_distance_graph_bad_sigma():
    with pytest.raises(ConfigError):
        build_distance_graph(4, 0.0)


def test_distance_graph_cached_and_read_only():
    a, b = build_distance_graph(7, 2.0), build_distance_graph(7, 2.0)
    assert a.values is b.values
    with pytest.raises(ValueError):
        a.values[0, 0] = 3.0


def test_semantic_graph_uniform():
    X = Tensor(np.tile(np.random.default_rng(5).standard_normal(4), (5, 1)))
    A = build_semantic_graph(X, Tensor(np.eye(4)), Tensor(np.eye(4)), 0.7).values.data
    np.testing.assert_allclose(A, np.full((5, 5), 0.2), atol=1e-15)


def test_semantic_graph_orthogonal_rows_give_identity():
    A = build_semantic_graph(Tensor(np.eye(4)), Tensor(np.eye(4)), Tensor(np.eye(4)), 0.7).values.data
    assert A.tolist() == np.eye(4).tolist()


def test_semantic_graph_hand_built():
    X = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
    I = np.eye(2)
    A = build_semantic_graph(Tensor(X), Tensor(I), Tensor(I), 0.7).values.data
    np.testing.assert_allclose(A, semantic_graph_oracle(X, I, I, 0.7), atol=1e-15)
    assert A[0, 2] == 0.0 and A[2, 2] == 1.0


def test_semantic_graph_diagonal_kept_even_when_dissimilar():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((5, 3))
    # W_phi = -W_theta makes every self-similarity -1
    W = rng.standard_normal((3, 3))
    g = build_semantic_graph(Tensor(X), Tensor(W), Tensor(-W), 0.9)
    assert np.all(np.diag(g.mask))
    np.testing.assert_allclose(g.values.data.sum(1), 1.0, atol=1e-12)


def test_gcn_layer_trivial_cases():
    H = np.random.default_rng(7).standard_normal((4, 3))
    out = gcn_layer(Tensor(H), np.eye(4), Tensor(np.zeros((3, 3))), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, H)
    out = gcn_layer(Tensor(H), np.eye(4), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, 2 * H)
    rng = np.random.default_rng(8)
    A, W, b = rng.random((4, 4)), rng.standard_normal((3, 3)), rng.standard_normal(3)
    np.testing.assert_allclose(gcn_layer(Tensor(H), A, Tensor(W), Tensor(b)).data, gcn_oracle(H, A, W, b),
                               atol=1e-12)


def test_gcn_row_stochastic_norm_bound():
    rng = np.random.default_rng(9)
    for _ in range(50):
        H = rng.standard_normal((5, 3))
        A = rng.random((5, 5))
        A /= A.sum(1, keepdims=True)
        out = gcn_layer(Tensor(H), A, Tensor(np.eye(3)), Tensor(np.zeros(3))).data
        assert np.abs(out).max() <= 2 * np.abs(H).max() + 1e-12


# -- dsgl -------------------------------------------------------------------

def test_transformer_zero_weights_is_identity():
    cfg = micro_config(transformer_layers=2)
    m = DDNet(cfg)
    for i in range(2):
        zero_params(m, f"dsgl.tf{i}.attn.o")
        zero_params(m, f"dsgl.tf{i}.ff2")
    x = np.random.default_rng(10).standard_normal((6, 8))
    assert np.array_equal(temporal_transformer(Tensor(x), m.params, cfg).data, x)


def test_zeroed_head_gives_half():
    cfg = micro_config()
    m = DDNet(cfg)
    zero_params(m, "head.frame")
    zero_params(m, "dsgl.gc")
    p = dsgl_forward(Tensor(np.random.default_rng(11).standard_normal((6, 8))), m.params, cfg).probs.data
    assert np.all(p == 0.5)


def test_single_frame_graphs_are_trivial():
    cfg = micro_config()
    m = DDNet(cfg)
    out = dsgl_forward(Tensor(np.random.default_rng(12).standard_normal((1, 8))), m.params, cfg)
    assert out.A_sim.values.data.tolist() == [[1.0]]
    assert build_distance_graph(1, cfg.sigma).values.tolist() == [[1.0]]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forward_matches_straight_line_oracle(seed):
    cfg = micro_config(transformer_layers=2, clfe_blocks=2)
    m = DDNet(cfg, seed=seed)
    b = micro_batch(seed)
    P = m.params.state()
    out = m.forward(b.sem, b.tex, with_tda=False)
    for i in range(len(b)):
        fused = np_clfe(b.sem[i], b.tex[i], P, cfg)
        np.testing.assert_allclose(out.fused.data[i], fused, atol=1e-12, rtol=0)
        probs, f_final = np_dsgl(fused, P, cfg)
        np.testing.assert_allclose(out.frames.F_final.data[i], f_final, atol=1e-12, rtol=0)
        np.testing.assert_allclose(out.frames.probs.data[i], probs, atol=1e-12, rtol=0)


def test_batched_forward_equals_per_video():
    cfg = micro_config()
    m = DDNet(cfg)
    b = micro_batch(3)
    full = m.forward(b.sem, b.tex, with_tda=False).frames.probs.data
    for i in range(len(b)):
        one = m.forward(b.sem[i:i + 1], b.tex[i:i + 1], with_tda=False).frames.probs.data
        np.testing.assert_allclose(full[i], one[0], atol=1e-14)


def test_dsgl_gradients_with_bce():
    cfg = micro_config()
    m = DDNet(cfg)
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 6, 8))
    y = rng.random((2, 6)) < 0.5
    params = m.params.tensors("dsgl.") + m.params.tensors("head.frame")
    rep = finite_diff_check(lambda: bce(dsgl_forward(Tensor(x), m.params, cfg).probs, y), params,
                            h=1e-5, tol=1e-4)
    assert rep.passed, rep


# -- tda --------------------------------------------------------------------

def test_prototype_examples():
    c = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(video_prototype(Tensor(np.tile(c, (4, 1)))).data, c)
    v = np.array([0.5, 1.5])
    assert np.all(video_prototype(Tensor(np.stack([v, -v]))).data == 0)
    x = np.random.default_rng(14).standard_normal((7, 3))
    np.testing.assert_allclose(video_prototype(Tensor(x)).data, x.sum(0) / 7, atol=1e-15)
    with pytest.raises(ValueError):
        video_prototype(Tensor(np.zeros((0, 3))))


def test_encode_zero_kernels_gives_bias():
    cfg = micro_config()
    m = DDNet(cfg)
    zero_params(m, "tda.conv")
    m.params["tda.merge.b"].data = np.arange(8.0)
    out = encode_multiscale(Tensor(np.random.default_rng(15).standard_normal((6, 8))), m.params, cfg)
    np.testing.assert_array_equal(out.data, np.arange(8.0))


def test_encode_identity_kernel_reduces_to_prototype():
    cfg = micro_config()
    m = DDNet(cfg)
    zero_params(m, "tda.")
    m.params["tda.conv1"].data = np.eye(8)[None]
    merge = np.zeros((24, 8))
    merge[:8] = np.eye(8)  # the k=1 branch comes first
    m.params["tda.merge.w"].data = merge
    x = np.random.default_rng(16).standard_normal((6, 8))
    np.testing.assert_allclose(encode_multiscale(Tensor(x), m.params, cfg).data, x.mean(0), atol=1e-15)


def test_pool_then_conv_uses_centre_taps():
    cfg = micro_config(tda_order="pool_then_conv")
    m = DDNet(cfg)
    x = np.random.default_rng(17).standard_normal((6, 8))
    got = encode_multiscale(Tensor(x), m.params, cfg).data
    proto = x.mean(0)
    P = m.params.state()
    # a length-1 sequence only sees the tap aligned with frame 0 after padding
    taps = {1: 0, 3: 1, 8: 4}
    pooled = np.concatenate([proto @ P[f"tda.conv{k}"][taps[k]] for k in (1, 3, 8)])
    np.testing.assert_allclose(got, pooled @ P["tda.merge.w"] + P["tda.merge.b"], atol=1e-13)


def test_orthogonality_examples():
    v = Tensor([[1.0, 2.0]])
    assert orthogonality_loss(DisentangledPair(v, v)).data == pytest.approx(1.0, abs=1e-8)
    assert orthogonality_loss(DisentangledPair(v, -v)).data == pytest.approx(1.0, abs=1e-8)
    ff = Tensor([[1.0, 0.0], [1.0, 1.0]])
    fs = Tensor([[0.0, 3.0], [2.0, 2.0]])
    assert orthogonality_loss(DisentangledPair(ff, fs)).data == pytest.approx(0.5, abs=1e-8)
    zero = orthogonality_loss(DisentangledPair(Tensor([[0.0, 0.0]]), Tensor([[1.0, 1.0]])))
    assert zero.data == 0.0


def test_orthogonality_scale_invariant_and_bounded():
    rng = np.random.default_rng(18)
    for _ in range(50):
        a, b = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
        l1 = orthogonality_loss(DisentangledPair(Tensor(a), Tensor(b))).data
        l2 = orthogonality_loss(DisentangledPair(Tensor(a * 7.0), Tensor(b * 0.3))).data
        assert 0 <= l1 <= 1
        assert abs(l1 - l2) < 1e-8


def test_same_projection_maximises_orth_loss():
    cfg = micro_config()
    m = DDNet(cfg)
    m.params["tda.proj_s.w"].data = m.params["tda.proj_f.w"].data.copy()
    out = m.forward(*(lambda b: (b.sem, b.tex))(micro_batch()))
    assert float(out.tda.L_orth.data) == pytest.approx(1.0, abs=1e-7)


def test_domain_weights_simplex():
    cfg = micro_config(K=3)
    m = DDNet(cfg)
    rng = np.random.default_rng(19)
    for _ in range(100):
        w = domain_weights(Tensor(rng.standard_normal((4, 8)) * 10), m.params).data
        assert np.all(w >= 0)
        assert np.all(np.abs(w.sum(1) - 1) <= 1e-9)
    zero_params(m, "tda.weight_gen")
    np.testing.assert_allclose(domain_weights(Tensor(np.ones((1, 8))), m.params).data, [[1 / 3] * 3])
    m.params["tda.weight_gen.b"].data = np.array([50.0, 0.0, 0.0])
    w = domain_weights(Tensor(np.ones((1, 8))), m.params).data[0]
    assert abs(w[0] - 1) < 1e-9


def test_selector_weights_pick_one_expert():
    m = DDNet(micro_config())
    F = Tensor(np.random.default_rng(20).standard_normal((2, 8)))
    out = adversarial_decision(F, Tensor(np.array([[1.0, 0.0], [1.0, 0.0]])), m.params)
    np.testing.assert_array_equal(out.O_adv.data, out.expert_logits.data[0])


def test_identical_experts_ignore_omega():
    m = DDNet(micro_config())
    for n in ("w1", "b1", "w2", "b2"):
        t = m.params[f"tda.experts.{n}"]
        t.data = np.repeat(t.data[:1], 2, axis=0)
    F = Tensor(np.random.default_rng(21).standard_normal((2, 8)))
    a = adversarial_decision(F, Tensor(np.array([[0.2, 0.8], [0.6, 0.4]])), m.params).O_adv.data
    b = adversarial_decision(F, Tensor(np.array([[1.0, 0.0], [0.0, 1.0]])), m.params).O_adv.data
    np.testing.assert_allclose(a, b, atol=1e-14)


def _adv_grad(m, F, domains, use_grl=True, stop_grad=True):
    F_f = Tensor(F.copy(), requires_grad=True)
    omega = domain_weights(F_f, m.params, stop_grad=stop_grad)
    out = adversarial_decision(F_f, omega, m.params, grl_lambda=1.0, use_grl=use_grl)
    adv_loss(out.O_adv, domains).backward()
    return F_f.grad


def test_grl_contract():
    m = DDNet(micro_config())
    F = np.random.default_rng(22).standard_normal((2, 8))
    d = np.array([0, 1])
    with_grl = _adv_grad(m, F, d, use_grl=True)
    without = _adv_grad(m, F, d, use_grl=False)
    assert np.abs(without).max() > 0
    np.testing.assert_allclose(with_grl, -without, rtol=0, atol=1e-12)


def test_stop_gradient_contract():
    m = DDNet(micro_config())
    F = np.random.default_rng(23).standard_normal((2, 8))
    d = np.array([1, 0])
    # path through the weight generator alone
    F_f = Tensor(F.copy(), requires_grad=True)
    omega_only = domain_weights(F_f, m.params, stop_grad=True)
    tn.tsum(omega_only * np.array([[1.0, -2.0], [0.5, 3.0]])).backward()
    assert F_f.grad is None or np.all(F_f.grad == 0)

    stopped = _adv_grad(m, F, d, stop_grad=True)
    live = _adv_grad(m, F, d, stop_grad=False)
    assert np.abs(live - stopped).max() > 0

    # the difference is exactly the weight-generator contribution
    F_w = Tensor(F.copy(), requires_grad=True)
    omega = domain_weights(F_w, m.params, stop_grad=False)
    out = adversarial_decision(Tensor(F.copy()), omega, m.params)
    adv_loss(out.O_adv, d).backward()
    np.testing.assert_allclose(live - stopped, F_w.grad, rtol=0, atol=1e-12)


# -- full model -------------------------------------------------------------

def test_full_model_gradcheck_small():
    cfg = micro_config(kernel_sizes=(1, 3))
    m = DDNet(cfg)
    b = micro_batch()
    params = [m.params[n] for n in ("tda.experts.w2", "tda.proj_f.w", "dsgl.gc1.w", "clfe.proj_sem.w")]
    rep = finite_diff_check(lambda: compute_loss(m, b, LossWeights())[0], params, h=1e-4, tol=1e-4)
    assert rep.passed, rep


def test_trainable_respects_toggles():
    names = lambda cfg: [n for n, _ in DDNet(cfg).trainable()]
    assert not any(n.startswith("tda.") for n in names(micro_config(tda_enabled=False)))
    no_gcn = names(micro_config(use_gcn=False))
    assert not any(n.startswith(("dsgl.gc", "dsgl.w_", "dsgl.fuse")) for n in no_gcn)
    assert any(n.startswith("dsgl.tf0") for n in no_gcn)


def test_disabling_tda_keeps_other_parameters():
    a = DDNet(micro_config(), seed=4).params.state()
    b = DDNet(micro_config(tda_enabled=False, use_gcn=False), seed=4).params.state()
    for n in a:
        if not n.startswith("tda."):
            assert np.array_equal(a[n], b[n]), n


def test_config_change_is_not_shared():
    cfg = micro_config()
    assert dataclasses.replace(cfg, tau=0.5).tau == 0.5 and cfg.tau == 0.3
