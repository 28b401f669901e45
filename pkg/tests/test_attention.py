import numpy as np
import pytest

from cohortmil import autodiff as ad
from cohortmil.attention import (AttentionConfig, cohort_aware_query,
                                 init_mcaa_params, mcaa_forward, mha_forward,
                                 project_qkv, query_attention_scores)
from cohortmil.errors import ConfigError
from cohortmil.verify import suite_reduction_bitwise, suite_selective_routing

CFG = AttentionConfig(dim=2, n_heads=1, head_dim=2, n_cohorts=2)


def bind_bank(g, w_q_d, w_q_c, w_k, w_v, prefix="attn.h0"):
    params = {f"{prefix}.w_q_d": w_q_d, f"{prefix}.w_k": w_k, f"{prefix}.w_v": w_v}
    for i, w in enumerate(w_q_c):
        params[f"{prefix}.w_q_c{i}"] = w
    return g.bind(params)


def test_identity_projection():
    g = ad.Graph()
    eye = np.eye(2)
    pt = bind_bank(g, eye, [eye, eye], eye, eye)
    x = g.constant(np.array([[0.3, -1.2], [2.0, 0.5]]))
    q_d, q_c, k, v = project_qkv(pt, x, 0, CFG, "attn.h0")
    for t in (q_d, q_c, k, v):
        assert np.array_equal(t.data, x.data)


def test_cohort_selection_gradients():
    g = ad.Graph()
    rng = np.random.default_rng(0)
    pt = bind_bank(g, rng.standard_normal((2, 2)),
                   [rng.standard_normal((2, 2)), rng.standard_normal((2, 2))],
                   rng.standard_normal((2, 2)), rng.standard_normal((2, 2)))
    x = g.constant(rng.standard_normal((3, 2)))
    q_d, q_c, k, v = project_qkv(pt, x, 1, CFG, "attn.h0")
    grads = g.backward(ad.sum_(q_c))
    assert np.all(grads["attn.h0.w_q_c0"] == 0.0)
    assert np.any(grads["attn.h0.w_q_c1"] != 0.0)


def test_projection_hand_value():
    g = ad.Graph()
    w = 3.0 * np.eye(2)
    pt = bind_bank(g, w, [np.eye(2), np.eye(2)], np.eye(2), np.eye(2))
    x = g.constant(np.array([[1.0, 2.0]]))
    q_d, *_ = project_qkv(pt, x, 0, CFG, "attn.h0")
    assert np.array_equal(q_d.data, [[3.0, 6.0]])


def test_invalid_cohort_rejected():
    g = ad.Graph()
    eye = np.eye(2)
    pt = bind_bank(g, eye, [eye, eye], eye, eye)
    x = g.constant(np.zeros((1, 2)))
    with pytest.raises(ConfigError):
        project_qkv(pt, x, 2, CFG, "attn.h0")


def qa_params(g, w1, b1, w2, b2, prefix="qa"):
    return g.bind({f"{prefix}.w1": w1, f"{prefix}.b1": b1,
                   f"{prefix}.w2": w2, f"{prefix}.b2": b2})


def test_qa_zero_head_gives_zero_scores():
    g = ad.Graph()
    pt = qa_params(g, np.ones((2, 3)), np.zeros(3), np.zeros((3, 1)), np.zeros(1))
    q = g.constant(np.random.default_rng(1).standard_normal((4, 2)))
    s = query_attention_scores(pt, q, "qa")
    assert s.shape == (4, 1)
    assert np.all(s.data == 0.0)


def test_qa_shape_and_rowwise():
    g = ad.Graph()
    rng = np.random.default_rng(2)
    pt = qa_params(g, rng.standard_normal((2, 4)), rng.standard_normal(4),
                   rng.standard_normal((4, 1)), rng.standard_normal(1))
    row = rng.standard_normal(2)
    q = g.constant(np.stack([row, row, rng.standard_normal(2)]))
    s = query_attention_scores(pt, q, "qa")
    assert s.shape == (3, 1)
    assert s.data[0, 0] == s.data[1, 0]   # duplicate rows, duplicate scores


def test_cohort_aware_query_symmetry():
    g = ad.Graph()
    q = g.constant(np.random.default_rng(3).standard_normal((4, 2)))
    s = g.constant(np.random.default_rng(4).standard_normal((4, 1)))
    q_ca, a_d, a_c = cohort_aware_query(q, q, s, s)
    assert np.allclose(a_d.data, 0.5)
    assert np.allclose(a_c.data, 0.5)
    assert np.allclose(q_ca.data, q.data)


def test_cohort_aware_query_saturation():
    g = ad.Graph()
    rng = np.random.default_rng(5)
    q_d = g.constant(rng.standard_normal((3, 2)))
    q_c = g.constant(rng.standard_normal((3, 2)))
    s_d = g.constant(np.full((3, 1), 20.0))
    s_c = g.constant(np.zeros((3, 1)))
    q_ca, a_d, a_c = cohort_aware_query(q_d, q_c, s_d, s_c)
    assert np.allclose(q_ca.data, q_d.data, atol=1e-8)


def test_cohort_aware_query_hand_mix():
    g = ad.Graph()
    q_d = g.constant(np.array([[1.0, 0.0]]))
    q_c = g.constant(np.array([[0.0, 2.0]]))
    # scores chosen so alpha_d = 0.25
    s_d = g.constant(np.array([[0.0]]))
    s_c = g.constant(np.array([[np.log(3.0)]]))
    q_ca, a_d, a_c = cohort_aware_query(q_d, q_c, s_d, s_c)
    assert abs(a_d.data[0, 0] - 0.25) < 1e-12
    assert np.allclose(q_ca.data, [[0.25, 1.5]], atol=1e-12)


def test_alphas_complementary_and_bounded():
    g = ad.Graph()
    rng = np.random.default_rng(6)
    q_d = g.constant(rng.standard_normal((8, 2)))
    q_c = g.constant(rng.standard_normal((8, 2)))
    s_d = g.constant(rng.standard_normal((8, 1)))
    s_c = g.constant(rng.standard_normal((8, 1)))
    _, a_d, a_c = cohort_aware_query(q_d, q_c, s_d, s_c)
    total = a_d.data + a_c.data
    assert np.allclose(total, 1.0, atol=1e-12)
    assert np.all(a_d.data > 0) and np.all(a_d.data < 1)


def full_cfg():
    return AttentionConfig(dim=4, n_heads=2, head_dim=2, n_cohorts=2)


def test_uniform_attention_when_keys_zero():
    cfg = full_cfg()
    rng = np.random.default_rng(7)
    params = init_mcaa_params(cfg, rng, "attn")
    for h in range(cfg.n_heads):
        params[f"attn.h{h}.w_k"] = np.zeros((4, 2))
    params["attn.w_o"] = np.eye(4)
    params["attn.b_o"] = np.zeros(4)
    g = ad.Graph()
    pt = g.bind(params)
    x = g.constant(rng.standard_normal((5, 4)))
    aux = {}
    out = mcaa_forward(pt, x, 0, cfg, "attn", aux=aux)
    for h in range(cfg.n_heads):
        probs = aux[f"head{h}"]["probs"].data
        assert np.allclose(probs, 1.0 / 5, atol=1e-12)
    # with w_o = identity, each head output is the column-mean of its values
    v0 = x.data @ params["attn.h0.w_v"]
    assert np.allclose(out.data[:, :2], np.broadcast_to(v0.mean(axis=0), (5, 2)), atol=1e-12)


def test_single_token_attention_weight_one():
    cfg = full_cfg()
    rng = np.random.default_rng(8)
    params = init_mcaa_params(cfg, rng, "attn")
    g = ad.Graph()
    pt = g.bind(params)
    x = g.constant(rng.standard_normal((1, 4)))
    aux = {}
    mcaa_forward(pt, x, 1, cfg, "attn", aux=aux)
    assert np.allclose(aux["head0"]["probs"].data, [[1.0]])


def test_scalar_head_hand_computation():
    # 2 tokens, one scalar head: q_ca=[1,0], k=[1,0], v=[2,4]
    q = np.array([[1.0], [0.0]])
    k = np.array([[1.0], [0.0]])
    v = np.array([[2.0], [4.0]])
    g = ad.Graph()
    from cohortmil.attention import _sdp_attention
    out, probs = _sdp_attention(g.constant(q), g.constant(k), g.constant(v), 1)
    expect = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
    assert np.allclose(probs.data[0], expect, atol=1e-4)
    assert abs(out.data[0, 0] - (expect[0] * 2 + expect[1] * 4)) < 1e-4
    assert abs(out.data[0, 0] - 2.5378) < 5e-4


def test_attention_rows_sum_to_one():
    cfg = full_cfg()
    rng = np.random.default_rng(9)
    params = init_mcaa_params(cfg, rng, "attn")
    g = ad.Graph()
    pt = g.bind(params)
    x = g.constant(rng.standard_normal((6, 4)))
    aux = {}
    mcaa_forward(pt, x, 0, cfg, "attn", aux=aux)
    for h in range(cfg.n_heads):
        sums = aux[f"head{h}"]["probs"].data.sum(axis=-1)
        assert np.allclose(sums, 1.0, atol=1e-9)


def test_permutation_equivariance():
    cfg = full_cfg()
    rng = np.random.default_rng(10)
    params = init_mcaa_params(cfg, rng, "attn")
    x = rng.standard_normal((7, 4))
    perm = rng.permutation(7)

    def forward(arr):
        g = ad.Graph()
        pt = g.bind(params)
        return mcaa_forward(pt, g.constant(arr), 0, cfg, "attn").data

    assert np.allclose(forward(x)[perm], forward(x[perm]), atol=1e-12)


def test_selective_routing_through_depth():
    suite_selective_routing()


def test_reduction_to_plain_attention_bitwise():
    suite_reduction_bitwise()


def test_plain_forward_matches_manual_attention():
    cfg = full_cfg()
    rng = np.random.default_rng(11)
    params = init_mcaa_params(cfg, rng, "attn")
    x = rng.standard_normal((5, 4))
    g = ad.Graph()
    pt = g.bind(params)
    out = mha_forward(pt, g.constant(x), cfg, "attn").data

    heads = []
    for h in range(cfg.n_heads):
        q = x @ params[f"attn.h{h}.w_q_d"]
        k = x @ params[f"attn.h{h}.w_k"]
        v = x @ params[f"attn.h{h}.w_v"]
        s = q @ k.T / np.sqrt(cfg.head_dim)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        heads.append(p @ v)
    expect = np.concatenate(heads, axis=1) @ params["attn.w_o"] + params["attn.b_o"]
    assert np.allclose(out, expect, atol=1e-12)
