import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cuprosody.cu_encoder import (
    AttentionConfig, CUAttention, CUContext, FusionProjection, add_sentence_index_embeddings,
    cse_context, fuse_and_project, multi_head_cu_attention, scaled_dot_attention,
)
from cuprosody.errors import ConfigurationError, InvalidInputError
from oracles import brute_force_cu_attention, central_difference, relative_error


def tiny_params(d_f=8, d_e=6, H=2, d_k=4, d_v=4, d_c=5, pairs=4, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    p = CUAttention(d_f, d_e, AttentionConfig(heads=H, d_k=d_k, d_v=d_v, context_dim=d_c, max_pairs=pairs))
    return p.to(dtype)


# -- cse_context -----------------------------------------------------------

def test_cse_context_width():
    assert cse_context(torch.zeros(768), torch.zeros(768)).shape == (1536,)


def test_cse_context_zero():
    assert torch.equal(cse_context(torch.zeros(4), torch.zeros(4)), torch.zeros(8))


def test_cse_context_slices():
    g = torch.Generator().manual_seed(1)
    p, n = torch.randn(7, generator=g), torch.randn(7, generator=g)
    c = cse_context(p, n)
    assert torch.equal(c[:7], p) and torch.equal(c[7:], n)


def test_cse_context_mismatch():
    with pytest.raises(InvalidInputError):
        cse_context(torch.zeros(3), torch.zeros(4))


# -- sentence-index embeddings ---------------------------------------------

def test_index_embeddings_zero_table_identity():
    E = torch.randn(4, 6)
    assert torch.equal(add_sentence_index_embeddings(E, torch.zeros(4, 6)), E)


def test_index_embeddings_zero_input():
    table = torch.randn(6, 3)
    assert torch.equal(add_sentence_index_embeddings(torch.zeros(4, 3), table), table[:4])


def test_index_embeddings_additive():
    E, table = torch.randn(4, 5, dtype=torch.float64), torch.randn(4, 5, dtype=torch.float64)
    out = add_sentence_index_embeddings(E, table)
    torch.testing.assert_close(out - E, table, rtol=0, atol=1e-15)


def test_index_embeddings_capacity():
    with pytest.raises(ConfigurationError):
        add_sentence_index_embeddings(torch.zeros(6, 3), torch.zeros(4, 3))


def test_position_table_init_std():
    torch.manual_seed(0)
    p = CUAttention(8, 512, AttentionConfig(max_pairs=40))
    assert abs(p.position_table.std().item() - 0.02) < 0.002


# -- scaled dot attention --------------------------------------------------

def test_single_key_returns_value():
    V = torch.tensor([[3.0, -1.0]])
    out, w = scaled_dot_attention(torch.randn(5, 2), torch.randn(1, 2), V, torch.tensor([True]))
    assert torch.equal(w, torch.ones(5, 1))
    assert torch.allclose(out, V.expand(5, 2))


def test_zero_query_uniform_over_unmasked():
    K, V = torch.randn(4, 3), torch.randn(4, 2)
    mask = torch.tensor([True, False, True, True])
    out, w = scaled_dot_attention(torch.zeros(2, 3), K, V, mask)
    assert torch.allclose(w, torch.tensor([[1 / 3, 0, 1 / 3, 1 / 3]] * 2))
    assert torch.allclose(out, V[mask].mean(0).expand(2, 2))


def test_worked_example():
    Q = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    K = V = torch.eye(2, dtype=torch.float64)
    out, w = scaled_dot_attention(Q, K, V)
    e = math.exp(1 / math.sqrt(2))
    expected = np.array([e / (e + 1), 1 / (e + 1)])
    np.testing.assert_allclose(w.numpy()[0], expected, atol=1e-12)
    np.testing.assert_allclose(out.numpy()[0], expected, atol=1e-12)


def test_all_masked_raises():
    with pytest.raises(InvalidInputError):
        scaled_dot_attention(torch.randn(2, 3), torch.randn(3, 3), torch.randn(3, 2),
                             torch.zeros(3, dtype=torch.bool))


@settings(max_examples=200, deadline=None)
@given(m=st.integers(1, 6), n=st.integers(1, 6), d=st.integers(1, 8), seed=st.integers(0, 2**31),
       scale=st.floats(0.1, 30.0))
def test_softmax_rows_normalized_and_masked_exact_zero(m, n, d, seed, scale):
    g = torch.Generator().manual_seed(seed)
    mask = torch.rand(n, generator=g) < 0.6
    mask[torch.randint(n, (1,), generator=g)] = True
    Q = scale * torch.randn(m, d, generator=g)
    K, V = torch.randn(n, d, generator=g), torch.randn(n, 3, generator=g)
    out, w = scaled_dot_attention(Q, K, V, mask)
    assert torch.all(w >= 0) and torch.all(w[:, ~mask] == 0)
    assert torch.allclose(w.sum(-1).double(), torch.ones(m, dtype=torch.float64), atol=1e-6)
    assert torch.isfinite(out).all()


# -- multi-head attention --------------------------------------------------

def test_multi_head_shapes():
    p = tiny_params()
    C, w = multi_head_cu_attention(torch.randn(3, 8, dtype=torch.float64),
                                   torch.randn(4, 6, dtype=torch.float64), torch.ones(4, dtype=torch.bool), p)
    assert C.shape == (3, 5) and w.shape == (2, 3, 4)
    assert torch.allclose(w.sum(-1), torch.ones(2, 3, dtype=torch.float64))


def test_identical_rows_give_constant_context():
    p = tiny_params()
    E = torch.randn(1, 6, dtype=torch.float64).expand(4, 6)
    C, _ = multi_head_cu_attention(torch.randn(5, 8, dtype=torch.float64), E, torch.ones(4, dtype=torch.bool), p)
    # every convex combination of equal value rows is that row
    V_out = torch.cat([E[0] @ p.W_v[h] for h in range(2)]) @ p.W_o
    assert torch.allclose(C, V_out.expand(5, -1), atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    T, n, H = rng.integers(1, 8), rng.integers(1, 7), rng.integers(1, 5)
    d_f, d_e, d_k, d_v, d_c = rng.integers(1, 9, size=5)
    p = tiny_params(d_f, d_e, H, d_k, d_v, d_c, pairs=n, seed=seed)
    F, E = torch.randn(T, d_f, dtype=torch.float64), torch.randn(n, d_e, dtype=torch.float64)
    mask = torch.from_numpy(rng.random(n) < 0.7)
    mask[0] = True
    C, w = multi_head_cu_attention(F, E, mask, p)
    C_ref, w_ref = brute_force_cu_attention(F.numpy(), E.numpy(), mask.numpy(), p.W_q.detach().numpy(),
                                            p.W_k.detach().numpy(), p.W_v.detach().numpy(), p.W_o.detach().numpy())
    assert np.max(np.abs(C.detach().numpy() - C_ref)) < 1e-5
    assert np.max(np.abs(w.detach().numpy() - w_ref)) < 1e-5


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_joint_permutation_invariance(seed):
    g = torch.Generator().manual_seed(seed)
    p = tiny_params(seed=seed % 1000)
    F, E = torch.randn(3, 8, generator=g, dtype=torch.float64), torch.randn(4, 6, generator=g, dtype=torch.float64)
    mask = torch.tensor([True, False, True, True])
    perm = torch.randperm(4, generator=g)
    C1, _ = multi_head_cu_attention(F, E, mask, p)
    C2, _ = multi_head_cu_attention(F, E[perm], mask[perm], p)
    assert torch.allclose(C1, C2, atol=1e-12)


def test_pse_context_varies_with_t():
    p = tiny_params()
    C, _ = multi_head_cu_attention(torch.randn(4, 8, dtype=torch.float64), torch.randn(4, 6, dtype=torch.float64),
                                   torch.ones(4, dtype=torch.bool), p)
    assert not torch.allclose(C[0], C[1])


def test_batched_matches_unbatched():
    p = tiny_params()
    F, E = torch.randn(3, 5, 8, dtype=torch.float64), torch.randn(3, 4, 6, dtype=torch.float64)
    mask = torch.tensor([[True] * 4, [False, True, True, False], [True, False, False, False]])
    C, w = multi_head_cu_attention(F, E, mask, p)
    for b in range(3):
        Cb, wb = multi_head_cu_attention(F[b], E[b], mask[b], p)
        assert torch.allclose(C[b], Cb, atol=1e-12) and torch.allclose(w[b], wb, atol=1e-12)


def test_deterministic_bitwise():
    p = tiny_params()
    F, E = torch.randn(3, 8, dtype=torch.float64), torch.randn(4, 6, dtype=torch.float64)
    m = torch.ones(4, dtype=torch.bool)
    assert torch.equal(multi_head_cu_attention(F, E, m, p)[0], multi_head_cu_attention(F, E, m, p)[0])


# -- fusion ----------------------------------------------------------------

def test_fusion_width_both_modes():
    F = torch.randn(6, 512)
    cse = FusionProjection(512, 2 * 768)
    pse = FusionProjection(512, 256)
    assert fuse_and_project(F, CUContext("cse", torch.randn(1536)), cse).shape == (6, 512)
    assert fuse_and_project(F, CUContext("pse", torch.randn(6, 256)), pse).shape == (6, 512)


def test_fusion_zero_context_zero_bias():
    proj = FusionProjection(4, 3, 5).double()
    torch.nn.init.zeros_(proj.linear.bias)
    F = torch.randn(2, 4, dtype=torch.float64)
    D = fuse_and_project(F, CUContext("cse", torch.zeros(3, dtype=torch.float64)), proj)
    assert torch.allclose(D, F @ proj.linear.weight[:, :4].T, atol=1e-14)


def test_fusion_cse_linearity():
    proj = FusionProjection(4, 6, 5).double()
    F = torch.randn(5, 4, dtype=torch.float64)
    D = fuse_and_project(F, CUContext("cse", torch.randn(6, dtype=torch.float64)), proj)
    W_left = proj.linear.weight[:, :4]
    for t in range(5):
        for u in range(5):
            assert torch.allclose(D[t] - D[u], W_left @ (F[t] - F[u]), atol=1e-12)


def test_fusion_width_mismatch():
    with pytest.raises(ConfigurationError):
        fuse_and_project(torch.randn(2, 4), CUContext("pse", torch.randn(2, 7)), FusionProjection(4, 6))


# -- gradients -------------------------------------------------------------

def test_gradients_match_finite_differences():
    """d_f=8, d_e=6, d_K=d_V=4, H=2, T=3, 2L=4, float64, eps=1e-3, rel err < 1e-3."""
    p = tiny_params(d_c=5)
    proj = FusionProjection(8, 5, 7).double()
    g = torch.Generator().manual_seed(3)
    F = torch.randn(3, 8, generator=g, dtype=torch.float64)
    E = torch.randn(4, 6, generator=g, dtype=torch.float64)
    mask = torch.tensor([True, True, False, True])
    probe = torch.randn(3, 7, generator=g, dtype=torch.float64)

    def loss():
        C, _ = p(F, E, mask)
        return (torch.tanh(fuse_and_project(F, CUContext("pse", C), proj)) * probe).sum()

    for prm in list(p.parameters()) + list(proj.parameters()):
        prm.grad = None
    loss().backward()
    worst = 0.0
    for prm in list(p.parameters()) + list(proj.parameters()):
        for flat in range(prm.numel()):
            idx = np.unravel_index(flat, prm.shape)
            num = central_difference(lambda: loss().item(), prm.data, idx)
            ana = prm.grad[idx].item()
            if abs(ana) < 1e-9 and abs(num) < 1e-9:
                continue
            worst = max(worst, relative_error(ana, num))
    assert worst < 1e-3
