import pytest
import torch

from havt_ivd.errors import ShapeError
from havt_ivd.fusion import (
    AUDIO,
    SPCA,
    VISUAL,
    HAVTFusion,
    JointSelfAttention,
    Patchify,
    SCAQSet,
    resample_map,
    sincos_grid,
)

from gradcheck_util import check_gradients


def small_fusion(dim=16, depth=2, n_scaq=4, **kw):
    return HAVTFusion(dim, (2, 3), dim, (2, 3), embed_dim=dim, depth=depth, heads=4, n_scaq=n_scaq, **kw)


def test_default_token_count():
    p = Patchify(128, (7, 7), 128, (4, 15), 128)
    seq = p(torch.randn(2, 128, 7, 7), torch.randn(2, 128, 4, 15))
    assert tuple(seq.tokens.shape) == (2, 109, 128)
    assert (seq.n_visual, seq.n_audio) == (49, 60)
    assert torch.equal(seq.modality[:49], torch.full((49,), VISUAL))
    assert torch.equal(seq.modality[49:], torch.full((60,), AUDIO))


def test_zero_maps_give_pure_embeddings():
    p = Patchify(8, (2, 2), 6, (1, 3), 16)
    seq = p(torch.zeros(1, 8, 2, 2), torch.zeros(1, 6, 1, 3))
    expected = torch.cat([p.visual_pos + p.modality_embed[VISUAL], p.audio_pos + p.modality_embed[AUDIO]])
    assert torch.equal(seq.tokens[0], expected)


def test_swapping_audio_cells_swaps_content_only():
    p = Patchify(8, (2, 2), 6, (2, 3), 16)
    v, a = torch.randn(1, 8, 2, 2), torch.randn(1, 6, 2, 3)
    b = a.clone()
    b[..., 0, 1], b[..., 1, 2] = a[..., 1, 2], a[..., 0, 1]
    t1 = p(v, a).tokens[0, 4:] - p.audio_pos
    t2 = p(v, b).tokens[0, 4:] - p.audio_pos
    i, j = 1, 5   # row-major indices of cells (0,1) and (1,2)
    torch.testing.assert_close(t1[i], t2[j])
    torch.testing.assert_close(t1[j], t2[i])
    keep = [k for k in range(6) if k not in (i, j)]
    assert torch.equal(t1[keep], t2[keep])


def test_patchify_rejects_wrong_grid():
    p = Patchify(8, (2, 2), 6, (2, 3), 16)
    with pytest.raises(ShapeError):
        p(torch.randn(1, 8, 3, 3), torch.randn(1, 6, 2, 3))


def test_self_attention_preserves_shape():
    enc = JointSelfAttention(128, depth=12)
    p = Patchify(128, (7, 7), 128, (4, 15), 128)
    with torch.no_grad():
        out = enc(p(torch.randn(1, 128, 7, 7), torch.randn(1, 128, 4, 15)))
    assert tuple(out.tokens.shape) == (1, 109, 128)


def test_residual_path_identity():
    # with the attention output projection and the last MLP layer zeroed,
    # both residual branches add nothing and each layer is the identity
    enc = JointSelfAttention(16, depth=3)
    with torch.no_grad():
        for layer in enc.layers:
            layer.attn.out.weight.zero_()
            layer.attn.out.bias.zero_()
            layer.mlp[-1].weight.zero_()
            layer.mlp[-1].bias.zero_()
    p = Patchify(16, (2, 3), 16, (2, 3), 16)
    seq = p(torch.randn(2, 16, 2, 3), torch.randn(2, 16, 2, 3))
    assert torch.equal(enc(seq).tokens, seq.tokens)


def test_perturbing_an_audio_token_reaches_visual_tokens():
    enc = JointSelfAttention(16, depth=2)
    p = Patchify(16, (2, 3), 16, (2, 3), 16)
    seq = p(torch.randn(1, 16, 2, 3), torch.randn(1, 16, 2, 3))
    bumped = seq.tokens.clone()
    bumped[0, 8] += 0.1
    with torch.no_grad():
        a = enc(seq).tokens
        b = enc(seq.with_tokens(bumped)).tokens
    assert (a[0, :6] - b[0, :6]).abs().max() > 0


def test_attention_rows_sum_to_one():
    fusion = small_fusion()
    with torch.no_grad():
        fusion(torch.randn(3, 16, 2, 3), torch.randn(3, 16, 2, 3))
    weights = [layer.last_weights for layer in fusion.encoder.layers] + [layer.last_weights for layer in fusion.spca.layers]
    for w in weights:
        torch.testing.assert_close(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-5, rtol=0)


def test_default_evidence_map_shape():
    fusion = HAVTFusion(128, (7, 7), 128, (4, 15), depth=2)
    with torch.no_grad():
        assert tuple(fusion(torch.randn(1, 128, 7, 7), torch.randn(1, 128, 4, 15)).shape) == (1, 128, 7, 7)


@pytest.mark.parametrize("n, g", [(49, 7), (196, 14), (784, 28)])
def test_scaq_grid_sizes(n, g):
    assert SCAQSet(n, 16).grid_shape == (g, g)


def test_scaq_requires_a_square():
    with pytest.raises(ShapeError):
        SCAQSet(50, 16)


def test_constant_memory_pools_identically():
    spca = SPCA(9, 16, n_layers=2)
    fusion_tokens = torch.randn(1, 1, 16).expand(1, 10, 16)
    from havt_ivd.fusion import TokenSequence
    seq = TokenSequence(fusion_tokens, torch.zeros(10, dtype=torch.long), torch.zeros(10, 2, dtype=torch.long))
    with torch.no_grad():
        spca(seq)
    for layer in spca.layers:
        pooled = layer.last_pooled[0]
        torch.testing.assert_close(pooled, pooled[:1].expand_as(pooled), atol=1e-6, rtol=0)


def test_memory_permutation_invariance():
    fusion = small_fusion().double()
    with torch.no_grad():
        seq = fusion.encoder(fusion.patchify(torch.randn(2, 16, 2, 3, dtype=torch.float64), torch.randn(2, 16, 2, 3, dtype=torch.float64)))
        perm = torch.randperm(seq.tokens.shape[1])
        a = fusion.spca(seq)
        b = fusion.spca(seq.with_tokens(seq.tokens[:, perm]))
    torch.testing.assert_close(a, b, atol=1e-12, rtol=0)


def test_evidence_map_depends_on_audio():
    fusion = small_fusion()
    v = torch.randn(1, 16, 2, 3)
    a = torch.randn(1, 16, 2, 3, requires_grad=True)
    fusion(v, a).square().sum().backward()
    assert a.grad.norm() > 0


def test_sincos_grid_is_distinct_per_cell():
    code = sincos_grid(7, 32)
    assert code.shape == (49, 32)
    assert torch.cdist(code, code).fill_diagonal_(1.0).min() > 1e-3


def test_resample_map_sizes():
    x = torch.randn(1, 4, 7, 7)
    assert resample_map(x, 28).shape[-1] == 28
    assert resample_map(x, 7) is x
    assert resample_map(torch.randn(1, 4, 14, 14), 7).shape[-1] == 7


def test_fusion_gradients_match_finite_differences():
    torch.manual_seed(2)
    fusion = small_fusion().double()
    v = torch.randn(2, 16, 2, 3, dtype=torch.float64)
    a = torch.randn(2, 16, 2, 3, dtype=torch.float64)
    seq = fusion.patchify(v, a)
    assert seq.tokens.shape[1] == 12
    w = torch.randn(2, 16, 2, 2, dtype=torch.float64)

    def loss():
        return (w * fusion(v, a)).sum()

    rows = check_gradients(fusion, loss, 150, seed=4, required=("patchify.", "encoder.layers.0", "encoder.layers.1", "spca.scaq", "spca.layers"))
    worst = max(rows, key=lambda r: r[-1])
    assert worst[-1] < 1e-3, worst
