import numpy as np
import pytest

from atxf import tensor as T
from atxf.errors import ContractError, ShapeError
from atxf.vit import (
    LayerOverride,
    ViTConfig,
    ViTParams,
    extract_patches,
    init_params,
    msa_forward,
    param_shapes,
    predict_proba,
    vit_forward,
    vit_large,
    vit_tiny_desk,
)


def _spread(params: ViTParams, rng, scale=0.3) -> ViTParams:
    """Re-draw weights at a larger scale so the nonlinearities are exercised."""
    arrays = {k: v + scale * rng.standard_normal(v.shape) for k, v in params.arrays().items()}
    return ViTParams.from_arrays(params.cfg, arrays)


def _images(cfg, rng, b=2):
    return rng.standard_normal((b, cfg.channels, cfg.image_size, cfg.image_size))


def test_config_geometry():
    cfg = vit_tiny_desk()
    assert (cfg.head_dim, cfg.grid, cfg.num_patches, cfg.num_tokens) == (32, 8, 64, 65)
    big = vit_large()
    assert (big.depth, big.heads, big.num_tokens, big.head_dim) == (24, 16, 197, 64)


@pytest.mark.parametrize(
    "kw", [dict(dim=10, heads=4), dict(image_size=30, patch_size=4), dict(depth=-1), dict(heads=0)]
)
def test_config_rejects_bad_geometry(kw):
    with pytest.raises(ShapeError):
        ViTConfig(**kw)


def test_param_table(small_cfg):
    shapes = param_shapes(small_cfg)
    assert shapes["patch_embed.weight"] == (3 * 16, 8)
    assert shapes["pos_embed"] == (5, 8)
    assert shapes["blocks.1.attn.q.weight"] == (8, 8)
    assert shapes["head.weight"] == (8, 3)
    p = init_params(small_cfg, 0)
    assert np.all(np.abs(p["blocks.0.attn.q.weight"].data) <= 0.04 + 1e-12)
    assert not p["blocks.0.attn.q.bias"].data.any()
    np.testing.assert_array_equal(p["norm.weight"].data, 1.0)


def test_patch_order():
    img = np.arange(2 * 4 * 4, dtype=float).reshape(1, 2, 4, 4)
    patches = extract_patches(img, 2)
    assert patches.shape == (1, 4, 8)
    # second patch is the top-right 2x2 block, channel-major
    np.testing.assert_array_equal(patches[0, 1], [2, 3, 6, 7, 18, 19, 22, 23])


def test_two_layer_vit_gradients(small_cfg, rng):
    params = _spread(init_params(small_cfg, 3), rng)
    x = _images(small_cfg, rng)
    y = T.softmax_array(rng.standard_normal((2, small_cfg.num_classes)))

    def loss_of(p):
        logits, _ = vit_forward(x, p)
        return T.cross_entropy_soft(logits, y)

    params.zero_grad()
    loss_of(params).backward()
    worst = 0.0
    frozen = params.frozen()
    for name in params:
        num = T.numeric_grad(lambda: loss_of(frozen).item(), frozen[name].data)
        worst = max(worst, T.max_rel_error(params[name].grad, num, floor=1e-6))
    assert worst < 1e-4


def test_msa_block_gradients(small_cfg, rng):
    params = _spread(init_params(small_cfg, 4), rng)
    X = T.parameter(rng.standard_normal((2, small_cfg.num_tokens, small_cfg.dim)))
    R = rng.standard_normal(X.shape)
    (msa_forward(X, params, 0)[0] * R).sum().backward()
    frozen = params.frozen()
    f = lambda: float(np.sum(msa_forward(T.Tensor(X.data), frozen, 0)[0].data * R))
    assert T.max_rel_error(X.grad, T.numeric_grad(f, X.data), floor=1e-6) < 1e-4
    for name in ("blocks.0.attn.q.weight", "blocks.0.attn.k.weight", "blocks.0.attn.v.weight"):
        assert T.max_rel_error(params[name].grad, T.numeric_grad(f, frozen[name].data), floor=1e-6) < 1e-4


def test_maps_are_row_stochastic(small_model, small_cfg, rng):
    _, rec = vit_forward(_images(small_cfg, rng, 3), small_model)
    for m in rec.maps:
        assert m.shape == (3, 2, 5, 5)
        np.testing.assert_allclose(m.sum(-1), 1.0, atol=1e-12)


def test_own_maps_reproduce_logits(small_cfg, rng):
    params = _spread(init_params(small_cfg, 5), rng)
    x = _images(small_cfg, rng, 4)
    logits, rec = vit_forward(x, params)
    ov = [LayerOverride(map=m) for m in rec.maps]
    again, _ = vit_forward(x, params, ov)
    np.testing.assert_array_equal(again.data, logits.data)


def test_map_override_blocks_qk_gradients(small_cfg, small_model, rng):
    x = _images(small_cfg, rng)
    _, rec = vit_forward(x, small_model)
    maps = [T.softmax_array(rng.standard_normal(m.shape)) for m in rec.maps]
    small_model.zero_grad()
    logits, rec2 = vit_forward(x, small_model, [LayerOverride(map=m) for m in maps])
    T.cross_entropy_soft(logits, np.eye(3)[[0, 1]]).backward()
    for l in range(small_cfg.depth):
        assert not small_model[f"blocks.{l}.attn.q.weight"].grad.any()
        assert not small_model[f"blocks.{l}.attn.k.weight"].grad.any()
        assert np.linalg.norm(small_model[f"blocks.{l}.attn.v.weight"].grad) > 0
        assert rec2.scores[l] is None
        np.testing.assert_array_equal(rec2.maps[l], maps[l])


def test_partial_head_override(small_cfg, small_model, rng):
    x = _images(small_cfg, rng)
    _, rec = vit_forward(x, small_model)
    inj = T.softmax_array(rng.standard_normal(rec.maps[0].shape))
    ov = LayerOverride(map=inj, map_heads=np.array([True, False]))
    _, rec2 = vit_forward(x, small_model, [ov, None])
    np.testing.assert_array_equal(rec2.maps[0][:, 0], inj[:, 0])
    np.testing.assert_array_equal(rec2.maps[0][:, 1], rec.maps[0][:, 1])


def test_qk_override_equals_map_injection(small_cfg, rng):
    params = _spread(init_params(small_cfg, 6), rng)
    x = _images(small_cfg, rng)
    q = rng.standard_normal((2, 2, 5, 4))
    k = rng.standard_normal((2, 2, 5, 4))
    _, rec = vit_forward(x, params, [LayerOverride(q=q, k=k), None])
    direct = T.softmax_array(q @ np.swapaxes(k, -1, -2) / np.sqrt(4))
    assert np.max(np.abs(rec.maps[0] - direct)) <= 1e-12


def test_capture_records_qkv(small_model, small_cfg, rng):
    _, rec = vit_forward(_images(small_cfg, rng), small_model, capture=True)
    assert rec.q[0].shape == (2, 2, 5, 4) and rec.v[1].shape == (2, 2, 5, 4)
    np.testing.assert_allclose(T.softmax_array(rec.q[0] @ np.swapaxes(rec.k[0], -1, -2) / 2.0), rec.maps[0],
                               atol=1e-14)


def test_override_validation(small_model, small_cfg, rng):
    x = _images(small_cfg, rng)
    bad_rows = np.full((1, 2, 5, 5), 0.3)
    with pytest.raises(ContractError):
        vit_forward(x, small_model, [LayerOverride(map=bad_rows), None])
    with pytest.raises(ShapeError):
        vit_forward(x, small_model, [LayerOverride(map=np.full((1, 2, 4, 4), 0.25)), None])
    with pytest.raises(ContractError):
        uni = np.full((1, 2, 5, 5), 0.2)
        vit_forward(x, small_model, [LayerOverride(map=uni, q=np.zeros((1, 2, 5, 4))), None])
    with pytest.raises(ShapeError):
        vit_forward(x, small_model, [None])


def test_mean_pooling_variant(rng):
    cfg = ViTConfig(image_size=8, patch_size=4, depth=1, heads=2, dim=8, num_classes=3, use_cls_token=False)
    p = init_params(cfg, 0)
    assert "cls_token" not in p.names()
    logits, rec = vit_forward(_images(cfg, rng), p)
    assert logits.shape == (2, 3) and rec.maps[0].shape == (2, 2, 4, 4)


def test_predict_proba_chunks_agree(small_model, small_cfg, rng):
    x = _images(small_cfg, rng, 7)
    np.testing.assert_allclose(predict_proba(x, small_model, batch_size=3), predict_proba(x, small_model),
                               atol=1e-15)


def test_from_arrays_rejects_wrong_shape(small_cfg, small_model):
    arrays = small_model.arrays()
    arrays["head.weight"] = np.zeros((8, 4))
    with pytest.raises(ShapeError):
        ViTParams.from_arrays(small_cfg, arrays)
