import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthvla import idem, nn, ops
from depthvla.gradcheck import numerical_grad, relative_error
from depthvla.idem import IdemConfig
from depthvla.tensor import Tape, Tensor, backward


def small(**kw):
    base = dict(num_layers=3, boundary=2, patch_size=4, token_dim=8, num_heads=2, num_views=2, image_size=8)
    base.update(kw)
    return IdemConfig(**base)


def views_for(cfg, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((batch, cfg.num_views, cfg.image_size, cfg.image_size, 3)).astype(np.float32)


def test_config_validation():
    with pytest.raises(ValueError):
        IdemConfig(num_layers=4, boundary=0)
    with pytest.raises(ValueError):
        IdemConfig(num_layers=4, boundary=5)
    with pytest.raises(ValueError):
        IdemConfig(image_size=30, patch_size=8)


def test_token_count():
    cfg = IdemConfig(image_size=16, patch_size=8, num_views=2)
    params = idem.init_params(cfg, np.random.default_rng(0))
    pt = idem.patchify(views_for(cfg), cfg, params)
    assert pt.tokens.shape == (2, 8, cfg.token_dim)
    assert np.bincount(pt.view_id).tolist() == [4, 4]


def test_zero_image_gives_positional_embeddings():
    cfg = small()
    params = idem.init_params(cfg, np.random.default_rng(0))
    pt = idem.patchify(np.zeros((1, 2, 8, 8, 3), np.float32), cfg, params)
    np.testing.assert_allclose(pt.tokens.data[0], params["idem.pos"].data.reshape(-1, cfg.token_dim))


def test_patch_pixel_ordering():
    img = np.arange(2 * 16 * 16 * 3, dtype=np.float32).reshape(1, 2, 16, 16, 3)
    flat = nn.patchify(img, 8)
    np.testing.assert_array_equal(flat[0, 0], img[0, 0, 0:8, 0:8, :].reshape(-1))
    np.testing.assert_array_equal(flat[0, 1], img[0, 0, 0:8, 8:16, :].reshape(-1))
    np.testing.assert_array_equal(flat[0, 4], img[0, 1, 0:8, 0:8, :].reshape(-1))


def test_patchify_rejects_bad_views():
    cfg = small()
    params = idem.init_params(cfg, np.random.default_rng(0))
    with pytest.raises(ValueError):
        idem.patchify(np.zeros((1, 3, 8, 8, 3)), cfg, params)
    with pytest.raises(ValueError):
        idem.patchify(np.zeros((1, 2, 12, 12, 3)), cfg, params)


def test_mask_within_view_example():
    cfg = IdemConfig(num_layers=4, boundary=2, num_views=2, image_size=16, patch_size=8, token_dim=8)
    view_id = np.array([0, 0, 1, 1])
    m = idem.attention_mask_for_layer(0, view_id, cfg)
    allowed = {(int(i), int(j)) for i, j in zip(*np.nonzero(m == 0))}
    assert allowed == {(0, 0), (0, 1), (1, 0), (1, 1), (2, 2), (2, 3), (3, 2), (3, 3)}
    assert np.all(m[m != 0] <= ops.MASK_NEG)


def test_layer_schedule():
    cfg = IdemConfig(num_layers=6, boundary=2)
    view_id, _ = idem.token_layout(cfg)
    kinds = ["cross" if np.all(idem.attention_mask_for_layer(i, view_id, cfg) == 0) else "within"
             for i in range(6)]
    assert kinds == ["within", "within", "cross", "within", "cross", "within"]
    alt = IdemConfig(num_layers=6, boundary=2, cross_first=False)
    assert [idem.is_cross_layer(i, alt) for i in range(6)] == [False, False, False, True, False, True]


def test_single_view_mask_is_global():
    cfg = IdemConfig(num_views=1, num_layers=4, boundary=3)
    view_id, _ = idem.token_layout(cfg)
    for layer in range(4):
        assert np.all(idem.attention_mask_for_layer(layer, view_id, cfg) == 0)


def test_mask_layer_out_of_range():
    cfg = small()
    with pytest.raises(ValueError):
        idem.attention_mask_for_layer(cfg.num_layers, np.zeros(4, int), cfg)


@settings(max_examples=10, deadline=None)
@given(st.sampled_from([2, 3]), st.integers(0, 2**31 - 1))
def test_no_cross_view_attention_before_boundary(num_views, seed):
    cfg = small(num_views=num_views, num_layers=4, boundary=2)
    params = idem.init_params(cfg, np.random.default_rng(seed))
    maps = idem.attention_maps(views_for(cfg, 1, seed), cfg, params)
    view_id, _ = idem.token_layout(cfg)
    other = view_id[:, None] != view_id[None, :]
    for layer in range(cfg.boundary):
        assert maps[0, layer][..., other].max() < 1e-12


def test_attention_rows_sum_to_one_and_grid_roundtrip():
    cfg = small()
    params = idem.init_params(cfg, np.random.default_rng(0))
    maps = idem.attention_maps(views_for(cfg), cfg, params)
    assert maps.shape == (2, cfg.num_layers, cfg.num_heads, cfg.num_tokens, cfg.num_tokens)
    np.testing.assert_allclose(maps.sum(-1), 1.0, atol=1e-6)
    grids = idem.maps_to_grids(maps, cfg)
    assert grids.shape[-3:] == (cfg.num_views, cfg.grid, cfg.grid)
    np.testing.assert_array_equal(grids.reshape(maps.shape), maps)


def test_received_attention_from_other_view_is_zero_before_boundary():
    cfg = small()
    params = idem.init_params(cfg, np.random.default_rng(0))
    maps = idem.attention_maps(views_for(cfg, 1), cfg, params)[0]
    recv = idem.received_attention(maps, cfg, query_view=0)  # (L, heads, N, g, g)
    assert np.all(recv[: cfg.boundary, :, 1] < 1e-12)


def test_encode_shape_and_determinism():
    cfg = small()
    params = idem.init_params(cfg, np.random.default_rng(0))
    v = views_for(cfg)
    a = idem.encode(v, cfg, params).data
    b = idem.encode(v, cfg, params).data
    assert a.shape == (2, cfg.num_tokens, cfg.token_dim)
    assert a.tobytes() == b.tobytes()


def test_view_permutation_equivariance_without_cross_layers():
    cfg = small(num_layers=2, boundary=2)
    params = idem.init_params(cfg, np.random.default_rng(0))
    pos = params["idem.pos"].data
    params["idem.pos"].data = np.broadcast_to(pos[:1], pos.shape).copy()
    v = views_for(cfg, 1)
    out = idem.encode(v, cfg, params).data[0]
    swapped = idem.encode(v[:, ::-1], cfg, params).data[0]
    p = cfg.patches_per_view
    np.testing.assert_allclose(swapped[:p], out[p:], atol=1e-5)
    np.testing.assert_allclose(swapped[p:], out[:p], atol=1e-5)


def test_cross_layers_exchange_information():
    cfg = small(num_layers=3, boundary=2)
    params = idem.init_params(cfg, np.random.default_rng(0))
    v = views_for(cfg, 1)
    v2 = v.copy()
    v2[0, 1] = 1 - v2[0, 1]
    out, out2 = idem.encode(v, cfg, params).data, idem.encode(v2, cfg, params).data
    p = cfg.patches_per_view
    assert not np.allclose(out[0, :p], out2[0, :p])


def test_gradient_reaches_patch_projection():
    cfg = small(num_layers=2, boundary=1)
    rng = np.random.default_rng(0)
    params = idem.init_params(cfg, rng)
    for p in params.values():
        p.data = p.data.astype(np.float64)
    v = views_for(cfg, 1).astype(np.float64)
    proj = rng.standard_normal((1, cfg.num_tokens, cfg.token_dim))

    def loss_value():
        return float(np.sum(idem.encode(v, cfg, params).data * proj))

    w = params["idem.patch.w"]
    with Tape() as tape:
        loss = ops.sum(ops.mul(idem.encode(v, cfg, params), Tensor(proj)))
    g = backward(loss, tape, leaves=[w])[w]
    idx = [tuple(rng.integers(0, s) for s in w.shape) for _ in range(8)]
    num = numerical_grad(loss_value, w.data, 1e-3, idx)
    assert relative_error(np.array([g[i] for i in idx]), np.array([num[i] for i in idx])) < 1e-2
