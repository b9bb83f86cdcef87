"""Implicit depth encoder: a plain ViT over multi-view patch tokens.

The first ``boundary`` layers attend only within each view. From layer
``boundary`` on, layers alternate between global (cross-view) and
within-view attention, starting with a cross-view layer unless
``cross_first`` is disabled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from depthvla import nn, ops
from depthvla.nn import Params
from depthvla.tensor import Tensor


@dataclass
class IdemConfig:
    num_layers: int = 4
    boundary: int = 2
    patch_size: int = 8
    token_dim: int = 32
    num_heads: int = 2
    num_views: int = 2
    image_size: int = 32
    channels: int = 3
    cross_first: bool = True

    def __post_init__(self):
        if not 1 <= self.boundary <= self.num_layers:
            raise ValueError(f"boundary l0={self.boundary} must lie in [1, {self.num_layers}]")
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.token_dim % self.num_heads:
            raise ValueError("token_dim must be divisible by num_heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def patches_per_view(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        return self.num_views * self.patches_per_view


@dataclass
class ViewPatchTokens:
    tokens: Tensor  # (B, N*P, token_dim)
    view_id: np.ndarray  # (N*P,)
    patch_position: np.ndarray  # (N*P, 2) row, col


def init_params(config: IdemConfig, rng: np.random.Generator, prefix: str = "idem") -> Params:
    params: Params = {}
    d = config.token_dim
    nn.init_linear(params, rng, f"{prefix}.patch", config.patch_size**2 * config.channels, d)
    params[f"{prefix}.pos"] = nn.param(
        nn.trunc_normal(rng, (config.num_views, config.patches_per_view, d)), f"{prefix}.pos"
    )
    for layer in range(config.num_layers):
        nn.init_block(params, rng, f"{prefix}.blocks.{layer}", d)
    nn.init_layernorm(params, f"{prefix}.ln_f", d)
    return params


def _check_views(views: np.ndarray, config: IdemConfig) -> np.ndarray:
    views = np.asarray(views)
    if views.ndim == 4:
        views = views[None]
    if views.ndim != 5:
        raise ValueError(f"views must be (B, N, H, W, C), got {views.shape}")
    _, n, h, w, c = views.shape
    if n != config.num_views or h != config.image_size or w != config.image_size or c != config.channels:
        raise ValueError(
            f"views shape {views.shape[1:]} does not match config "
            f"({config.num_views}, {config.image_size}, {config.image_size}, {config.channels})"
        )
    return views


def token_layout(config: IdemConfig) -> tuple[np.ndarray, np.ndarray]:
    p = config.patches_per_view
    view_id = np.repeat(np.arange(config.num_views), p)
    rc = np.stack(np.divmod(np.arange(p), config.grid), axis=1)
    return view_id, np.tile(rc, (config.num_views, 1))


def patchify(views, config: IdemConfig, params: Params, prefix: str = "idem") -> ViewPatchTokens:
    views = _check_views(views, config)
    flat = nn.patchify(views, config.patch_size).astype(params[f"{prefix}.patch.w"].dtype)
    x = nn.linear(params, f"{prefix}.patch", Tensor(flat))
    pos = ops.reshape(params[f"{prefix}.pos"], (config.num_tokens, config.token_dim))
    view_id, rc = token_layout(config)
    return ViewPatchTokens(ops.add(x, pos), view_id, rc)


def is_cross_layer(layer: int, config: IdemConfig) -> bool:
    if layer < config.boundary:
        return False
    offset = layer - config.boundary
    return offset % 2 == 0 if config.cross_first else offset % 2 == 1


def attention_mask_for_layer(layer: int, view_id: np.ndarray, config: IdemConfig) -> np.ndarray:
    """Additive (T, T) mask: 0 where attention is allowed, MASK_NEG where blocked."""
    if not 0 <= layer < config.num_layers:
        raise ValueError(f"layer {layer} outside [0, {config.num_layers})")
    t = len(view_id)
    if is_cross_layer(layer, config):
        return np.zeros((t, t), dtype=np.float32)
    same = view_id[:, None] == view_id[None, :]
    return np.where(same, 0.0, ops.MASK_NEG).astype(np.float32)


def encode(views, config: IdemConfig, params: Params, prefix: str = "idem",
           maps_out: list | None = None) -> Tensor:
    """Depth features (B, N*P, token_dim) from the final layer."""
    pt = patchify(views, config, params, prefix)
    x = pt.tokens
    for layer in range(config.num_layers):
        mask = attention_mask_for_layer(layer, pt.view_id, config)
        x = nn.block(params, f"{prefix}.blocks.{layer}", x, config.num_heads, mask=mask,
                     weights_out=maps_out)
    return nn.layernorm(params, f"{prefix}.ln_f", x)


def attention_maps(views, config: IdemConfig, params: Params, prefix: str = "idem") -> np.ndarray:
    """Attention weights, shape (B, L, heads, N*P, N*P)."""
    maps: list[np.ndarray] = []
    encode(views, config, params, prefix, maps_out=maps)
    return np.stack(maps, axis=1)


def maps_to_grids(weights: np.ndarray, config: IdemConfig) -> np.ndarray:
    """Reshape the key axis of attention rows into per-view patch grids.

    (..., N*P) -> (..., N, grid, grid); inverse of flattening.
    """
    g = config.grid
    return weights.reshape(weights.shape[:-1] + (config.num_views, g, g))


def received_attention(weights: np.ndarray, config: IdemConfig, query_view: int | None = None) -> np.ndarray:
    """Mean attention each patch receives, as (..., N, grid, grid) grids.

    ``weights`` is (..., T, T). If ``query_view`` is given, only queries from
    that view are averaged.
    """
    view_id, _ = token_layout(config)
    if query_view is not None:
        weights = weights[..., view_id == query_view, :]
    return maps_to_grids(weights.mean(axis=-2), config)
