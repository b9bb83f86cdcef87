"""Small vision-language backbone producing token representations Z.

Views go through a per-view ViT; visual tokens and embedded instruction
tokens are then concatenated and passed through the kept prefix of a
language transformer with global attention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from depthvla import nn, ops
from depthvla.nn import Params
from depthvla.tensor import Tensor

PAD, UNK = "<pad>", "<unk>"


class Tokenizer:
    """Whitespace word vocabulary; id 1 is reserved for unknown words."""

    def __init__(self, words: Iterable[str]):
        self.words = [PAD, UNK]
        for w in words:
            if w not in self.words:
                self.words.append(w)
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        unk = self.index[UNK]
        return [self.index.get(w, unk) for w in text.lower().split()]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.words[i] for i in ids)


@dataclass
class Instruction:
    token_ids: tuple[int, ...]
    vocab_size: int

    def __post_init__(self):
        self.token_ids = tuple(int(i) for i in self.token_ids)
        if not self.token_ids:
            raise ValueError("instruction must contain at least one token")
        bad = [i for i in self.token_ids if not 0 <= i < self.vocab_size]
        if bad:
            raise ValueError(f"token ids {bad} outside vocabulary of size {self.vocab_size}")


@dataclass
class VlbConfig:
    vision_layers: int = 2
    language_layers_total: int = 4
    language_layers_kept: int = 2
    hidden_dim: int = 32
    num_heads: int = 2
    vocab_size: int = 64
    max_text_len: int = 8
    patch_size: int = 8
    num_views: int = 2
    image_size: int = 32
    channels: int = 3

    def __post_init__(self):
        if not 1 <= self.language_layers_kept <= self.language_layers_total:
            raise ValueError(
                f"kept layers {self.language_layers_kept} must lie in [1, {self.language_layers_total}]"
            )
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")

    @property
    def patches_per_view(self) -> int:
        return (self.image_size // self.patch_size) ** 2


def init_params(config: VlbConfig, rng: np.random.Generator, prefix: str = "vlb",
                language_layers: int | None = None) -> Params:
    """Initialise backbone weights.

    ``language_layers`` defaults to the kept prefix; pass
    ``config.language_layers_total`` to materialise the full branch.
    """
    params: Params = {}
    d = config.hidden_dim
    p = config.patches_per_view
    nn.init_linear(params, rng, f"{prefix}.patch", config.patch_size**2 * config.channels, d)
    params[f"{prefix}.vpos"] = nn.param(nn.trunc_normal(rng, (config.num_views, p, d)), f"{prefix}.vpos")
    for i in range(config.vision_layers):
        nn.init_block(params, rng, f"{prefix}.vision.{i}", d)
    nn.init_layernorm(params, f"{prefix}.vision_ln", d)
    nn.init_linear(params, rng, f"{prefix}.vproj", d, d)
    params[f"{prefix}.embed"] = nn.param(nn.trunc_normal(rng, (config.vocab_size, d)), f"{prefix}.embed")
    params[f"{prefix}.tpos"] = nn.param(nn.trunc_normal(rng, (config.max_text_len, d)), f"{prefix}.tpos")
    n_lang = config.language_layers_kept if language_layers is None else language_layers
    for i in range(n_lang):
        nn.init_block(params, rng, f"{prefix}.lang.{i}", d)
    return params


def encode_views(views, config: VlbConfig, params: Params, prefix: str = "vlb") -> Tensor:
    """Visual tokens (B, N*P, hidden) from a per-view transformer."""
    views = np.asarray(views)
    if views.ndim == 4:
        views = views[None]
    if views.ndim != 5 or views.shape[1] != config.num_views or views.shape[2:4] != (config.image_size,) * 2:
        raise ValueError(f"views shape {views.shape} does not match backbone config")
    flat = nn.patchify(views, config.patch_size).astype(np.float32)
    x = nn.linear(params, f"{prefix}.patch", Tensor(flat))
    t = config.num_views * config.patches_per_view
    x = ops.add(x, ops.reshape(params[f"{prefix}.vpos"], (t, config.hidden_dim)))
    view_id = np.repeat(np.arange(config.num_views), config.patches_per_view)
    # per-view encoding realised as block-diagonal attention
    mask = np.where(view_id[:, None] == view_id[None, :], 0.0, ops.MASK_NEG).astype(np.float32)
    for i in range(config.vision_layers):
        x = nn.block(params, f"{prefix}.vision.{i}", x, config.num_heads, mask=mask)
    x = nn.layernorm(params, f"{prefix}.vision_ln", x)
    return nn.linear(params, f"{prefix}.vproj", x)


def embed_text(token_ids, config: VlbConfig, params: Params, prefix: str = "vlb") -> Tensor:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.shape[1] < 1 or ids.shape[1] > config.max_text_len:
        raise ValueError(f"instruction length {ids.shape[1]} outside [1, {config.max_text_len}]")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError(f"token id out of range for vocabulary of size {config.vocab_size}")
    x = ops.embedding(params[f"{prefix}.embed"], ids)
    return ops.add(x, ops.slice_axis(params[f"{prefix}.tpos"], 0, 0, ids.shape[1]))


def encode(views, token_ids, config: VlbConfig, params: Params, prefix: str = "vlb",
           num_layers: int | None = None, hidden_out: list | None = None) -> Tensor:
    """Z of shape (B, N*P + len(instruction), hidden).

    Runs the first ``num_layers`` language layers (default: the kept prefix).
    Intermediate hidden states are appended to ``hidden_out`` if given.
    """
    k = config.language_layers_kept if num_layers is None else num_layers
    vis = encode_views(views, config, params, prefix)
    txt = embed_text(token_ids, config, params, prefix)
    if txt.shape[0] != vis.shape[0]:
        raise ValueError(f"batch mismatch: {vis.shape[0]} view sets vs {txt.shape[0]} instructions")
    x = ops.concat([vis, txt], axis=1)
    for i in range(k):
        if f"{prefix}.lang.{i}.ln1.g" not in params:
            raise KeyError(f"backbone has no language layer {i}")
        x = nn.block(params, f"{prefix}.lang.{i}", x, config.num_heads)
        if hidden_out is not None:
            hidden_out.append(x)
    return x
