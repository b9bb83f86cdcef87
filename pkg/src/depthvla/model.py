"""Full policy: depth encoder + backbone -> fusion -> flow-matching expert."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from depthvla import backbone, expert, fusion, idem
from depthvla.backbone import VlbConfig
from depthvla.expert import ExpertConfig
from depthvla.fusion import FusionStrategy
from depthvla.idem import IdemConfig
from depthvla.nn import Params
from depthvla.tensor import Tensor

MODULE_PREFIXES = {"VLB": "vlb.", "IDEM": "idem.", "SEM": "sem.", "EXPERT": "expert."}


@dataclass
class ModelConfig:
    idem: IdemConfig = field(default_factory=IdemConfig)
    vlb: VlbConfig = field(default_factory=VlbConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    fusion: FusionStrategy = FusionStrategy.SEM
    enable_idem: bool = True

    def __post_init__(self):
        self.fusion = FusionStrategy.parse(self.fusion)
        if not self.enable_idem and self.fusion is not FusionStrategy.NONE:
            raise ValueError("enable_idem=false requires fusion=none")
        if self.enable_idem and self.fusion is FusionStrategy.NONE:
            raise ValueError("fusion=none requires enable_idem=false")
        if self.expert.cond_dim != self.vlb.hidden_dim:
            raise ValueError(f"expert cond_dim {self.expert.cond_dim} != backbone hidden {self.vlb.hidden_dim}")
        if self.idem.num_views != self.vlb.num_views or self.idem.image_size != self.vlb.image_size:
            raise ValueError("depth encoder and backbone disagree on views / image size")


@dataclass
class Batch:
    views: np.ndarray  # (B, N, H, W, 3) in [0, 1]
    token_ids: np.ndarray  # (B, L)
    state: np.ndarray  # (B, D_s)
    actions: np.ndarray | None = None  # (B, H, D_a), raw units

    def __len__(self) -> int:
        return len(self.views)

    def take(self, idx) -> "Batch":
        return Batch(self.views[idx], self.token_ids[idx], self.state[idx],
                     None if self.actions is None else self.actions[idx])


def module_of(name: str) -> str:
    for module, prefix in MODULE_PREFIXES.items():
        if name.startswith(prefix):
            return module
    raise KeyError(f"parameter {name!r} belongs to no module")


class Policy:
    """Parameters plus forward passes; ``params`` maps names to tensors."""

    def __init__(self, config: ModelConfig, params: Params, action_mean=None, action_std=None):
        self.config = config
        self.params = params
        ad = config.expert.action_dim
        self.action_mean = np.zeros(ad, np.float32) if action_mean is None else np.asarray(action_mean, np.float32)
        self.action_std = np.ones(ad, np.float32) if action_std is None else np.asarray(action_std, np.float32)

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "Policy":
        rng = np.random.default_rng(seed)
        params: Params = {}
        params.update(backbone.init_params(config.vlb, rng))
        if config.enable_idem:
            params.update(idem.init_params(config.idem, rng))
            params.update(fusion.init_params(config.fusion, config.idem.token_dim, config.vlb.hidden_dim,
                                             config.vlb.num_heads, rng))
        params.update(expert.init_params(config.expert, rng))
        return cls(config, params)

    def set_action_stats(self, actions: np.ndarray) -> None:
        a = np.asarray(actions, dtype=np.float64).reshape(-1, self.config.expert.action_dim)
        self.action_mean = a.mean(axis=0).astype(np.float32)
        self.action_std = np.maximum(a.std(axis=0), 1e-3).astype(np.float32)

    def normalize(self, actions: np.ndarray) -> np.ndarray:
        return ((actions - self.action_mean) / self.action_std).astype(np.float32)

    def denormalize(self, actions: np.ndarray) -> np.ndarray:
        return (actions * self.action_std + self.action_mean).astype(np.float32)

    def module_params(self, module: str) -> dict[str, Tensor]:
        prefix = MODULE_PREFIXES[module]
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def vl_tokens(self, batch: Batch) -> Tensor:
        return backbone.encode(batch.views, batch.token_ids, self.config.vlb, self.params)

    def depth_features(self, batch: Batch) -> Tensor | None:
        if not self.config.enable_idem:
            return None
        return idem.encode(batch.views, self.config.idem, self.params)

    def fuse(self, z: Tensor, depth: Tensor | None) -> Tensor:
        return fusion.fuse(self.config.fusion, z, depth, self.params, self.config.vlb.num_heads)

    def condition(self, batch: Batch) -> Tensor:
        """Fused conditioning tokens for the expert."""
        return self.fuse(self.vl_tokens(batch), self.depth_features(batch))

    def velocity(self, cond: Tensor, state, rng=None, training: bool = False):
        cfg = self.config.expert

        def v(noisy, tau):
            return expert.predict_velocity(noisy, cond, state, tau, cfg, self.params, rng=rng, training=training)

        return v

    def loss(self, batch: Batch, rng: np.random.Generator, training: bool = True,
             cond: Tensor | None = None) -> Tensor:
        if cond is None:
            cond = self.condition(batch)
        target = self.normalize(batch.actions)
        return expert.fm_loss(self.velocity(cond, batch.state, rng, training), target, rng)

    def sample(self, batch: Batch, rng: np.random.Generator, steps: int | None = None) -> np.ndarray:
        """Action chunks (B, H, D_a) in raw units."""
        from depthvla.tensor import no_tape

        with no_tape():
            cond = self.condition(batch)
            out = expert.sample(cond, batch.state, self.config.expert, self.params, rng, steps=steps)
        return self.denormalize(out)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def action_mse(policy: Policy, batch: Batch, rng: np.random.Generator, steps: int | None = None,
               chunk: int = 100) -> float:
    """Mean squared error of sampled chunks against ground-truth actions."""
    errs = []
    for start in range(0, len(batch), chunk):
        part = batch.take(slice(start, start + chunk))
        pred = policy.sample(part, rng, steps=steps)
        errs.append(((pred.astype(np.float64) - part.actions) ** 2).mean(axis=(1, 2)))
    return float(np.concatenate(errs).mean())


def checksum(params: dict[str, Tensor]) -> dict[str, bytes]:
    return {k: v.data.tobytes() for k, v in params.items()}


__all__ = ["Batch", "ModelConfig", "Policy", "MODULE_PREFIXES", "module_of", "action_mse", "checksum"]
