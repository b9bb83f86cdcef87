"""Closed-loop evaluation of policies on held-out scenes."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from depthvla import env
from depthvla.env import EnvConfig, SceneSpec
from depthvla.model import Batch, Policy


class LearnedPolicy:
    """Adapts a :class:`Policy` to the batch-rollout interface."""

    def __init__(self, policy: Policy, seed: int = 0, steps: int | None = None):
        self.policy = policy
        self.rng = np.random.default_rng(seed)
        self.steps = steps

    def __call__(self, observations: list) -> np.ndarray:
        batch = Batch(
            np.stack([o.views for o in observations]).astype(np.float32) / 255.0,
            np.stack([o.instruction.token_ids for o in observations]),
            np.stack([o.state for o in observations]),
        )
        return self.policy.sample(batch, self.rng, steps=self.steps)


def heldout_scenes(count: int, seed: int, config: EnvConfig | None = None) -> list[SceneSpec]:
    config = config or EnvConfig()
    return [env.scene_from_seed(env.scene_seed("test", seed, i), config) for i in range(count)]


def success_rate(policy, scenes: Sequence[SceneSpec], config: EnvConfig | None = None,
                 max_steps: int = 24) -> float:
    if not scenes:
        raise ValueError("no scenes to evaluate")
    results = env.rollout_batch(policy, scenes, max_steps, config)
    return sum(r.success for r in results) / len(results)


def perturbed(scenes: Sequence[SceneSpec], kind: str, seed: int,
              config: EnvConfig | None = None) -> list[SceneSpec]:
    rng = np.random.default_rng([seed, env.PERTURBATIONS.index(kind)])
    return [env.perturb(s, kind, rng, config) for s in scenes]


@dataclass
class EvalReport:
    scenes: int
    success_rate: float
    val_mse: float | None = None
    perturbations: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        rates = [self.success_rate, *self.perturbations.values()]
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ValueError("success rates must lie in [0, 1]")
        if self.scenes < 1:
            raise ValueError("a report needs at least one scene")

    def lines(self) -> list[str]:
        out = [f"scenes={self.scenes}", f"success_rate={self.success_rate!r}"]
        if self.val_mse is not None:
            out.append(f"val_mse={self.val_mse!r}")
        out += [f"success_rate.{k}={v!r}" for k, v in self.perturbations.items()]
        return out

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.lines()) + "\n")
        return path

    @classmethod
    def parse(cls, text: str) -> "EvalReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line and not line.startswith("#"))
        pert = {k.split(".", 1)[1]: float(v) for k, v in kv.items() if k.startswith("success_rate.")}
        mse = float(kv["val_mse"]) if "val_mse" in kv else None
        return cls(int(kv["scenes"]), float(kv["success_rate"]), mse, pert)


def evaluate(policy_for: Callable, scenes: Sequence[SceneSpec], seed: int, kinds: Sequence[str] = (),
             config: EnvConfig | None = None, val_mse: float | None = None,
             max_steps: int = 24) -> EvalReport:
    """Success rate on ``scenes`` plus one rate per perturbation kind.

    ``policy_for(scenes)`` builds the batch policy for a scene list, which lets
    privileged policies such as the scripted expert see the disturbed scenes.
    """
    def rate(ss):
        return success_rate(policy_for(ss), ss, config, max_steps)

    base = rate(scenes)
    rates = {k: rate(perturbed(scenes, k, seed, config)) for k in kinds}
    return EvalReport(len(scenes), base, val_mse, rates)
