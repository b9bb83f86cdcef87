"""Staged training: freeze masks, AdamW, warmup + cosine schedule, clipping.

Each stage trains a subset of modules for a fixed number of steps with its
own learning-rate schedule and fresh optimizer moments, starting from the
previous stage's checkpoint.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from depthvla import checkpoint
from depthvla.env import Dataset
from depthvla.model import MODULE_PREFIXES, Batch, ModelConfig, Policy
from depthvla.tensor import Tape, Tensor, backward, no_tape

log = logging.getLogger(__name__)

ALL_MODULES = frozenset(MODULE_PREFIXES)
STAGE_NAMES = ("initial_alignment", "spatial_alignment", "joint")
STAGE_TRAINABLE = {
    "initial_alignment": frozenset({"SEM", "EXPERT"}),
    "spatial_alignment": frozenset({"IDEM", "SEM", "EXPERT"}),
    "joint": ALL_MODULES,
}
NO_DECAY_SUFFIXES = (".g", ".b", ".pos", ".vpos", ".tpos", ".embed")


class TrainingError(RuntimeError):
    pass


@dataclass
class StageConfig:
    name: str
    steps: int
    trainable: frozenset = frozenset()

    def __post_init__(self):
        self.trainable = frozenset(self.trainable or STAGE_TRAINABLE.get(self.name, ()))
        unknown = self.trainable - ALL_MODULES
        if unknown:
            raise ValueError(f"stage {self.name!r} names unknown modules {sorted(unknown)}")
        if not self.trainable:
            raise ValueError(f"stage {self.name!r} trains nothing")
        if self.steps < 1:
            raise ValueError(f"stage {self.name!r} needs at least one step")


def pipeline_stages(num_stages: int, steps: Sequence[int]) -> list[StageConfig]:
    """One-, two- or three-stage schedules over the same machinery."""
    if num_stages == 1:
        return [StageConfig("joint", steps[0], ALL_MODULES)]
    if num_stages == 2:
        return [StageConfig("initial_alignment", steps[0]), StageConfig("joint", steps[1])]
    if num_stages == 3:
        return [StageConfig(n, s) for n, s in zip(STAGE_NAMES, steps)]
    raise ValueError(f"num_stages must be 1, 2 or 3, got {num_stages}")


@dataclass
class OptimConfig:
    peak_lr: float = 1e-3
    weight_decay: float = 1e-3
    warmup_steps: int = 100
    clip_norm: float = 1.0
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.peak_lr <= 0 or self.clip_norm <= 0 or self.batch_size < 1:
            raise ValueError("peak_lr, clip_norm and batch_size must be positive")
        if self.weight_decay < 0 or self.warmup_steps < 0:
            raise ValueError("weight_decay and warmup_steps must be non-negative")


FULL_SCALE_OPTIM = dict(peak_lr=1e-5, weight_decay=1e-3, warmup_steps=1000, clip_norm=1.0, batch_size=16)
FULL_SCALE_STAGE_STEPS = (5_000, 10_000, 120_000)
DESK_STAGE_STEPS = (500, 1_000, 3_000)


def lr_at(step: int, warmup_steps: int, total_steps: int, peak_lr: float) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to 0 at ``total_steps``."""
    if total_steps <= warmup_steps:
        raise ValueError(f"total_steps {total_steps} must exceed warmup_steps {warmup_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grad_norm(grads: dict[str, np.ndarray], clip_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale gradients so their global L2 norm is at most ``clip_norm``.

    Returns the (possibly scaled) gradients and the pre-clip norm.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    norm = global_norm(grads)
    if norm > clip_norm:
        s = clip_norm / norm
        grads = {k: (g * s).astype(g.dtype) for k, g in grads.items()}
    return grads, norm


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {"opt/step": np.array([self.step], dtype=np.float32)}
        for k in self.m:
            out[f"opt/m/{k}"] = self.m[k]
            out[f"opt/v/{k}"] = self.v[k]
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "OptimizerState":
        st = cls(int(tensors["opt/step"][0]) if "opt/step" in tensors else 0)
        for k, arr in tensors.items():
            if k.startswith("opt/m/"):
                st.m[k[6:]] = arr.copy()
            elif k.startswith("opt/v/"):
                st.v[k[6:]] = arr.copy()
        return st


def decays(name: str) -> bool:
    return not name.endswith(NO_DECAY_SUFFIXES)


def adamw_step(params: dict, grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
               config: OptimConfig) -> None:
    """In-place decoupled-weight-decay Adam update of the parameters in ``grads``.

    Parameters without a gradient entry are untouched and get no moments.
    """
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        upd = (m / c1) / (np.sqrt(v / c2) + config.eps)
        new = p.data
        if config.weight_decay and decays(name):
            new = new * (1.0 - lr * config.weight_decay)
        p.data = (new - lr * upd).astype(np.float32)


class DataStream:
    """Deterministic shuffled mini-batches that cycle through epochs."""

    def __init__(self, data: Dataset, batch_size: int, seed: int):
        self.data = data
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        out = []
        need = self.batch_size
        while need:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(len(self.data))
                self._pos = 0
            take = self._order[self._pos:self._pos + need]
            self._pos += len(take)
            need -= len(take)
            out.append(take)
        return np.concatenate(out)

    def __iter__(self) -> Iterator[Batch]:
        while True:
            yield batch_from(self.data, self.next_indices())


def batch_from(data: Dataset, idx) -> Batch:
    return Batch(data.views[idx].astype(np.float32) / 255.0, data.token_ids[idx], data.states[idx],
                 data.actions[idx])


def full_batch(data: Dataset) -> Batch:
    return batch_from(data, np.arange(len(data)))


@dataclass
class StepRecord:
    step: int
    stage: str
    loss: float
    lr: float
    grad_norm: float


def trainable_names(policy: Policy, trainable) -> list[str]:
    prefixes = tuple(MODULE_PREFIXES[m] for m in trainable)
    return [k for k in policy.params if k.startswith(prefixes)]


class _FrozenCache:
    """Outputs of frozen encoders, computed once per stage.

    Valid because frozen modules have no stochastic layers and fixed weights.
    """

    def __init__(self, policy: Policy, data: Dataset, trainable, chunk: int = 100):
        self.z = self.d = None
        want_z = "VLB" not in trainable
        want_d = policy.config.enable_idem and "IDEM" not in trainable
        if not (want_z or want_d):
            return
        zs, ds = [], []
        with no_tape():
            for start in range(0, len(data), chunk):
                b = batch_from(data, np.arange(start, min(start + chunk, len(data))))
                if want_z:
                    zs.append(policy.vl_tokens(b).data)
                if want_d:
                    ds.append(policy.depth_features(b).data)
        self.z = np.concatenate(zs) if want_z else None
        self.d = np.concatenate(ds) if want_d else None

    def condition(self, policy: Policy, batch: Batch, idx):
        z = Tensor(self.z[idx]) if self.z is not None else policy.vl_tokens(batch)
        if not policy.config.enable_idem:
            return z
        d = Tensor(self.d[idx]) if self.d is not None else policy.depth_features(batch)
        return policy.fuse(z, d)


def run_stage(stage: StageConfig, policy: Policy, data: Dataset, optim: OptimConfig, seed: int,
              state: OptimizerState | None = None, step_offset: int = 0,
              cache_frozen: bool = True) -> tuple[OptimizerState, list[StepRecord]]:
    """Optimise the stage's trainable modules for ``stage.steps`` steps.

    Parameters of other modules are never written. Returns the optimizer
    state and one record per step.
    """
    names = trainable_names(policy, stage.trainable)
    if not names:
        raise TrainingError(f"stage {stage.name!r}: no parameters in modules {sorted(stage.trainable)}")
    state = state or OptimizerState()
    stream = DataStream(data, optim.batch_size, seed)
    rng = np.random.default_rng([seed, 1])
    cache = _FrozenCache(policy, data, stage.trainable) if cache_frozen else None
    leaves = [policy.params[n] for n in names]
    frozen = [p for k, p in policy.params.items() if k not in set(names)]
    for p in frozen:
        p.grad_enabled = False
    records: list[StepRecord] = []
    warmup = min(optim.warmup_steps, stage.steps - 1)
    try:
        for i in range(stage.steps):
            idx = stream.next_indices()
            batch = batch_from(data, idx)
            lr = lr_at(i, warmup, stage.steps, optim.peak_lr)
            with Tape() as tape:
                cond = cache.condition(policy, batch, idx) if cache else None
                loss = policy.loss(batch, rng, training=True, cond=cond)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise TrainingError(f"stage {stage.name!r} step {i}: loss is {loss_val}")
            gmap = backward(loss, tape, leaves=leaves)
            grads = {n: gmap[p] for n, p in zip(names, leaves)}
            grads, norm = clip_grad_norm(grads, optim.clip_norm)
            adamw_step(policy.params, grads, state, lr, optim)
            records.append(StepRecord(step_offset + i, stage.name, loss_val, lr, norm))
    finally:
        for p in frozen:
            p.grad_enabled = True
        for p in policy.params.values():
            p.grad = None
    return state, records


def policy_tensors(policy: Policy) -> dict[str, np.ndarray]:
    out = {k: v.data for k, v in policy.params.items()}
    out["norm/action_mean"] = policy.action_mean
    out["norm/action_std"] = policy.action_std
    return out


def save_checkpoint(path, policy: Policy, state: OptimizerState | None = None) -> Path:
    tensors = policy_tensors(policy)
    if state is not None:
        tensors.update(state.to_tensors())
    return checkpoint.save(path, tensors)


def load_checkpoint(path, config: ModelConfig) -> tuple[Policy, OptimizerState]:
    """Rebuild a policy for ``config`` from a checkpoint, checking every tensor."""
    tensors = checkpoint.load(path)
    ref = Policy.init(config, seed=0)
    for name, p in ref.params.items():
        if name not in tensors:
            raise checkpoint.CheckpointError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != p.shape:
            raise checkpoint.CheckpointError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, model expects {p.shape}"
            )
        p.data = tensors[name].copy()
    extra = [k for k in tensors if not k.startswith(("opt/", "norm/")) and k not in ref.params]
    if extra:
        raise checkpoint.CheckpointError(f"{path}: unexpected tensor {extra[0]!r} for this model")
    if "norm/action_mean" in tensors:
        ref.action_mean = tensors["norm/action_mean"].copy()
        ref.action_std = tensors["norm/action_std"].copy()
    return ref, OptimizerState.from_tensors(tensors)


def write_metrics(path, records: Sequence[StepRecord], header_comment: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        if new and header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        if new:
            w.writerow(["step", "stage", "loss", "lr", "grad_norm"])
        for r in records:
            w.writerow([r.step, r.stage, repr(r.loss), repr(r.lr), repr(r.grad_norm)])


@dataclass
class PipelineResult:
    policy: Policy
    records: list[StepRecord]
    checkpoints: list[Path]


def run_pipeline(stages: Sequence[StageConfig], policy: Policy, data: Dataset, optim: OptimConfig,
                 seed: int, out_dir=None, cache_frozen: bool = True) -> PipelineResult:
    """Run stages in order, handing off through checkpoints.

    With ``out_dir`` set, ``stage{k}.ckpt`` is written after stage k and the
    next stage starts from that file.
    """
    records: list[StepRecord] = []
    paths: list[Path] = []
    offset = 0
    for k, stage in enumerate(stages, start=1):
        log.info("stage %d (%s): %d steps, trainable %s", k, stage.name, stage.steps, sorted(stage.trainable))
        # moments restart each stage, matching the per-stage schedule restart
        state, recs = run_stage(stage, policy, data, optim, seed + k, OptimizerState(), offset, cache_frozen)
        records.extend(recs)
        offset += stage.steps
        if out_dir is not None:
            path = save_checkpoint(Path(out_dir) / f"stage{k}.ckpt", policy, state)
            paths.append(path)
            policy, _ = load_checkpoint(path, policy.config)
    return PipelineResult(policy, records, paths)
