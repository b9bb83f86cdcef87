"""Multi-seed ablations over depth encoding, fusion strategy and stage count."""

from __future__ import annotations

import csv
import dataclasses
import logging
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from depthvla import evaluate, train
from depthvla.config import RunConfig
from depthvla.env import Dataset
from depthvla.model import ModelConfig, Policy, action_mse

log = logging.getLogger(__name__)

AXES = {
    "idem": ("with", "without"),
    "fusion": ("sem", "concat", "crossattention"),
    "stages": ("1", "2", "3"),
}


@dataclass
class VariantSpec:
    name: str
    model: ModelConfig
    stages: list


def variants(cfg: RunConfig, axis: str) -> list[VariantSpec]:
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {', '.join(AXES)}")
    m = cfg.model
    total = sum(cfg.stage_steps[:cfg.num_stages])
    if axis == "idem":
        return [
            VariantSpec("with", m, cfg.stages),
            VariantSpec("without", dataclasses.replace(m, enable_idem=False, fusion="none"), cfg.stages),
        ]
    if axis == "fusion":
        return [VariantSpec(f, dataclasses.replace(m, fusion=f, enable_idem=True), cfg.stages)
                for f in AXES["fusion"]]
    # equal total budget; shorter schedules fold the tail stages into the last one
    s1, s2, _ = cfg.stage_steps
    return [
        VariantSpec("1", m, train.pipeline_stages(1, [total])),
        VariantSpec("2", m, train.pipeline_stages(2, [s1, total - s1])),
        VariantSpec("3", m, train.pipeline_stages(3, [s1, s2, total - s1 - s2])),
    ]


@dataclass
class SeedResult:
    variant: str
    seed: int
    val_mse: float
    success_rate: float


def run_variant(spec: VariantSpec, seed: int, optim, train_data: Dataset, val_data: Dataset,
                scenes: Sequence, env_config=None, out_dir: Path | None = None) -> SeedResult:
    policy = Policy.init(spec.model, seed)
    policy.set_action_stats(train_data.actions)
    res = train.run_pipeline(spec.stages, policy, train_data, optim, seed, out_dir)
    if out_dir is not None:
        train.write_metrics(Path(out_dir) / "metrics.csv", res.records)
    rng = np.random.default_rng([seed, 7])
    mse = action_mse(res.policy, train.full_batch(val_data), rng)
    learned = evaluate.LearnedPolicy(res.policy, seed)
    rate = evaluate.success_rate(learned, scenes, env_config) if scenes else float("nan")
    log.info("variant %s seed %d: val_mse %.6g success %.3f", spec.name, seed, mse, rate)
    return SeedResult(spec.name, seed, mse, rate)


def run_axis(cfg: RunConfig, axis: str, train_data: Dataset, val_data: Dataset, seeds: Sequence[int],
             num_scenes: int = 100, out_dir: Path | None = None,
             only: Sequence[str] | None = None) -> list[SeedResult]:
    scenes = evaluate.heldout_scenes(num_scenes, cfg.data.seed, cfg.data.env) if num_scenes else []
    results = []
    for spec in variants(cfg, axis):
        if only is not None and spec.name not in only:
            continue
        for seed in seeds:
            sub = None if out_dir is None else Path(out_dir) / f"{axis}_{spec.name}" / f"seed{seed}"
            results.append(run_variant(spec, seed, cfg.optim, train_data, val_data, scenes,
                                       cfg.data.env, sub))
    return results


@dataclass
class Summary:
    variant: str
    mse_median: float
    mse_min: float
    mse_max: float
    success_median: float
    success_min: float
    success_max: float
    seeds: tuple


def summarize(results: Sequence[SeedResult]) -> list[Summary]:
    order = list(dict.fromkeys(r.variant for r in results))
    out = []
    for name in order:
        rs = [r for r in results if r.variant == name]
        mse = [r.val_mse for r in rs]
        sr = [r.success_rate for r in rs]
        out.append(Summary(name, statistics.median(mse), min(mse), max(mse),
                           statistics.median(sr), min(sr), max(sr), tuple(r.seed for r in rs)))
    return out


def write_table(path, summaries: Sequence[Summary]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "val_mse_median", "val_mse_min", "val_mse_max",
                    "success_median", "success_min", "success_max", "seeds"])
        for s in summaries:
            w.writerow([s.variant, repr(s.mse_median), repr(s.mse_min), repr(s.mse_max),
                        repr(s.success_median), repr(s.success_min), repr(s.success_max),
                        " ".join(map(str, s.seeds))])
    return path
