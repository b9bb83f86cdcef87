"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from depthvla import ablation, env, evaluate, idem, train
from depthvla.checkpoint import CheckpointError
from depthvla.config import ConfigError, RunConfig, dump, load, parse
from depthvla.model import Policy, action_mse

log = logging.getLogger("depthvla")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _config(args, need_data: bool) -> RunConfig:
    cfg = load(args.config) if args.config else parse("")
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "stages", None) is not None:
        cfg = dataclasses.replace(cfg, num_stages=args.stages)
    if getattr(args, "out", None) is not None:
        cfg = dataclasses.replace(cfg, out_dir=Path(args.out))
    return cfg.validate(need_data=need_data)


def _write_effective(cfg: RunConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.ini"
    path.write_text(dump(cfg))
    return path


def cmd_gen_data(args) -> int:
    cfg = load(args.config) if args.config else parse("")
    size = args.size if args.size is not None else (
        cfg.data.train_size if args.split == "train" else cfg.data.val_size)
    seed = args.seed if args.seed is not None else cfg.data.seed
    out = Path(args.out) if args.out else Path(f"{args.split}.evds")
    path = env.generate_dataset(out, seed, size, args.split, cfg.data.env)
    print(f"{path} {size}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args, need_data=True)
    out = Path(cfg.out_dir)
    _write_effective(cfg, out)
    data = env.load_dataset(cfg.data.train)
    policy = Policy.init(cfg.model, cfg.seed)
    policy.set_action_stats(data.actions)
    metrics = out / "metrics.csv"
    if metrics.exists():
        metrics.unlink()
    res = train.run_pipeline(cfg.stages, policy, data, cfg.optim, cfg.seed, out)
    train.write_metrics(metrics, res.records, header_comment=f"written {time.strftime('%Y-%m-%dT%H:%M:%S')}")
    first, last = res.records[0].loss, res.records[-1].loss
    print(f"trained {len(res.records)} steps over {len(cfg.stages)} stages; loss {first:.4f} -> {last:.4f}")
    for p in res.checkpoints:
        print(p)
    return EXIT_OK


def _scripted(scenes, cfg):
    return env.ScriptedPolicy(scenes, cfg.data.env.horizon)


def cmd_eval(args) -> int:
    cfg = _config(args, need_data=False)
    scenes = evaluate.heldout_scenes(args.scenes, args.seed or 0, cfg.data.env)
    kinds = env.PERTURBATIONS if args.perturb == [] else tuple(args.perturb or ())
    val_mse = None
    if args.policy == "learned":
        if not args.checkpoint:
            raise UsageError("eval with --policy learned needs --checkpoint")
        policy, _ = train.load_checkpoint(args.checkpoint, cfg.model)
        learned = evaluate.LearnedPolicy(policy, args.seed or 0)

        def policy_for(_scenes):
            return learned

        if cfg.data.val is not None and Path(cfg.data.val).exists():
            val = env.load_dataset(cfg.data.val)
            val_mse = action_mse(policy, train.full_batch(val), np.random.default_rng([args.seed or 0, 7]))
    elif args.policy == "expert":
        def policy_for(ss):
            return _scripted(ss, cfg)
    else:
        def policy_for(_scenes):
            return env.zero_policy(cfg.data.env.horizon)

    report = evaluate.evaluate(policy_for, scenes, args.seed or 0, kinds, cfg.data.env, val_mse)
    text = "\n".join(report.lines())
    print(text)
    out = Path(args.out) if args.out else Path(cfg.out_dir) / "eval.txt"
    report.write(out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args, need_data=True)
    out = Path(cfg.out_dir)
    _write_effective(cfg, out)
    train_data = env.load_dataset(cfg.data.train)
    val_data = env.load_dataset(cfg.data.val)
    seeds = [cfg.seed + i for i in range(args.num_seeds)]
    results = ablation.run_axis(cfg, args.axis, train_data, val_data, seeds, args.scenes, out)
    summaries = ablation.summarize(results)
    path = ablation.write_table(out / f"ablate_{args.axis}.csv", summaries)
    print(path.read_text(), end="")
    return EXIT_OK


def write_pgm(path: Path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def normalize_map(m: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes all zeros."""
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0:
        return np.zeros(m.shape, np.uint8)
    return np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def cmd_export_attention(args) -> int:
    cfg = _config(args, need_data=False)
    if not cfg.model.enable_idem:
        raise UsageError("the model has no depth encoder to visualise")
    policy, _ = train.load_checkpoint(args.checkpoint, cfg.model)
    scene = env.scene_from_seed(env.scene_seed("test", args.seed or 0, 0), cfg.data.env)
    views = env.render(scene, cfg.data.env)[None].astype(np.float32) / 255.0
    icfg = cfg.model.idem
    maps = idem.attention_maps(views, icfg, policy.params)[0]  # (L, heads, T, T)
    grids = idem.received_attention(maps, icfg)  # (L, heads, N, g, g)
    out = Path(args.out) if args.out else Path(cfg.out_dir) / "attention"
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for layer in range(grids.shape[0]):
        for head in range(grids.shape[1]):
            for view in range(grids.shape[2]):
                write_pgm(out / f"layer{layer}_head{head}_view{view}.pgm", normalize_map(grids[layer, head, view]))
                count += 1
    print(f"wrote {count} maps to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depthvla", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, out=True):
        sp.add_argument("--config", help="run config (key=value sections)")
        if seed:
            sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out")

    sp = sub.add_parser("gen-data", help="write a demonstration dataset")
    common(sp)
    sp.add_argument("--split", required=True, choices=sorted(env.SPLIT_CODES))
    sp.add_argument("--size", type=int)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="run the staged training pipeline")
    common(sp)
    sp.add_argument("--stages", type=int, choices=(1, 2, 3))
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="closed-loop success rate on held-out scenes")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--scenes", type=int, default=100)
    sp.add_argument("--perturb", nargs="*", choices=env.PERTURBATIONS,
                    help="disturbance kinds; no value means all four")
    sp.add_argument("--policy", choices=("learned", "expert", "zero"), default="learned")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="multi-seed variant comparison")
    common(sp)
    sp.add_argument("--axis", required=True, choices=sorted(ablation.AXES))
    sp.add_argument("--stages", type=int, choices=(1, 2, 3))
    sp.add_argument("--num-seeds", type=int, default=5)
    sp.add_argument("--scenes", type=int, default=100)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("export-attention", help="write depth-encoder attention maps as PGM images")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(fn=cmd_export_attention)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, train.TrainingError, OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
