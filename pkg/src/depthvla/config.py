"""Run configuration: a sectioned key=value file with ``[model]``, ``[training]`` and ``[data]``.

Model sub-configs use dotted keys (``idem.num_layers``, ``vlb.hidden_dim``,
``expert.dropout``); the environment's knobs live under ``[data]`` as
``env.<field>``. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from depthvla.backbone import VlbConfig
from depthvla.env import EnvConfig
from depthvla.expert import ExpertConfig
from depthvla.idem import IdemConfig
from depthvla.model import ModelConfig
from depthvla.train import DESK_STAGE_STEPS, OptimConfig, StageConfig, pipeline_stages


class ConfigError(ValueError):
    pass


# [training] key -> OptimConfig field
OPTIM_KEYS = {
    "learning_rate": "peak_lr",
    "weight_decay": "weight_decay",
    "warmup_steps": "warmup_steps",
    "gradient_clip_norm": "clip_norm",
    "batch_size": "batch_size",
    "adam_beta1": "beta1",
    "adam_beta2": "beta2",
    "adam_eps": "eps",
}


@dataclass
class DataConfig:
    train: Path | None = None
    val: Path | None = None
    train_size: int = 1000
    val_size: int = 200
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    num_stages: int = 3
    stage_steps: tuple = DESK_STAGE_STEPS
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: Path = Path("runs/default")
    seed: int = 0

    @property
    def stages(self) -> list[StageConfig]:
        return pipeline_stages(self.num_stages, self.stage_steps)

    def validate(self, need_data: bool = True) -> "RunConfig":
        if need_data:
            for label, p in (("train", self.data.train), ("val", self.data.val)):
                if p is None:
                    raise ConfigError(f"[data] {label} path is not set")
                if not Path(p).exists():
                    raise ConfigError(f"[data] {label} file {p} does not exist")
        if len(self.stage_steps) < self.num_stages:
            raise ConfigError(f"{self.num_stages} stages need {self.num_stages} step counts")
        try:
            for st in self.stages:
                if st.steps <= min(self.optim.warmup_steps, 1):
                    raise ConfigError(f"stage {st.name} has too few steps ({st.steps})")
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self


def _convert(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def _build(cls, values: dict[str, str], section: str):
    defaults = cls()
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key, raw in values.items():
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r} for {cls.__name__}")
        kwargs[key] = _convert(raw, getattr(defaults, key), f"[{section}] {key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {e}") from e


def _split_prefixed(section: dict[str, str], prefixes) -> tuple[dict, dict]:
    groups = {p: {} for p in prefixes}
    rest = {}
    for k, v in section.items():
        head, _, tail = k.partition(".")
        if tail and head in groups:
            groups[head][tail] = v
        else:
            rest[k] = v
    return groups, rest


def parse(text: str, base_dir: Path | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    unknown = set(cp.sections()) - {"model", "training", "data"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    section = {s: dict(cp[s]) if cp.has_section(s) else {} for s in ("model", "training", "data")}
    base_dir = base_dir or Path.cwd()

    groups, rest = _split_prefixed(section["model"], ("idem", "vlb", "expert"))
    fusion = rest.pop("fusion", "sem")
    enable_idem = _convert(rest.pop("enable_idem", "true"), True, "[model] enable_idem")
    if rest:
        raise ConfigError(f"[model] unknown keys {sorted(rest)}")
    try:
        model = ModelConfig(
            idem=_build(IdemConfig, groups["idem"], "model"),
            vlb=_build(VlbConfig, groups["vlb"], "model"),
            expert=_build(ExpertConfig, groups["expert"], "model"),
            fusion=fusion,
            enable_idem=enable_idem,
        )
    except ValueError as e:
        raise ConfigError(f"[model] {e}") from e

    tr = dict(section["training"])
    optim_vals = {OPTIM_KEYS[k]: tr.pop(k) for k in list(tr) if k in OPTIM_KEYS}
    optim = _build(OptimConfig, optim_vals, "training")
    num_stages = _convert(tr.pop("stages", "3"), 0, "[training] stages")
    steps = list(DESK_STAGE_STEPS)
    for i in range(3):
        key = f"stage{i + 1}_steps"
        if key in tr:
            steps[i] = _convert(tr.pop(key), 0, f"[training] {key}")
    seed = _convert(tr.pop("seed", "0"), 0, "[training] seed")
    out_dir = Path(tr.pop("out_dir", "runs/default"))
    if tr:
        raise ConfigError(f"[training] unknown keys {sorted(tr)}")

    groups, rest = _split_prefixed(section["data"], ("env",))
    paths = {}
    for key in ("train", "val"):
        if key in rest:
            p = Path(rest.pop(key))
            paths[key] = p if p.is_absolute() else base_dir / p
    data = DataConfig(
        train=paths.get("train"),
        val=paths.get("val"),
        train_size=_convert(rest.pop("train_size", "1000"), 0, "[data] train_size"),
        val_size=_convert(rest.pop("val_size", "200"), 0, "[data] val_size"),
        seed=_convert(rest.pop("seed", "0"), 0, "[data] seed"),
        env=_build(EnvConfig, groups["env"], "data"),
    )
    if rest:
        raise ConfigError(f"[data] unknown keys {sorted(rest)}")
    if not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    if num_stages not in (1, 2, 3):
        raise ConfigError(f"[training] stages must be 1, 2 or 3, got {num_stages}")
    return RunConfig(model, optim, num_stages, tuple(steps), data, out_dir, seed)


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse(text, path.parent)


def _fields(obj, prefix: str = "") -> list[str]:
    out = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, bool):
            v = str(v).lower()
        out.append(f"{prefix}{f.name} = {v}")
    return out


def dump(cfg: RunConfig) -> str:
    """Effective config with every default spelled out; ``parse(dump(c))`` re-validates."""
    m = cfg.model
    lines = ["[model]", f"fusion = {m.fusion.value}", f"enable_idem = {str(m.enable_idem).lower()}"]
    lines += _fields(m.idem, "idem.") + _fields(m.vlb, "vlb.") + _fields(m.expert, "expert.")
    lines += ["", "[training]"]
    lines += [f"{k} = {getattr(cfg.optim, f)}" for k, f in OPTIM_KEYS.items()]
    lines.append(f"stages = {cfg.num_stages}")
    lines += [f"stage{i + 1}_steps = {s}" for i, s in enumerate(cfg.stage_steps)]
    lines += [f"seed = {cfg.seed}", f"out_dir = {Path(cfg.out_dir).resolve()}"]
    lines += ["", "[data]"]
    for key in ("train", "val"):
        p = getattr(cfg.data, key)
        if p is not None:
            lines.append(f"{key} = {Path(p).resolve()}")
    lines += [f"train_size = {cfg.data.train_size}", f"val_size = {cfg.data.val_size}",
              f"seed = {cfg.data.seed}"]
    lines += _fields(cfg.data.env, "env.")
    return "\n".join(lines) + "\n"
