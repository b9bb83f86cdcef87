"""Two-view synthetic reaching task and its demonstration dataset.

The front view shows (x, z) and the top view shows (x, y), so the full 3-D
target position is only available by combining both images.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from depthvla.backbone import Instruction, Tokenizer

PALETTE = {
    "red": (230, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 240),
    "yellow": (240, 220, 40),
    "purple": (170, 60, 200),
}
COLOR_NAMES = list(PALETTE)
DISTRACTOR_COLOR = ("cyan", (40, 220, 230))
EFFECTOR_RGB = (255, 255, 255)
BACKGROUND_RGB = (0, 0, 0)
PERTURBED_BACKGROUND_RGB = (90, 70, 50)

TEMPLATE = "reach the {} block"
TOKENIZER = Tokenizer(
    [w for name in COLOR_NAMES + [DISTRACTOR_COLOR[0]] for w in TEMPLATE.format(name).split()]
)

PERTURBATIONS = ("background", "distractor", "horizontal", "height")
SPLIT_CODES = {"train": 1, "val": 2, "test": 3}


@dataclass
class EnvConfig:
    image_size: int = 32
    square: int = 3
    effector_square: int = 1
    num_objects: int = 3
    horizon: int = 8
    min_separation: float = 0.08
    success_radius: float = 0.05
    max_rejections: int = 10_000


@dataclass
class SceneSpec:
    positions: np.ndarray  # (n, 3) x, y, z
    colors: list  # palette names; the distractor color is allowed for added objects
    target: int
    effector: np.ndarray  # (3,)
    background: tuple = BACKGROUND_RGB

    @property
    def target_position(self) -> np.ndarray:
        return self.positions[self.target]

    @property
    def target_color(self) -> str:
        return self.colors[self.target]


@dataclass
class MultiViewObservation:
    views: np.ndarray  # (2, H, W, 3) uint8: front, top
    instruction: Instruction
    state: np.ndarray  # (4,) effector xyz + gripper
    index: int = 0  # episode slot during batched rollouts


@dataclass
class Demonstration:
    seed: int
    observation: MultiViewObservation
    actions: np.ndarray  # (H, 4)


def _rgb(name: str) -> tuple:
    if name == DISTRACTOR_COLOR[0]:
        return DISTRACTOR_COLOR[1]
    return PALETTE[name]


def _separated(p: np.ndarray, others: Sequence[np.ndarray], min_sep: float) -> bool:
    return all(np.linalg.norm(p - o) >= min_sep for o in others)


def sample_scene(rng: np.random.Generator, num_objects: int, config: EnvConfig | None = None) -> SceneSpec:
    config = config or EnvConfig()
    if not 1 <= num_objects <= len(COLOR_NAMES):
        raise ValueError(f"num_objects must be in [1, {len(COLOR_NAMES)}], got {num_objects}")
    positions: list[np.ndarray] = []
    tries = 0
    while len(positions) < num_objects:
        tries += 1
        if tries > config.max_rejections:
            raise RuntimeError(f"could not place {num_objects} objects with separation {config.min_separation}")
        p = rng.random(3)
        if _separated(p, positions, config.min_separation):
            positions.append(p)
    colors = [COLOR_NAMES[i] for i in rng.permutation(len(COLOR_NAMES))[:num_objects]]
    target = int(rng.integers(num_objects))
    effector = rng.random(3)
    return SceneSpec(np.array(positions), colors, target, effector)


def scene_from_seed(seed: int, config: EnvConfig | None = None) -> SceneSpec:
    config = config or EnvConfig()
    return sample_scene(np.random.default_rng(seed), config.num_objects, config)


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def pixel_centers(point, size: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """(row, col) of a 3-D point in the front view and in the top view."""
    x, y, z = point
    col = _round_half_up(x * (size - 1))
    return (_round_half_up((1 - z) * (size - 1)), col), (_round_half_up(y * (size - 1)), col)


def _draw(img: np.ndarray, center: tuple[int, int], k: int, rgb) -> None:
    r, c = center
    lo = k // 2
    hi = k - lo
    img[max(r - lo, 0):min(r + hi, img.shape[0]), max(c - lo, 0):min(c + hi, img.shape[1])] = rgb


def render(scene: SceneSpec, config: EnvConfig | None = None, effector=None) -> np.ndarray:
    """Front and top views, shape (2, S, S, 3) uint8.

    Objects are drawn in list order (later over earlier); the effector marker
    is drawn last.
    """
    config = config or EnvConfig()
    s = config.image_size
    views = np.empty((2, s, s, 3), dtype=np.uint8)
    views[:] = scene.background
    eff = scene.effector if effector is None else effector
    items = [(p, _rgb(c), config.square) for p, c in zip(scene.positions, scene.colors)]
    items.append((eff, EFFECTOR_RGB, config.effector_square))
    for point, rgb, k in items:
        front, top = pixel_centers(point, s)
        _draw(views[0], front, k, rgb)
        _draw(views[1], top, k, rgb)
    return views


def instruction_for(scene: SceneSpec) -> Instruction:
    return Instruction(TOKENIZER.encode(TEMPLATE.format(scene.target_color)), len(TOKENIZER))


def scripted_expert(scene: SceneSpec, horizon: int, start=None) -> np.ndarray:
    """Straight-line reach in ``horizon`` equal steps; gripper closes on the last."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    start = scene.effector if start is None else np.asarray(start)
    delta = (scene.target_position - start) / horizon
    actions = np.zeros((horizon, 4), dtype=np.float64)
    actions[:, :3] = delta
    actions[-1, 3] = 1.0
    return actions


def state_of(effector, gripper: float = 0.0) -> np.ndarray:
    return np.concatenate([np.asarray(effector, dtype=np.float32), [np.float32(gripper)]]).astype(np.float32)


def observe(scene: SceneSpec, effector, gripper: float, config: EnvConfig | None = None,
            index: int = 0) -> MultiViewObservation:
    return MultiViewObservation(render(scene, config, effector), instruction_for(scene),
                                state_of(effector, gripper), index)


def demonstration(seed: int, config: EnvConfig | None = None) -> Demonstration:
    config = config or EnvConfig()
    scene = scene_from_seed(seed, config)
    obs = observe(scene, scene.effector, 0.0, config)
    return Demonstration(seed, obs, scripted_expert(scene, config.horizon).astype(np.float32))


def execute(effector: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, float, list[np.ndarray]]:
    """Apply position deltas in order; returns final effector, gripper and the path."""
    pos = np.array(effector, dtype=np.float64)
    grip = 0.0
    path = []
    for a in np.asarray(actions, dtype=np.float64):
        pos = np.clip(pos + a[:3], 0.0, 1.0)
        grip = float(np.clip(a[3], 0.0, 1.0))
        path.append(pos.copy())
    return pos, grip, path


# policy: list of observations -> (B, H, 4) action chunks
BatchPolicy = Callable[[list], np.ndarray]


@dataclass
class RolloutResult:
    success: bool
    trajectory: list = field(default_factory=list)
    final_distance: float = float("nan")


def rollout_batch(policy: BatchPolicy, scenes: Sequence[SceneSpec], max_steps: int = 24,
                  config: EnvConfig | None = None) -> list[RolloutResult]:
    """Closed-loop execution of action chunks on several scenes in lockstep.

    The policy is re-queried after each chunk. A scene succeeds once the
    effector comes within ``success_radius`` of its target.
    """
    config = config or EnvConfig()
    n = len(scenes)
    eff = [np.array(s.effector, dtype=np.float64) for s in scenes]
    grip = [0.0] * n
    done = [False] * n
    trajs = [[e.copy()] for e in eff]
    steps = 0
    while steps < max_steps and not all(done):
        active = [i for i in range(n) if not done[i]]
        obs = [observe(scenes[i], eff[i], grip[i], config, index=i) for i in active]
        chunks = np.asarray(policy(obs))
        remaining = max_steps - steps
        for j, i in enumerate(active):
            for a in chunks[j][:remaining]:
                eff[i], grip[i], _ = execute(eff[i], a[None])
                trajs[i].append(eff[i].copy())
                if np.linalg.norm(eff[i] - scenes[i].target_position) <= config.success_radius:
                    done[i] = True
                    break
        steps += min(chunks.shape[1], remaining)
    return [
        RolloutResult(done[i], trajs[i], float(np.linalg.norm(eff[i] - scenes[i].target_position)))
        for i in range(n)
    ]


def rollout(policy: Callable, scene: SceneSpec, max_steps: int = 24,
            config: EnvConfig | None = None) -> RolloutResult:
    """Single-scene rollout; ``policy(observation) -> (H, 4)`` chunk."""
    return rollout_batch(lambda obs: np.stack([policy(o) for o in obs]), [scene], max_steps, config)[0]


class ScriptedPolicy:
    """The scripted expert as a batch policy with privileged scene access.

    Observations are matched to scenes through their episode ``index``.
    """

    def __init__(self, scenes: Sequence[SceneSpec], horizon: int):
        self.scenes = list(scenes)
        self.horizon = horizon

    def __call__(self, observations: list) -> np.ndarray:
        return np.stack([scripted_expert(self.scenes[o.index], self.horizon, start=o.state[:3])
                         for o in observations])


def zero_policy(horizon: int) -> BatchPolicy:
    return lambda observations: np.zeros((len(observations), horizon, 4))


def perturb(scene: SceneSpec, kind: str, rng: np.random.Generator, config: EnvConfig | None = None) -> SceneSpec:
    """Disturbed copy of ``scene``; the instruction is unchanged."""
    config = config or EnvConfig()
    if kind not in PERTURBATIONS:
        raise ValueError(f"unknown perturbation {kind!r}; expected one of {', '.join(PERTURBATIONS)}")
    positions = scene.positions.copy()
    if kind == "background":
        return replace(scene, positions=positions, background=PERTURBED_BACKGROUND_RGB)
    if kind == "distractor":
        for _ in range(config.max_rejections):
            p = rng.random(3)
            if _separated(p, list(positions), config.min_separation):
                return replace(scene, positions=np.vstack([positions, p]),
                               colors=list(scene.colors) + [DISTRACTOR_COLOR[0]])
        raise RuntimeError("could not place distractor object")
    sign = 1.0 if rng.random() < 0.5 else -1.0
    if kind == "horizontal":
        axis = int(rng.integers(2))
    else:
        axis = 2
    p = positions[scene.target].copy()
    p[axis] = np.clip(p[axis] + sign * 0.1, 0.0, 1.0)
    if p[axis] == positions[scene.target][axis]:
        p[axis] = np.clip(p[axis] - sign * 0.1, 0.0, 1.0)
    positions[scene.target] = p
    return replace(scene, positions=positions)


def scene_seed(split: str, seed: int, index: int) -> int:
    if split not in SPLIT_CODES:
        raise ValueError(f"unknown split {split!r}; expected one of {', '.join(SPLIT_CODES)}")
    if not 0 <= index < 1 << 24 or not 0 <= seed < 1 << 32:
        raise ValueError("seed or index out of range")
    return (SPLIT_CODES[split] << 56) | (seed << 24) | index


DATASET_MAGIC = b"EVDS"
DATASET_VERSION = 1


def generate_dataset(path, seed: int, size: int, split: str, config: EnvConfig | None = None) -> Path:
    """Write ``size`` demonstrations; split seed ranges never overlap."""
    config = config or EnvConfig()
    if size < 1:
        raise ValueError("dataset size must be >= 1")
    path = Path(path)
    chunks = [DATASET_MAGIC, struct.pack("<II", DATASET_VERSION, size)]
    for i in range(size):
        sd = scene_seed(split, seed, i)
        demo = demonstration(sd, config)
        obs = demo.observation
        ids = obs.instruction.token_ids
        chunks.append(struct.pack("<QH", sd, len(ids)))
        chunks.append(struct.pack(f"<{len(ids)}H", *ids))
        chunks.append(struct.pack("<H", len(obs.state)) + obs.state.astype("<f4").tobytes())
        h, d = demo.actions.shape
        chunks.append(struct.pack("<HH", h, d) + demo.actions.astype("<f4").tobytes())
        for img in obs.views:
            chunks.append(struct.pack("<HH", img.shape[0], img.shape[1]) + img.astype(np.uint8).tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    return path


@dataclass
class Dataset:
    seeds: np.ndarray  # (n,) uint64
    token_ids: np.ndarray  # (n, L)
    states: np.ndarray  # (n, D_s)
    actions: np.ndarray  # (n, H, D_a)
    views: np.ndarray  # (n, 2, S, S, 3) uint8

    def __len__(self) -> int:
        return len(self.seeds)


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a demonstration dataset (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off = 12
    seeds, ids, states, actions, views = [], [], [], [], []
    for _ in range(count):
        sd, n = struct.unpack_from("<QH", buf, off)
        off += 10
        ids.append(struct.unpack_from(f"<{n}H", buf, off))
        off += 2 * n
        (ns,) = struct.unpack_from("<H", buf, off)
        off += 2
        states.append(np.frombuffer(buf, "<f4", ns, off))
        off += 4 * ns
        h, d = struct.unpack_from("<HH", buf, off)
        off += 4
        actions.append(np.frombuffer(buf, "<f4", h * d, off).reshape(h, d))
        off += 4 * h * d
        pair = []
        for _v in range(2):
            rows, cols = struct.unpack_from("<HH", buf, off)
            off += 4
            pair.append(np.frombuffer(buf, np.uint8, rows * cols * 3, off).reshape(rows, cols, 3))
            off += rows * cols * 3
        views.append(pair)
        seeds.append(sd)
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return Dataset(np.array(seeds, dtype=np.uint64), np.array(ids, dtype=np.int64),
                   np.array(states, dtype=np.float32), np.array(actions, dtype=np.float32),
                   np.array(views, dtype=np.uint8))
