"""Deterministic synthetic gridworld with labeled frames.

Five discrete state factors, one per probing category, drive a sprite
renderer on a blank canvas: an agent paddle along the bottom (random
walk), a small ball on a fixed lane (fixed schedule), an enemy block
moving vertically (bounce schedule), a mode indicator, and a thermometer
score display that increments when agent and ball columns overlap. The
renderer is a deterministic function of the label tuple, every factor owns
a disjoint canvas region, and episodes are fully reproducible from their
seed.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff.tensor import ShapeError

__all__ = [
    "Factor",
    "WorldConfig",
    "Episode",
    "FramePair",
    "AugmentConfig",
    "render_frame",
    "generate_episode",
    "sample_batch",
    "two_view_batch",
    "save_episode",
    "load_episode",
    "generate_dataset",
    "load_dataset",
    "world_hash",
]

CATEGORIES = (
    "agent-localization",
    "small-object-localization",
    "other-localization",
    "miscellaneous",
    "score-clock-lives-display",
)


@dataclass
class Factor:
    name: str
    category: str
    cardinality: int

    def __post_init__(self):
        if self.cardinality < 2:
            raise ShapeError(f"factor {self.name}: cardinality must be >= 2")
        if self.category not in CATEGORIES:
            raise ShapeError(f"factor {self.name}: unknown category {self.category!r}")


@dataclass
class WorldConfig:
    """Canvas geometry and factor cardinalities.

    Pixel values are 0.0 background / 1.0 sprite, scaled to [0, 1].
    """

    height: int = 64
    width: int = 64
    agent_card: int = 16
    ball_card: int = 16
    enemy_card: int = 16
    mode_card: int = 4
    score_card: int = 8
    border_mode: str = "reflect"  # or "stay"
    mode_flip_prob: float = 0.15

    # fixed row bands (sprites never share pixels)
    score_rows: tuple = (0, 4)
    mode_rows: tuple = (8, 12)
    ball_rows: tuple = (20, 22)
    enemy_row0: int = 28
    agent_height: int = 8

    def __post_init__(self):
        if self.border_mode not in ("reflect", "stay"):
            raise ShapeError(f"border_mode must be reflect|stay, got {self.border_mode!r}")
        for name, end in (("score", self.score_span(self.score_card - 1)[1]),
                          ("mode", self.mode_span(self.mode_card - 1)[1]),
                          ("ball", self.ball_span(self.ball_card - 1)[1]),
                          ("agent", self.agent_span(self.agent_card - 1)[1])):
            if end > self.width:
                raise ShapeError(
                    f"{name} sprite exceeds canvas width {self.width} (needs {end})"
                )
        if self.enemy_row0 + self.enemy_card - 1 + 4 > self.height - self.agent_height:
            raise ShapeError(
                f"enemy lane (rows {self.enemy_row0}..{self.enemy_row0 + self.enemy_card + 3}) "
                f"collides with agent rows"
            )

    def factors(self):
        return [
            Factor("agent_x", "agent-localization", self.agent_card),
            Factor("ball_x", "small-object-localization", self.ball_card),
            Factor("enemy_y", "other-localization", self.enemy_card),
            Factor("mode", "miscellaneous", self.mode_card),
            Factor("score", "score-clock-lives-display", self.score_card),
        ]

    # sprite column spans (start, end) per factor value
    def agent_span(self, v):
        return 4 * v, 4 * v + 4

    def ball_span(self, v):
        return 4 * v + 1, 4 * v + 3

    def mode_span(self, v):
        return 8 * v, 8 * v + 4

    def score_span(self, cell):
        return 8 * cell, 8 * cell + 4


def world_hash(world):
    text = json.dumps(asdict(world), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class Episode:
    """Frames (T, 1, H, W) float32 in [0,1]; labels (T, 5) int64; the
    renderer maps labels[t] to frames[t] exactly."""

    frames: np.ndarray
    labels: np.ndarray
    seed: int
    world: WorldConfig


@dataclass
class FramePair:
    """B temporally adjacent frame pairs; within-batch members serve as the
    contrastive negatives."""

    x_t: np.ndarray
    x_next: np.ndarray
    episode_indices: np.ndarray
    times: np.ndarray


@dataclass
class AugmentConfig:
    """Two-view augmentation: random crop-and-resize, horizontal flip,
    additive uniform pixel noise. Defaults are the identity."""

    crop_min_scale: float = 1.0
    flip: bool = False
    noise: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.crop_min_scale <= 1.0):
            raise ShapeError(
                f"crop_min_scale must be in (0, 1], got {self.crop_min_scale}"
            )
        if self.noise < 0:
            raise ShapeError("noise amplitude must be >= 0")


def render_frame(values, world):
    """Draw the sprite for each factor value onto a blank canvas."""
    agent, ball, enemy, mode, score = (int(v) for v in values)
    frame = np.zeros((1, world.height, world.width), dtype=np.float32)
    for cell in range(score):
        c0, c1 = world.score_span(cell)
        frame[0, world.score_rows[0] : world.score_rows[1], c0:c1] = 1.0
    c0, c1 = world.mode_span(mode)
    frame[0, world.mode_rows[0] : world.mode_rows[1], c0:c1] = 1.0
    c0, c1 = world.ball_span(ball)
    frame[0, world.ball_rows[0] : world.ball_rows[1], c0:c1] = 1.0
    r0 = world.enemy_row0 + enemy
    frame[0, r0 : r0 + 4, 50:54] = 1.0
    c0, c1 = world.agent_span(agent)
    frame[0, world.height - world.agent_height :, c0:c1] = 1.0
    return frame


def _step_labels(values, direction, world, rng):
    agent, ball, enemy, mode, score = values
    move = 1 if rng.random() < 0.5 else -1
    agent = agent + move
    if agent < 0 or agent > world.agent_card - 1:
        if world.border_mode == "stay":
            agent = min(max(agent, 0), world.agent_card - 1)
        else:
            agent = -agent if agent < 0 else 2 * (world.agent_card - 1) - agent

    ball = (ball + 1) % world.ball_card

    if enemy + direction < 0 or enemy + direction > world.enemy_card - 1:
        direction = -direction
    enemy = enemy + direction

    if rng.random() < world.mode_flip_prob:
        mode = (mode + 1) % world.mode_card

    a0, a1 = world.agent_span(agent)
    b0, b1 = world.ball_span(ball)
    if a0 < b1 and b0 < a1:  # columns overlap: contact event
        score = (score + 1) % world.score_card

    return (agent, ball, enemy, mode, score), direction


def generate_episode(seed, length, world):
    """Roll the factor dynamics for ``length`` steps and render each frame."""
    if length < 2:
        raise ShapeError(f"episode length must be >= 2, got {length}")
    rng = np.random.default_rng([int(seed), 193])
    values = (
        int(rng.integers(world.agent_card)),
        int(rng.integers(world.ball_card)),
        int(rng.integers(world.enemy_card)),
        int(rng.integers(world.mode_card)),
        int(rng.integers(world.score_card)),
    )
    direction = 1 if rng.random() < 0.5 else -1
    labels = np.empty((length, 5), dtype=np.int64)
    frames = np.empty((length, 1, world.height, world.width), dtype=np.float32)
    for t in range(length):
        labels[t] = values
        frames[t] = render_frame(values, world)
        values, direction = _step_labels(values, direction, world, rng)
    return Episode(frames, labels, int(seed), world)


def sample_batch(episodes, batch_size, rng):
    """Draw ``batch_size`` adjacent pairs, spreading over distinct episodes
    whenever enough episodes exist."""
    n_pairs = sum(ep.frames.shape[0] - 1 for ep in episodes)
    if n_pairs < batch_size:
        raise ShapeError(
            f"need {batch_size} adjacent pairs, dataset only has {n_pairs}"
        )
    n_ep = len(episodes)
    order = []
    while len(order) < batch_size:
        order.extend(rng.permutation(n_ep).tolist())
    order = np.asarray(order[:batch_size])
    times = np.array(
        [rng.integers(episodes[i].frames.shape[0] - 1) for i in order], dtype=np.int64
    )
    x_t = np.stack([episodes[i].frames[t] for i, t in zip(order, times)])
    x_next = np.stack([episodes[i].frames[t + 1] for i, t in zip(order, times)])
    return FramePair(x_t, x_next, order, times)


def _resize_bilinear(img, out_h, out_w):
    """Channel-first bilinear resize of one (C, h, w) image."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype)


def _augment(img, cfg, rng):
    c, h, w = img.shape
    out = img
    if cfg.crop_min_scale < 1.0:
        scl = rng.uniform(cfg.crop_min_scale, 1.0)
        ch = max(1, int(round(h * scl)))
        cw = max(1, int(round(w * scl)))
        if ch > h or cw > w:
            raise ShapeError(f"crop window {ch}x{cw} exceeds canvas {h}x{w}")
        top = int(rng.integers(h - ch + 1))
        left = int(rng.integers(w - cw + 1))
        out = _resize_bilinear(out[:, top : top + ch, left : left + cw], h, w)
    if cfg.flip and rng.random() < 0.5:
        out = out[:, :, ::-1]
    if cfg.noise > 0:
        out = out + rng.uniform(-cfg.noise, cfg.noise, out.shape).astype(out.dtype)
        out = np.clip(out, 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float32)


def two_view_batch(images, batch_size, rng, augment=None):
    """Sample frames and produce two independently augmented views of each."""
    cfg = augment or AugmentConfig()
    n = images.shape[0]
    if n < 1:
        raise ShapeError("two_view_batch: empty image pool")
    idx = rng.choice(n, size=batch_size, replace=n < batch_size)
    va = np.stack([_augment(images[i], cfg, rng) for i in idx])
    vb = np.stack([_augment(images[i], cfg, rng) for i in idx])
    return va, vb


# --- dataset files -------------------------------------------------------

EPISODE_FORMAT_VERSION = 1
MANIFEST_VERSION = 1


def save_episode(path, episode):
    from .container import write_container

    meta = {
        "episode_format": EPISODE_FORMAT_VERSION,
        "seed": episode.seed,
        "world": asdict(episode.world),
        "factors": [asdict(f) for f in episode.world.factors()],
    }
    write_container(path, {"frames": episode.frames, "labels": episode.labels}, meta)
    sidecar = {
        "seed": episode.seed,
        "length": int(episode.frames.shape[0]),
        "factors": [asdict(f) for f in episode.world.factors()],
    }
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_episode(path):
    from .container import read_container

    arrays, meta = read_container(path)
    if meta.get("episode_format") != EPISODE_FORMAT_VERSION:
        raise ShapeError(f"{path}: unsupported episode format {meta.get('episode_format')!r}")
    world = WorldConfig(**meta["world"])
    return Episode(arrays["frames"], arrays["labels"], int(meta["seed"]), world)


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def generate_dataset(out_dir, world, n_episodes, length, base_seed):
    """Write episodes plus a manifest JSON; returns the manifest path."""
    ep_dir = os.path.join(out_dir, "episodes")
    os.makedirs(ep_dir, exist_ok=True)
    entries = []
    for k in range(n_episodes):
        seed = base_seed + k
        ep = generate_episode(seed, length, world)
        fname = f"ep_{seed:08d}.bin"
        path = os.path.join(ep_dir, fname)
        save_episode(path, ep)
        entries.append(
            {
                "file": os.path.join("episodes", fname),
                "seed": seed,
                "length": length,
                "sha256": _sha256(path),
            }
        )
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "world": asdict(world),
        "world_hash": world_hash(world),
        "base_seed": base_seed,
        "episodes": entries,
    }
    manifest_path = os.path.join(out_dir, "dataset_manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_dataset(manifest_path, verify=True):
    """Load all episodes listed in a manifest, verifying file hashes."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("manifest_version") != MANIFEST_VERSION:
        raise ShapeError(f"unsupported dataset manifest version in {manifest_path}")
    root = os.path.dirname(os.path.abspath(manifest_path))
    episodes = []
    for entry in manifest["episodes"]:
        path = os.path.join(root, entry["file"])
        if verify and _sha256(path) != entry["sha256"]:
            raise ShapeError(f"dataset file {path} failed hash verification")
        episodes.append(load_episode(path))
    return episodes, manifest
