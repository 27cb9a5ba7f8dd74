"""Sectioned key-value run configuration.

INI-style text (human-diffable) parsed into the engine's typed configs.
A canonical serialization of the fully-resolved values (defaults applied,
sections and keys sorted) is hashed to key run manifests; environment
variables are deliberately not consulted.

Profiles: ``desk`` (64x64 synthetic world, small encoder, 2000 steps) and
``paper`` (published 160x210 plan, batch 64, 8e4 steps for the temporal
modes; batch 128, lr 1e-3, weight decay 1e-6, 8x256 heads for the
two-view modes). The paper profile runs but is far outside CI budgets.
"""

import configparser
import hashlib
import io
from dataclasses import dataclass

from .autodiff.tensor import ShapeError
from .data import WorldConfig
from .models import ConvSpec, EncoderConfig, desk_encoder_config, paper_encoder_config
from .probe import ProbeConfig
from .train import MODES, TrainConfig

__all__ = ["ConfigError", "RunConfig", "DataSettings", "parse_config", "parse_config_text",
           "canonical_text", "config_hash", "default_config_text"]


class ConfigError(ValueError):
    """Malformed configuration; message names the offending field."""


@dataclass
class DataSettings:
    n_episodes: int = 20
    episode_length: int = 128
    dataset_seed: int = 1000

    def __post_init__(self):
        if self.n_episodes < 3 or self.episode_length < 2:
            raise ConfigError("[data] needs n_episodes >= 3 and episode_length >= 2")


@dataclass
class RunConfig:
    mode: str
    seed: int
    precision: str
    profile: str
    train: TrainConfig
    encoder: EncoderConfig
    world: WorldConfig
    data: DataSettings
    probe: ProbeConfig


def _parse_plan(text):
    specs = []
    for item in text.split(","):
        parts = item.strip().lower().split("x")
        if len(parts) != 3:
            raise ConfigError(
                f"[encoder] plan entry {item.strip()!r} must be kernelxstridexchannels"
            )
        try:
            specs.append(ConvSpec(int(parts[0]), int(parts[1]), int(parts[2])))
        except ValueError:
            raise ConfigError(f"[encoder] plan entry {item.strip()!r} is not numeric")
    return specs


def _plan_text(plan):
    return ",".join(f"{s.kernel}x{s.stride}x{s.out_channels}" for s in plan)


_BOOLS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(section, key, kind, raw):
    try:
        if kind is bool:
            value = _BOOLS.get(str(raw).strip().lower())
            if value is None:
                raise ValueError(raw)
            return value
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}")


# section -> key -> (type, attribute target)
_TRAIN_KEYS = {
    "batch_size": int,
    "steps": int,
    "lr": float,
    "epsilon": float,
    "weight_decay": float,
    "n_heads": int,
    "units_per_head": int,
    "hidden_units": int,
    "head_kind": str,
    "membership_temperature": float,
    "membership_init": str,
    "global_head_mode": str,
    "tau": float,
    "lambda": float,
    "normalize_mmcr": bool,
    "crop_min_scale": float,
    "flip": bool,
    "noise": float,
}
_WORLD_KEYS = {
    "height": int,
    "width": int,
    "agent_card": int,
    "ball_card": int,
    "enemy_card": int,
    "mode_card": int,
    "score_card": int,
    "border_mode": str,
    "mode_flip_prob": float,
}
_DATA_KEYS = {"n_episodes": int, "episode_length": int, "dataset_seed": int}
_PROBE_KEYS = {"lr": float, "steps": int, "batch_size": int, "eval_every": int, "patience": int}
_ENCODER_KEYS = {"input_height": int, "input_width": int, "plan": str, "local_tap_index": int}
_RUN_KEYS = {"mode": str, "seed": int, "precision": str, "profile": str}

_SECTIONS = {
    "run": _RUN_KEYS,
    "train": _TRAIN_KEYS,
    "encoder": _ENCODER_KEYS,
    "world": _WORLD_KEYS,
    "data": _DATA_KEYS,
    "probe": _PROBE_KEYS,
}


def _profile_defaults(profile, mode):
    """Fully-resolved default values per profile and mode family."""
    temporal = mode in ("dim-c", "dim-uac", "st-dim", "dim-ua")
    if profile == "desk":
        enc = desk_encoder_config()
        train = dict(
            batch_size=32, steps=2000, lr=3e-4, epsilon=0.0005, weight_decay=0.0,
            n_heads=2, units_per_head=64, hidden_units=128, head_kind="two-layer-mlp",
            membership_temperature=0.1, membership_init="random", global_head_mode="",
            tau=0.5, lam=0.005, normalize_mmcr=True,
            crop_min_scale=0.7, flip=True, noise=0.02,
        )
        world = dict(height=64, width=64)
        data = dict(n_episodes=20, episode_length=128, dataset_seed=1000)
    elif profile == "paper":
        enc = paper_encoder_config()
        if temporal:
            train = dict(
                batch_size=64, steps=80000, lr=3e-4, epsilon=0.0005, weight_decay=0.0,
                n_heads=4, units_per_head=4096, hidden_units=2048,
                head_kind="two-layer-mlp", membership_temperature=0.1,
                membership_init="random", global_head_mode="",
                tau=0.5, lam=0.005, normalize_mmcr=True,
                crop_min_scale=0.7, flip=True, noise=0.02,
            )
        else:
            train = dict(
                batch_size=128, steps=80000, lr=1e-3, epsilon=0.005, weight_decay=1e-6,
                n_heads=8, units_per_head=256, hidden_units=2048,
                head_kind="two-layer-mlp", membership_temperature=0.1,
                membership_init="random", global_head_mode="",
                tau=0.5, lam=0.005, normalize_mmcr=True,
                crop_min_scale=0.7, flip=True, noise=0.02,
            )
        world = dict(height=enc.input_height, width=enc.input_width)
        data = dict(n_episodes=40, episode_length=256, dataset_seed=1000)
    else:
        raise ConfigError(f"[run] profile must be desk|paper, got {profile!r}")
    return enc, train, world, data


def parse_config_text(text, source="<config>"):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}")

    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown field {key!r} in section [{section}]")

    if not parser.has_option("run", "mode"):
        raise ConfigError("missing required field 'mode' in section [run]")
    mode = parser.get("run", "mode").strip()
    if mode not in MODES:
        raise ConfigError(f"[run] mode must be one of {MODES}, got {mode!r}")
    seed = _coerce("run", "seed", int, parser.get("run", "seed", fallback="0"))
    precision = parser.get("run", "precision", fallback="float32").strip()
    if precision not in ("float32", "float64"):
        raise ConfigError(f"[run] precision must be float32|float64, got {precision!r}")
    profile = parser.get("run", "profile", fallback="desk").strip()

    enc_default, train_d, world_d, data_d = _profile_defaults(profile, mode)

    def section_values(name, keys, defaults):
        values = dict(defaults)
        if parser.has_section(name):
            for key, kind in keys.items():
                if parser.has_option(name, key):
                    target = "lam" if key == "lambda" else key
                    values[target] = _coerce(name, key, kind, parser.get(name, key))
        return values

    train_v = section_values("train", _TRAIN_KEYS, train_d)
    world_v = section_values("world", _WORLD_KEYS, world_d)
    data_v = section_values("data", _DATA_KEYS, data_d)
    probe_v = section_values("probe", _PROBE_KEYS, {})

    enc_v = {
        "input_height": enc_default.input_height,
        "input_width": enc_default.input_width,
        "plan": _plan_text(enc_default.plan),
        "local_tap_index": enc_default.local_tap_index,
    }
    if parser.has_section("encoder"):
        for key, kind in _ENCODER_KEYS.items():
            if parser.has_option("encoder", key):
                enc_v[key] = _coerce("encoder", key, kind, parser.get("encoder", key))

    try:
        train_cfg = TrainConfig(mode=mode, seed=seed, precision=precision, **train_v)
        encoder_cfg = EncoderConfig(
            input_height=enc_v["input_height"],
            input_width=enc_v["input_width"],
            plan=_parse_plan(enc_v["plan"]) if isinstance(enc_v["plan"], str) else enc_v["plan"],
            local_tap_index=enc_v["local_tap_index"],
        )
        world_cfg = WorldConfig(**world_v)
        data_cfg = DataSettings(**data_v)
        probe_cfg = ProbeConfig(seed=seed, **probe_v)
    except (ShapeError, ConfigError) as exc:
        raise ConfigError(str(exc))

    if (world_cfg.height, world_cfg.width) != (encoder_cfg.input_height, encoder_cfg.input_width):
        raise ConfigError(
            f"[world] canvas {world_cfg.height}x{world_cfg.width} does not match "
            f"[encoder] input {encoder_cfg.input_height}x{encoder_cfg.input_width}"
        )
    return RunConfig(
        mode=mode, seed=seed, precision=precision, profile=profile,
        train=train_cfg, encoder=encoder_cfg, world=world_cfg,
        data=data_cfg, probe=probe_cfg,
    )


def parse_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    return parse_config_text(text, source=str(path))


def canonical_text(cfg):
    """Fully-resolved, sorted, round-trippable rendering of a RunConfig."""
    sections = {
        "run": {
            "mode": cfg.mode,
            "seed": cfg.seed,
            "precision": cfg.precision,
            "profile": cfg.profile,
        },
        "train": {
            "batch_size": cfg.train.batch_size,
            "steps": cfg.train.steps,
            "lr": repr(cfg.train.lr),
            "epsilon": repr(cfg.train.epsilon),
            "weight_decay": repr(cfg.train.weight_decay),
            "n_heads": cfg.train.n_heads,
            "units_per_head": cfg.train.units_per_head,
            "hidden_units": cfg.train.hidden_units,
            "head_kind": cfg.train.head_kind,
            "membership_temperature": repr(cfg.train.membership_temperature),
            "membership_init": cfg.train.membership_init,
            "global_head_mode": cfg.train.global_head_mode,
            "tau": repr(cfg.train.tau),
            "lambda": repr(cfg.train.lam),
            "normalize_mmcr": cfg.train.normalize_mmcr,
            "crop_min_scale": repr(cfg.train.crop_min_scale),
            "flip": cfg.train.flip,
            "noise": repr(cfg.train.noise),
        },
        "encoder": {
            "input_height": cfg.encoder.input_height,
            "input_width": cfg.encoder.input_width,
            "plan": _plan_text(cfg.encoder.plan),
            "local_tap_index": cfg.encoder.local_tap_index,
        },
        "world": {
            "height": cfg.world.height,
            "width": cfg.world.width,
            "agent_card": cfg.world.agent_card,
            "ball_card": cfg.world.ball_card,
            "enemy_card": cfg.world.enemy_card,
            "mode_card": cfg.world.mode_card,
            "score_card": cfg.world.score_card,
            "border_mode": cfg.world.border_mode,
            "mode_flip_prob": repr(cfg.world.mode_flip_prob),
        },
        "data": {
            "n_episodes": cfg.data.n_episodes,
            "episode_length": cfg.data.episode_length,
            "dataset_seed": cfg.data.dataset_seed,
        },
        "probe": {
            "lr": repr(cfg.probe.lr),
            "steps": cfg.probe.steps,
            "batch_size": cfg.probe.batch_size,
            "eval_every": cfg.probe.eval_every,
            "patience": cfg.probe.patience,
        },
    }
    out = io.StringIO()
    for section in sorted(sections):
        out.write(f"[{section}]\n")
        for key in sorted(sections[section]):
            out.write(f"{key} = {sections[section][key]}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(cfg):
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()


def default_config_text(mode="dim-c", seed=0, profile="desk"):
    return f"[run]\nmode = {mode}\nseed = {seed}\nprofile = {profile}\n"


def with_overrides(cfg, seed=None, precision=None, **train_updates):
    """Re-derive a RunConfig with a new seed/precision/train fields."""
    from dataclasses import replace

    new_seed = cfg.seed if seed is None else int(seed)
    new_precision = cfg.precision if precision is None else precision
    if new_precision not in ("float32", "float64"):
        raise ConfigError(f"precision must be float32|float64, got {new_precision!r}")
    train = replace(
        cfg.train, seed=new_seed, precision=new_precision, **train_updates
    )
    probe = replace(cfg.probe, seed=new_seed)
    return RunConfig(
        mode=cfg.mode,
        seed=new_seed,
        precision=new_precision,
        profile=cfg.profile,
        train=train,
        encoder=cfg.encoder,
        world=cfg.world,
        data=cfg.data,
        probe=probe,
    )
