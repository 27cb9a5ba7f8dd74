"""Convolutional encoder backbone, bilinear-score critics, checkpoints.

The encoder is a stack of valid (unpadded) convolutions with ReLU; one
activation is tapped as the local feature map (channel-last) and the final
activation is flattened into the latent vector. Critics are the linear
projections whose inner products score feature pairs.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ShapeError
from .container import ContainerError, read_container, write_container

__all__ = [
    "ConvSpec",
    "EncoderConfig",
    "desk_encoder_config",
    "paper_encoder_config",
    "orthogonal_init",
    "init_encoder_params",
    "encoder_forward",
    "encoder_param_count",
    "Critic",
    "init_critic_params",
    "score_pairs",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or version-incompatible checkpoint."""


@dataclass
class ConvSpec:
    kernel: int
    stride: int
    out_channels: int


@dataclass
class EncoderConfig:
    """Conv plan plus the index of the activation tapped as the local map.

    Frames are single-channel with pixel values scaled to [0, 1].
    """

    input_height: int
    input_width: int
    plan: list = field(default_factory=list)
    local_tap_index: int = 2
    in_channels: int = 1

    def __post_init__(self):
        if not self.plan:
            raise ShapeError("encoder plan is empty")
        if not (0 <= self.local_tap_index < len(self.plan)):
            raise ShapeError(
                f"local_tap_index {self.local_tap_index} outside plan of {len(self.plan)} layers"
            )
        self.layer_extents()

    def layer_extents(self):
        """Spatial extent after each conv layer; raises naming the failing layer."""
        h, w = self.input_height, self.input_width
        extents = []
        for i, spec in enumerate(self.plan):
            h = ops.conv_output_extent(h, spec.kernel, spec.stride)
            w = ops.conv_output_extent(w, spec.kernel, spec.stride)
            if h < 1 or w < 1:
                raise ShapeError(
                    f"encoder layer {i} (kernel {spec.kernel}, stride {spec.stride}) "
                    f"produces empty output {h}x{w} for input "
                    f"{self.input_height}x{self.input_width}"
                )
            extents.append((h, w))
        return extents

    @property
    def latent_dim(self):
        h, w = self.layer_extents()[-1]
        return h * w * self.plan[-1].out_channels

    @property
    def local_channels(self):
        return self.plan[self.local_tap_index].out_channels

    @property
    def local_extent(self):
        return self.layer_extents()[self.local_tap_index]


def desk_encoder_config(height=64, width=64):
    """Small plan for the 64x64 synthetic world (same 4-layer, tap-at-third
    structure as the paper profile, which does not fit 64x64 inputs)."""
    return EncoderConfig(
        input_height=height,
        input_width=width,
        plan=[ConvSpec(8, 4, 16), ConvSpec(4, 2, 32), ConvSpec(3, 1, 64), ConvSpec(3, 1, 32)],
        local_tap_index=2,
    )


def paper_encoder_config():
    """The published 160x210 plan: 8/4/32, 4/2/64, 4/2/128, 3/1/64."""
    return EncoderConfig(
        input_height=160,
        input_width=210,
        plan=[ConvSpec(8, 4, 32), ConvSpec(4, 2, 64), ConvSpec(4, 2, 128), ConvSpec(3, 1, 64)],
        local_tap_index=2,
    )


def orthogonal_init(rng, shape, gain=1.0):
    """Orthogonal initialization for a 2-D fan-out x fan-in matrix."""
    rows, cols = shape
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_encoder_params(config, rng, dtype=np.float32):
    """Orthogonal conv weights, zero biases, named enc.convN.{w,b}."""
    params = {}
    cin = config.in_channels
    for i, spec in enumerate(config.plan):
        fan_in = cin * spec.kernel * spec.kernel
        w = orthogonal_init(rng, (spec.out_channels, fan_in)).reshape(
            spec.out_channels, cin, spec.kernel, spec.kernel
        )
        params[f"enc.conv{i}.w"] = w.astype(dtype)
        params[f"enc.conv{i}.b"] = np.zeros(spec.out_channels, dtype=dtype)
        cin = spec.out_channels
    return params


def encoder_forward(tape, params, x, config):
    """Run the conv stack; returns (latent (B, Z), local map (B, H, W, C)).

    ``params`` maps names to tensors already on ``tape``.
    """
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise ShapeError(
            f"encoder_forward: expects (B, {config.in_channels}, H, W), got {x.shape}"
        )
    if (x.shape[2], x.shape[3]) != (config.input_height, config.input_width):
        raise ShapeError(
            f"encoder_forward: input {x.shape[2]}x{x.shape[3]} does not match "
            f"configured {config.input_height}x{config.input_width}"
        )
    act = x
    local = None
    for i in range(len(config.plan)):
        spec = config.plan[i]
        act = ops.relu(
            ops.conv2d(
                act,
                params[f"enc.conv{i}.w"],
                params[f"enc.conv{i}.b"],
                stride=(spec.stride, spec.stride),
            )
        )
        if i == config.local_tap_index:
            local = ops.transpose(act, (0, 2, 3, 1))
    z = ops.reshape(act, (x.shape[0], config.latent_dim))
    return z, local


def encoder_param_count(config):
    count = 0
    cin = config.in_channels
    for spec in config.plan:
        count += spec.out_channels * (cin * spec.kernel * spec.kernel + 1)
        cin = spec.out_channels
    return count


@dataclass
class Critic:
    """Linear projection into the local channel space; scored via inner
    products (the factored form of a bilinear score)."""

    weight: object
    bias: object

    def __call__(self, t):
        return ops.add(ops.matmul(t, self.weight), self.bias)


def init_critic_params(name, in_dim, out_dim, rng, dtype=np.float32):
    return {
        f"{name}.w": orthogonal_init(rng, (in_dim, out_dim)).astype(dtype),
        f"{name}.b": np.zeros(out_dim, dtype=dtype),
    }


def score_pairs(queries, keys):
    """scores[i][j] = <query_i, key_j> over a batch."""
    if queries.ndim != 2 or keys.ndim != 2 or queries.shape[1] != keys.shape[1]:
        raise ShapeError(
            f"score_pairs: incompatible shapes {queries.shape} and {keys.shape}"
        )
    return ops.matmul(queries, ops.transpose(keys))


def save_checkpoint(path, params, bn_states, meta):
    """Write parameters + batchnorm running stats with a versioned header."""
    arrays = {f"param/{k}": v for k, v in params.items()}
    for site, state in bn_states.items():
        for stat, arr in state.arrays().items():
            arrays[f"bnstate/{site}/{stat}"] = arr
    full_meta = dict(meta)
    full_meta["checkpoint_version"] = CHECKPOINT_VERSION
    write_container(path, arrays, full_meta)


def load_checkpoint(path):
    """Read a checkpoint; returns (params, bn_state_arrays, meta).

    bn_state_arrays maps site -> {"running_mean": ..., "running_var": ...}.
    """
    from .autodiff.ops import BatchNormState

    try:
        arrays, meta = read_container(path)
    except (ContainerError, OSError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}")
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {meta.get('checkpoint_version')!r} "
            f"incompatible with {CHECKPOINT_VERSION}"
        )
    params = {}
    sites = {}
    for name, arr in arrays.items():
        if name.startswith("param/"):
            params[name[len("param/") :]] = arr
        elif name.startswith("bnstate/"):
            _, site, stat = name.split("/", 2)
            sites.setdefault(site, {})[stat] = arr
        else:
            raise CheckpointError(f"unexpected entry {name!r} in {path}")
    bn_states = {}
    for site, stats in sites.items():
        state = BatchNormState(stats["running_mean"].shape[0], dtype=stats["running_mean"].dtype)
        state.running_mean[...] = stats["running_mean"]
        state.running_var[...] = stats["running_var"]
        bn_states[site] = state
    return params, bn_states, meta
