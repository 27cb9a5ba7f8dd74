"""Chart-based manifold encoding heads.

Each chart is an output head mapping the encoder latent to a D-dimensional
embedding; an optional membership network assigns a per-sample probability
distribution over the charts. At inference the backbone latent is kept
as-is, or the argmax-membership chart embedding is selected.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import ops
from .autodiff.ops import BatchNormState
from .autodiff.tensor import ShapeError, Tensor
from .models import orthogonal_init

__all__ = [
    "AtlasConfig",
    "AtlasOutput",
    "init_atlas_params",
    "atlas_forward",
    "select_chart",
    "inference_features",
]

HEAD_KINDS = ("two-layer-mlp", "single-linear")
MEMBERSHIP_INITS = ("random", "zero")


@dataclass
class AtlasConfig:
    """Head bank layout.

    membership_temperature is the softmax temperature of the membership
    network (the only role the temperature plays in this engine);
    membership_init="zero" starts the membership exactly uniform.
    """

    n_heads: int = 2
    units_per_head: int = 64
    hidden_units: int = 128
    head_kind: str = "two-layer-mlp"
    membership_enabled: bool = False
    membership_temperature: float = 0.1
    membership_init: str = "random"

    def __post_init__(self):
        if self.n_heads < 1 or self.units_per_head < 1 or self.hidden_units < 1:
            raise ShapeError("atlas extents must be positive")
        if self.head_kind not in HEAD_KINDS:
            raise ShapeError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if self.membership_temperature <= 0:
            raise ShapeError("membership_temperature must be positive")
        if self.membership_init not in MEMBERSHIP_INITS:
            raise ShapeError(f"membership_init must be one of {MEMBERSHIP_INITS}")


@dataclass
class AtlasOutput:
    """Per-sample chart embeddings (B, N, D) and optional memberships (B, N)."""

    charts: Tensor
    membership: Optional[Tensor] = None

    def validate(self):
        if self.charts.ndim != 3 or self.charts.shape[1] < 1 or self.charts.shape[2] < 1:
            raise ShapeError(f"charts must be (B, N>=1, D>=1), got {self.charts.shape}")
        if self.membership is not None:
            rows = self.membership.data
            if rows.shape != self.charts.shape[:2]:
                raise ShapeError(
                    f"membership shape {rows.shape} does not match charts {self.charts.shape}"
                )
            if np.any(rows < -1e-7) or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-5):
                raise ShapeError("membership rows are not probability distributions")
        return self


def init_atlas_params(config, latent_dim, rng, dtype=np.float32):
    """Orthogonal weights / zero biases for heads (and membership if enabled).

    Returns (params, bn_states); two-layer heads carry a batchnorm site
    between the layers.
    """
    params = {}
    bn_states = {}
    for i in range(config.n_heads):
        if config.head_kind == "two-layer-mlp":
            params[f"atlas.head{i}.w1"] = orthogonal_init(
                rng, (latent_dim, config.hidden_units)
            ).astype(dtype)
            params[f"atlas.head{i}.b1"] = np.zeros(config.hidden_units, dtype=dtype)
            params[f"atlas.head{i}.gamma"] = np.ones(config.hidden_units, dtype=dtype)
            params[f"atlas.head{i}.beta"] = np.zeros(config.hidden_units, dtype=dtype)
            params[f"atlas.head{i}.w2"] = orthogonal_init(
                rng, (config.hidden_units, config.units_per_head)
            ).astype(dtype)
            params[f"atlas.head{i}.b2"] = np.zeros(config.units_per_head, dtype=dtype)
            bn_states[f"atlas.head{i}.bn"] = BatchNormState(config.hidden_units, dtype=dtype)
        else:
            params[f"atlas.head{i}.w"] = orthogonal_init(
                rng, (latent_dim, config.units_per_head)
            ).astype(dtype)
            params[f"atlas.head{i}.b"] = np.zeros(config.units_per_head, dtype=dtype)
    if config.membership_enabled:
        if config.membership_init == "zero":
            wm = np.zeros((latent_dim, config.n_heads), dtype=dtype)
        else:
            wm = orthogonal_init(rng, (latent_dim, config.n_heads)).astype(dtype)
        params["atlas.membership.w"] = wm
        params["atlas.membership.b"] = np.zeros(config.n_heads, dtype=dtype)
    return params, bn_states


def atlas_forward(tape, params, bn_states, z, config, training=True):
    """Run every chart head (and the membership net) on the latent batch."""
    if z.ndim != 2:
        raise ShapeError(f"atlas_forward: latent must be (B, Z), got {z.shape}")
    b = z.shape[0]
    charts = []
    for i in range(config.n_heads):
        if config.head_kind == "two-layer-mlp":
            hid = ops.add(ops.matmul(z, params[f"atlas.head{i}.w1"]), params[f"atlas.head{i}.b1"])
            hid = ops.batchnorm(
                hid,
                params[f"atlas.head{i}.gamma"],
                params[f"atlas.head{i}.beta"],
                bn_states[f"atlas.head{i}.bn"],
                training=training,
            )
            hid = ops.relu(hid)
            out = ops.add(ops.matmul(hid, params[f"atlas.head{i}.w2"]), params[f"atlas.head{i}.b2"])
        else:
            out = ops.add(ops.matmul(z, params[f"atlas.head{i}.w"]), params[f"atlas.head{i}.b"])
        charts.append(ops.reshape(out, (b, 1, config.units_per_head)))
    stacked = charts[0] if len(charts) == 1 else ops.concat(charts, axis=1)

    membership = None
    if config.membership_enabled:
        logits = ops.add(ops.matmul(z, params["atlas.membership.w"]), params["atlas.membership.b"])
        membership = ops.softmax(logits, temperature=config.membership_temperature)
    return AtlasOutput(stacked, membership).validate()


def select_chart(membership_row):
    """Argmax chart index with ties broken toward the lowest index."""
    row = np.asarray(membership_row, dtype=np.float64)
    if row.ndim != 1 or row.size == 0:
        raise ShapeError(f"select_chart: expects a non-empty row, got shape {row.shape}")
    if np.any(row < -1e-7) or abs(row.sum() - 1.0) > 1e-5:
        raise ShapeError("select_chart: row is not a probability vector")
    return int(np.argmax(row))


def inference_features(atlas_output, mode, latent=None):
    """Frozen features for probing.

    ``backbone-only`` returns the encoder latent unchanged (independent of
    every head parameter); ``argmax-head`` returns each sample's
    maximal-membership chart embedding.
    """
    if mode == "backbone-only":
        if latent is None:
            raise ShapeError("inference_features: backbone-only requires the latent")
        return np.array(latent.data if isinstance(latent, Tensor) else latent, copy=True)
    if mode == "argmax-head":
        if atlas_output.membership is None:
            raise ShapeError("inference_features: argmax-head requires membership")
        charts = atlas_output.charts.data
        rows = atlas_output.membership.data
        idx = rows.argmax(axis=1)
        return charts[np.arange(charts.shape[0]), idx].copy()
    raise ShapeError(f"inference_features: unknown mode {mode!r}")
