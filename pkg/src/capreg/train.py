"""Pretraining loops.

Four objective families over one shared parameter stack:

- temporal, per-head global scoring with optional capacity term ("dim-c";
  "st-dim" is the same loop with the capacity term absent),
- temporal with chart memberships, head-mean global scoring, the negative
  membership-discrepancy term, and optional capacity term ("dim-uac";
  "dim-ua" drops the capacity term),
- two-view chart-pairwise NT-Xent or Barlow Twins with optional capacity
  term ("simclr-c"/"bt-c"; "simclr"/"bt" drop it).

The capacity (negative nuclear norm) term is always computed from the
first view/frame only, so its gradient never flows through the second
view. Every step logs the weighted components; the logged total equals
their sum.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .atlas import AtlasConfig, atlas_forward, init_atlas_params
from .autodiff import AdamState, adam_step, ops
from .autodiff.tensor import NumericError, ShapeError, Tape
from .losses import (
    LossWeights,
    barlow_twins,
    composite_loss,
    global_local_loss,
    local_local_loss,
    mmcr_loss,
    nt_xent,
    pairwise_head_loss,
    ua_discrepancy,
)
from .models import Critic, encoder_forward, init_critic_params, init_encoder_params

__all__ = [
    "MODES",
    "TrainConfig",
    "PretrainResult",
    "build_model",
    "pretrain",
    "write_trace",
    "TRACE_COLUMNS",
    "feature_mode_for",
    "composite_checks",
]

MODES = ("dim-c", "dim-uac", "st-dim", "dim-ua", "simclr-c", "bt-c", "simclr", "bt")
_TEMPORAL = ("dim-c", "dim-uac", "st-dim", "dim-ua")
_MEMBERSHIP = ("dim-uac", "dim-ua")
_CAPACITY = ("dim-c", "dim-uac", "simclr-c", "bt-c")
_BASE = {
    "dim-c": "dim-c",
    "st-dim": "dim-c",
    "dim-uac": "dim-uac",
    "dim-ua": "dim-uac",
    "simclr-c": "simclr-c",
    "simclr": "simclr-c",
    "bt-c": "bt-c",
    "bt": "bt-c",
}

TRACE_COLUMNS = ("step", "loss_total", "loss_global", "loss_local", "loss_ua", "loss_mmcr")


@dataclass
class TrainConfig:
    """Pretraining hyper-parameters (desk-scale defaults)."""

    mode: str = "dim-c"
    batch_size: int = 32
    steps: int = 2000
    lr: float = 3e-4
    epsilon: float = 0.0005
    weight_decay: float = 0.0
    n_heads: int = 2
    units_per_head: int = 64
    hidden_units: int = 128
    head_kind: str = "two-layer-mlp"
    membership_temperature: float = 0.1
    membership_init: str = "random"
    global_head_mode: str = ""  # per-mode default; "membership-mean" opts in
    tau: float = 0.5
    lam: float = 0.005
    normalize_mmcr: bool = True
    seed: int = 0
    precision: str = "float32"
    crop_min_scale: float = 0.7
    flip: bool = True
    noise: float = 0.02

    def __post_init__(self):
        if self.mode not in MODES:
            raise ShapeError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ShapeError("batch_size must be >= 1 and steps >= 0")
        if self.epsilon < 0:
            raise ShapeError("epsilon must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ShapeError(f"precision must be float32|float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @property
    def is_temporal(self):
        return self.mode in _TEMPORAL

    @property
    def uses_membership(self):
        return self.mode in _MEMBERSHIP

    @property
    def uses_capacity(self):
        return self.mode in _CAPACITY and self.epsilon > 0

    @property
    def base_mode(self):
        return _BASE[self.mode]

    def head_mode(self):
        if self.global_head_mode:
            return self.global_head_mode
        return "head-mean" if self.uses_membership else "per-head"

    def augment_config(self):
        return data_mod.AugmentConfig(
            crop_min_scale=self.crop_min_scale, flip=self.flip, noise=self.noise
        )


@dataclass
class PretrainResult:
    params: dict
    bn_states: dict
    atlas_config: AtlasConfig
    trace: list = field(default_factory=list)


def build_model(cfg, enc_cfg):
    """Initialize all parameters for a mode: encoder, chart heads, optional
    membership net, and (temporal modes) the two critics."""
    rng = np.random.default_rng([cfg.seed, 7771])
    dtype = cfg.dtype
    params = init_encoder_params(enc_cfg, rng, dtype)
    atlas_cfg = AtlasConfig(
        n_heads=cfg.n_heads,
        units_per_head=cfg.units_per_head,
        hidden_units=cfg.hidden_units,
        head_kind=cfg.head_kind,
        membership_enabled=cfg.uses_membership,
        membership_temperature=cfg.membership_temperature,
        membership_init=cfg.membership_init,
    )
    ap, bn_states = init_atlas_params(atlas_cfg, enc_cfg.latent_dim, rng, dtype)
    params.update(ap)
    if cfg.is_temporal:
        c = enc_cfg.local_channels
        params.update(init_critic_params("critic1", cfg.units_per_head, c, rng, dtype))
        params.update(init_critic_params("critic2", c, c, rng, dtype))
    return params, bn_states, atlas_cfg


def membership_forward(tape, params, z, atlas_cfg):
    logits = ops.add(ops.matmul(z, params["atlas.membership.w"]), params["atlas.membership.b"])
    return ops.softmax(logits, temperature=atlas_cfg.membership_temperature)


def _step_losses(cfg, enc_cfg, atlas_cfg, tape, pt, bn_states, batch):
    """Build the mode's loss parts on one tape; returns (parts, weights)."""
    weights = LossWeights(epsilon=cfg.epsilon, tau=cfg.tau, lam=cfg.lam)
    parts = {}
    if cfg.is_temporal:
        x_t = tape.constant(batch.x_t)
        x_next = tape.constant(batch.x_next)
        z_t, y_t = encoder_forward(tape, pt, x_t, enc_cfg)
        z_next, y_next = encoder_forward(tape, pt, x_next, enc_cfg)
        out_t = atlas_forward(tape, pt, bn_states, z_t, atlas_cfg, training=True)
        c1 = Critic(pt["critic1.w"], pt["critic1.b"])
        c2 = Critic(pt["critic2.w"], pt["critic2.b"])
        parts["global"] = global_local_loss(
            out_t.charts,
            y_next,
            c1,
            head_mode=cfg.head_mode(),
            membership=out_t.membership,
        )
        parts["local"] = local_local_loss(y_t, y_next, c2)
        if cfg.uses_membership:
            parts["ua_t"] = ua_discrepancy(out_t.membership)
            parts["ua_next"] = ua_discrepancy(
                membership_forward(tape, pt, z_next, atlas_cfg)
            )
        if cfg.uses_capacity:
            parts["mmcr"] = mmcr_loss(out_t.charts, normalize=cfg.normalize_mmcr)
    else:
        va, vb = batch
        xa = tape.constant(va)
        xb = tape.constant(vb)
        z_a, _ = encoder_forward(tape, pt, xa, enc_cfg)
        z_b, _ = encoder_forward(tape, pt, xb, enc_cfg)
        out_a = atlas_forward(tape, pt, bn_states, z_a, atlas_cfg, training=True)
        out_b = atlas_forward(tape, pt, bn_states, z_b, atlas_cfg, training=True)
        if cfg.base_mode == "simclr-c":
            custom = lambda x, y: nt_xent(x, y, tau=cfg.tau)
        else:
            custom = lambda x, y: barlow_twins(x, y, lam=cfg.lam)
        parts["pairwise"] = pairwise_head_loss(out_a.charts, out_b.charts, custom)
        if cfg.uses_capacity:
            parts["mmcr"] = mmcr_loss(out_a.charts, normalize=cfg.normalize_mmcr)
    return parts, weights


def pretrain(cfg, enc_cfg, episodes, step_callback=None):
    """Run the configured pretraining loop over a dataset of episodes.

    Returns a PretrainResult whose trace rows follow TRACE_COLUMNS. A
    non-finite loss aborts with the step index and component breakdown.
    """
    params, bn_states, atlas_cfg = build_model(cfg, enc_cfg)
    adam = AdamState(params)
    trace = []
    pool = None
    if not cfg.is_temporal:
        pool = np.concatenate([ep.frames for ep in episodes], axis=0)

    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, 4021, step])
        if cfg.is_temporal:
            batch = data_mod.sample_batch(episodes, cfg.batch_size, rng)
        else:
            batch = data_mod.two_view_batch(
                pool, cfg.batch_size, rng, cfg.augment_config()
            )
        tape = Tape(cfg.dtype)
        pt = {k: tape.tensor(v, requires_grad=True) for k, v in params.items()}
        parts, weights = _step_losses(cfg, enc_cfg, atlas_cfg, tape, pt, bn_states, batch)
        total, logged = composite_loss(cfg.base_mode, parts, weights)
        total_val = logged["total"]
        if not np.isfinite(total_val):
            raise NumericError(
                f"non-finite loss at step {step}: total={total_val}, components={logged}"
            )
        tape.backward(total)
        grads = {k: t.grad for k, t in pt.items() if t.grad is not None}
        try:
            adam_step(params, grads, adam, lr=cfg.lr, weight_decay=cfg.weight_decay)
        except NumericError as exc:
            raise NumericError(f"step {step}: {exc} (components={logged})")
        row = (
            step,
            total_val,
            logged["global"],
            logged["local"],
            logged["ua"],
            logged["mmcr"],
        )
        trace.append(row)
        if step_callback is not None:
            step_callback(step, row)
    return PretrainResult(params, bn_states, atlas_cfg, trace)


def write_trace(path, trace):
    """Loss-trace CSV: full-precision floats, byte-stable across reruns."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def read_trace(path):
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TRACE_COLUMNS:
            raise ShapeError(f"unexpected trace header {header}")
        return [
            (int(r[0]),) + tuple(float(v) for v in r[1:]) for r in reader
        ]


def feature_mode_for(mode):
    """Probing rule: membership modes keep the argmax chart, everything
    else keeps the backbone latent."""
    return "argmax-head" if mode in _MEMBERSHIP else "backbone-only"


def composite_checks():
    """Gradcheck samplers for the four composite objectives on a nano model."""
    from .autodiff.gradcheck import tape_fn
    from .models import ConvSpec, EncoderConfig

    enc_cfg = EncoderConfig(
        input_height=12,
        input_width=10,
        plan=[ConvSpec(5, 2, 3), ConvSpec(3, 1, 4)],
        local_tap_index=1,
    )

    def make_for(mode):
        cfg = TrainConfig(
            mode=mode,
            batch_size=3,
            steps=0,
            n_heads=2,
            units_per_head=3,
            hidden_units=4,
            epsilon=0.0005,
            seed=0,
            precision="float64",
        )

        def sample(rng):
            params, _, atlas_cfg = build_model(cfg, enc_cfg)
            names = sorted(params)
            arrays = [params[k] + 0.05 * rng.standard_normal(params[k].shape) for k in names]
            if cfg.is_temporal:
                frames = rng.random((3, 1, 12, 10))
                frames2 = rng.random((3, 1, 12, 10))
                batch = data_mod.FramePair(frames, frames2, np.arange(3), np.arange(3))
            else:
                batch = (rng.random((3, 1, 12, 10)), rng.random((3, 1, 12, 10)))

            def build(tape, tensors):
                pt = dict(zip(names, tensors))
                bn = {
                    k: ops.BatchNormState(cfg.hidden_units, dtype=np.float64)
                    for k in (f"atlas.head{i}.bn" for i in range(cfg.n_heads))
                }
                parts, weights = _step_losses(cfg, enc_cfg, atlas_cfg, tape, pt, bn, batch)
                total, _ = composite_loss(cfg.base_mode, parts, weights)
                return total

            return tape_fn(build), arrays

        # smaller step keeps central differences off relu kinks; the
        # analytic/numeric gap shrinks ~linearly with it (no gradient bug)
        sample.fd_step = 1e-6
        return sample

    return {f"composite/{mode}": make_for(mode) for mode in ("dim-c", "dim-uac", "simclr-c", "bt-c")}
