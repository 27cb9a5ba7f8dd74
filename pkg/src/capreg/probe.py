"""Linear-probe evaluation protocol.

Features are extracted once from the frozen encoder (backbone latent, or
the argmax-membership chart embedding for membership modes), then one
multinomial logistic regression per factor is trained with Adam and early
stopping on validation accuracy. Scores are macro-F1 and accuracy per
factor, averaged within each factor category, then averaged across
categories for the headline numbers.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .atlas import atlas_forward, inference_features
from .autodiff import AdamState, adam_step, ops
from .autodiff.tensor import ShapeError, Tape
from .models import encoder_forward

__all__ = [
    "ProbeConfig",
    "ProbeReport",
    "split_episodes",
    "extract_features",
    "param_fingerprint",
    "train_linear_probe",
    "predict",
    "macro_f1",
    "accuracy",
    "evaluate",
    "probe_checkpoint",
    "write_report",
    "read_report",
    "REPORT_SCHEMA",
]


@dataclass
class ProbeConfig:
    """Probe optimizer schedule (a declared engine decision)."""

    lr: float = 1e-3
    steps: int = 1000
    batch_size: int = 256
    eval_every: int = 50
    patience: int = 5
    seed: int = 0


def split_episodes(episodes, fractions=(0.7, 0.1, 0.2)):
    """Disjoint train/val/test episode splits, ordered by episode seed."""
    if len(episodes) < 3:
        raise ShapeError(f"need >= 3 episodes to split, got {len(episodes)}")
    ordered = sorted(episodes, key=lambda ep: ep.seed)
    n = len(ordered)
    n_train = max(1, round(fractions[0] * n))
    n_val = max(1, round(fractions[1] * n))
    n_train = min(n_train, n - 2)
    train = ordered[:n_train]
    val = ordered[n_train : n_train + n_val]
    test = ordered[n_train + n_val :]
    return train, val, test


def param_fingerprint(params):
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(params[name]).tobytes())
    return digest.hexdigest()


def extract_features(params, bn_states, enc_cfg, atlas_cfg, frames, feature_mode, batch_size=256):
    """Eval-mode forward over frames; returns a (M, F) float32 array."""
    outs = []
    for start in range(0, frames.shape[0], batch_size):
        chunk = frames[start : start + batch_size]
        tape = Tape(np.float32)
        pt = {k: tape.tensor(v) for k, v in params.items()}
        x = tape.constant(chunk)
        z, _ = encoder_forward(tape, pt, x, enc_cfg)
        if feature_mode == "argmax-head":
            out = atlas_forward(tape, pt, bn_states, z, atlas_cfg, training=False)
            outs.append(inference_features(out, "argmax-head"))
        else:
            outs.append(inference_features(None, "backbone-only", latent=z))
    return np.concatenate(outs, axis=0)


def train_linear_probe(train_x, train_y, val_x, val_y, n_classes, cfg):
    """Multinomial logistic regression on frozen features.

    Early-stops when validation accuracy has not improved for
    ``cfg.patience`` evaluations; returns the best-validation weights.
    """
    classes = np.unique(train_y)
    if classes.size < 2:
        raise ShapeError(f"probe needs >= 2 classes in training labels, got {classes.size}")
    n, f = train_x.shape
    rng = np.random.default_rng([cfg.seed, 551])
    params = {"w": np.zeros((f, n_classes)), "b": np.zeros(n_classes)}
    state = AdamState(params)
    best = (-1.0, None, None)
    stale = 0
    xs = train_x.astype(np.float64)
    for step in range(cfg.steps):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        tape = Tape(np.float64)
        wt = tape.tensor(params["w"], requires_grad=True)
        bt = tape.tensor(params["b"], requires_grad=True)
        logits = ops.add(ops.matmul(tape.constant(xs[idx]), wt), bt)
        loss = ops.softmax_cross_entropy(logits, train_y[idx])
        tape.backward(loss)
        adam_step(params, {"w": wt.grad, "b": bt.grad}, state, lr=cfg.lr)
        if (step + 1) % cfg.eval_every == 0:
            acc = accuracy(val_y, predict(params["w"], params["b"], val_x))
            if acc > best[0]:
                best = (acc, params["w"].copy(), params["b"].copy())
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if best[1] is None:
        best = (0.0, params["w"].copy(), params["b"].copy())
    return best[1], best[2]


def predict(w, b, x):
    return np.argmax(x.astype(np.float64) @ w + b, axis=1)


def accuracy(true, pred):
    return float(np.mean(np.asarray(true) == np.asarray(pred)))


def macro_f1(true, pred):
    """Unweighted mean F1 over the classes present in truth or predictions."""
    true = np.asarray(true)
    pred = np.asarray(pred)
    scores = []
    for c in np.union1d(np.unique(true), np.unique(pred)):
        tp = int(np.sum((pred == c) & (true == c)))
        fp = int(np.sum((pred == c) & (true != c)))
        fn = int(np.sum((pred != c) & (true == c)))
        denom = 2 * tp + fp + fn
        scores.append(2.0 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


@dataclass
class ProbeReport:
    """Per-factor scores, per-category averages, category-mean headline."""

    factors: dict
    categories: dict
    mean_f1: float
    mean_accuracy: float
    missing_categories: list = field(default_factory=list)
    seed: int = 0
    config_hash: str = ""
    feature_mode: str = ""

    def to_dict(self):
        return {
            "report_version": 1,
            "factors": self.factors,
            "categories": self.categories,
            "mean_f1": self.mean_f1,
            "mean_accuracy": self.mean_accuracy,
            "missing_categories": self.missing_categories,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "feature_mode": self.feature_mode,
        }


def evaluate(predictions, labels, factors, seed=0, config_hash="", feature_mode=""):
    """Score per-factor predictions and aggregate per category.

    Categories with no factors are excluded from the headline means and
    flagged in ``missing_categories``.
    """
    from .data import CATEGORIES

    factor_scores = {}
    for factor in factors:
        if factor.name not in predictions:
            raise ShapeError(f"evaluate: missing predictions for factor {factor.name!r}")
        pred = predictions[factor.name]
        true = labels[factor.name]
        factor_scores[factor.name] = {
            "category": factor.category,
            "cardinality": factor.cardinality,
            "f1": macro_f1(true, pred),
            "accuracy": accuracy(true, pred),
        }
    categories = {}
    for cat in CATEGORIES:
        members = [s for s in factor_scores.values() if s["category"] == cat]
        if members:
            categories[cat] = {
                "f1": float(np.mean([m["f1"] for m in members])),
                "accuracy": float(np.mean([m["accuracy"] for m in members])),
                "n_factors": len(members),
            }
    missing = [cat for cat in CATEGORIES if cat not in categories]
    if not categories:
        raise ShapeError("evaluate: no categories with factors")
    return ProbeReport(
        factors=factor_scores,
        categories=categories,
        mean_f1=float(np.mean([c["f1"] for c in categories.values()])),
        mean_accuracy=float(np.mean([c["accuracy"] for c in categories.values()])),
        missing_categories=missing,
        seed=seed,
        config_hash=config_hash,
        feature_mode=feature_mode,
    )


def probe_checkpoint(
    params,
    bn_states,
    enc_cfg,
    atlas_cfg,
    episodes,
    feature_mode,
    probe_cfg=None,
    shuffle_labels_seed=None,
    seed=0,
    config_hash="",
):
    """Full probing pass over a dataset against frozen parameters.

    ``shuffle_labels_seed`` permutes the train/val labels (chance-level
    baseline); test labels stay truthful. The encoder is hash-compared
    before and after to prove it stayed frozen.
    """
    probe_cfg = probe_cfg or ProbeConfig(seed=seed)
    world = episodes[0].world
    factors = world.factors()
    before = param_fingerprint(params)

    train_eps, val_eps, test_eps = split_episodes(episodes)
    splits = {}
    for name, eps in (("train", train_eps), ("val", val_eps), ("test", test_eps)):
        frames = np.concatenate([ep.frames for ep in eps], axis=0)
        labels = np.concatenate([ep.labels for ep in eps], axis=0)
        feats = extract_features(
            params, bn_states, enc_cfg, atlas_cfg, frames, feature_mode
        )
        splits[name] = (feats, labels)

    predictions = {}
    labels_out = {}
    for i, factor in enumerate(factors):
        train_y = splits["train"][1][:, i].copy()
        val_y = splits["val"][1][:, i].copy()
        if shuffle_labels_seed is not None:
            rng = np.random.default_rng([shuffle_labels_seed, 907, i])
            train_y = rng.permutation(train_y)
            val_y = rng.permutation(val_y)
        w, b = train_linear_probe(
            splits["train"][0], train_y, splits["val"][0], val_y, factor.cardinality, probe_cfg
        )
        predictions[factor.name] = predict(w, b, splits["test"][0])
        labels_out[factor.name] = splits["test"][1][:, i]

    after = param_fingerprint(params)
    if before != after:
        raise ShapeError("probe_checkpoint: encoder parameters changed during probing")
    return evaluate(
        predictions,
        labels_out,
        factors,
        seed=seed,
        config_hash=config_hash,
        feature_mode=feature_mode,
    )


REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "report_version",
        "factors",
        "categories",
        "mean_f1",
        "mean_accuracy",
        "missing_categories",
        "seed",
        "config_hash",
        "feature_mode",
    ],
    "properties": {
        "report_version": {"const": 1},
        "factors": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["category", "cardinality", "f1", "accuracy"],
                "properties": {
                    "category": {"type": "string"},
                    "cardinality": {"type": "integer", "minimum": 2},
                    "f1": {"type": "number", "minimum": 0, "maximum": 1},
                    "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                },
            },
        },
        "categories": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["f1", "accuracy", "n_factors"],
                "properties": {
                    "f1": {"type": "number", "minimum": 0, "maximum": 1},
                    "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                    "n_factors": {"type": "integer", "minimum": 1},
                },
            },
        },
        "mean_f1": {"type": "number", "minimum": 0, "maximum": 1},
        "mean_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "missing_categories": {"type": "array", "items": {"type": "string"}},
        "seed": {"type": "integer"},
        "config_hash": {"type": "string"},
        "feature_mode": {"type": "string"},
    },
}


def write_report(path, report):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report(path):
    with open(path) as fh:
        return json.load(fh)
