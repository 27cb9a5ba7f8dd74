"""Scalar training objectives.

All losses are differentiable functions of tape tensors:

- ``info_nce``: softmax cross-entropy over within-batch negative scores,
  the building block whose minimization tightens the ``log B - L`` mutual
  information lower bound (see ``estimate_mi_lower_bound``).
- ``global_local_loss`` / ``local_local_loss``: temporal InfoNCE terms
  pairing a global embedding with next-frame local features, and
  same-location local features across time.
- ``ua_discrepancy``: positive squared deviation of chart memberships from
  uniform (the training loop applies its negative coefficient).
- ``mmcr_loss``: negative nuclear norm of the per-sample centroid matrix,
  used as the capacity regularizer.
- ``nt_xent`` / ``barlow_twins``: the pluggable two-view objectives, paired
  across all head combinations by ``pairwise_head_loss``.
- ``composite_loss``: the per-mode weighted sum with one-view capacity
  regularization.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import AdamState, adam_step, ops
from .autodiff.tensor import ShapeError, Tape, Tensor

__all__ = [
    "LossWeights",
    "CentroidMatrix",
    "info_nce",
    "global_local_loss",
    "local_local_loss",
    "ua_discrepancy",
    "build_centroid_matrix",
    "mmcr_loss",
    "nt_xent",
    "barlow_twins",
    "pairwise_head_loss",
    "composite_loss",
    "estimate_mi_lower_bound",
    "train_mi_critic",
    "loss_checks",
]


@dataclass
class LossWeights:
    """Coefficients of the composite objectives.

    epsilon scales the capacity (negative nuclear norm) term;
    ua_coefficient is the literal -0.05 multiplier on the membership
    discrepancy of both frames; tau and lam parameterize the pluggable
    two-view losses.
    """

    epsilon: float = 0.0005
    ua_coefficient: float = -0.05
    tau: float = 0.5
    lam: float = 0.005

    def __post_init__(self):
        if self.epsilon < 0:
            raise ShapeError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.tau <= 0:
            raise ShapeError(f"tau must be > 0, got {self.tau}")
        if self.lam < 0:
            raise ShapeError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class CentroidMatrix:
    """D x B matrix of per-sample centroid vectors (one column per sample).

    ``normalized`` records whether head vectors were L2-normalized before
    averaging; in that case every column norm is <= 1 (up to rounding).
    """

    matrix: Tensor
    normalized: bool

    def validate(self):
        if self.matrix.ndim != 2:
            raise ShapeError(f"centroid matrix must be rank-2, got {self.matrix.shape}")
        if self.normalized:
            norms = np.sqrt((self.matrix.data**2).sum(axis=0))
            if norms.size and norms.max() > 1.0 + 1e-6:
                raise ShapeError(
                    f"normalized centroid column norm {norms.max():.8f} exceeds 1"
                )
        return self


def info_nce(scores):
    """Mean cross-entropy of each row's softmax against the diagonal positive."""
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeError(f"info_nce: scores must be square, got {scores.shape}")
    b = scores.shape[0]
    return ops.softmax_cross_entropy(scores, np.arange(b))


def _location(feature_map, h, w):
    # (B, H, W, C) -> (B, C) at one spatial site
    return ops.index_select(ops.index_select(feature_map, 1, h), 1, w)


def _check_maps(kind, fmap):
    if fmap.ndim != 4:
        raise ShapeError(f"{kind}: local map must be (B, H, W, C), got {fmap.shape}")
    if fmap.shape[1] < 1 or fmap.shape[2] < 1:
        raise ShapeError(f"{kind}: zero spatial extent in {fmap.shape}")


def global_local_loss(head_outputs, local_next, critic, head_mode="per-head", membership=None):
    """InfoNCE between global head embeddings and next-frame local features.

    head_outputs: (B, N, D); local_next: (B, H, W, C); critic maps (B, D)
    to the local channel space. ``per-head`` scores each chart separately
    and averages over the N charts; ``head-mean`` scores the plain average
    of the charts once; ``membership-mean`` weights the average by the
    chart membership probabilities (optional variant, never the default).
    """
    if head_outputs.ndim != 3 or head_outputs.shape[1] < 1:
        raise ShapeError(
            f"global_local_loss: head outputs must be (B, N, D) with N >= 1, got {head_outputs.shape}"
        )
    _check_maps("global_local_loss", local_next)
    b, n, _ = head_outputs.shape
    hh, ww = local_next.shape[1], local_next.shape[2]
    targets = np.arange(b)

    if head_mode == "per-head":
        queries = [critic(ops.index_select(head_outputs, 1, i)) for i in range(n)]
    elif head_mode == "head-mean":
        queries = [critic(ops.reduce_mean(head_outputs, axis=1))]
    elif head_mode == "membership-mean":
        if membership is None:
            raise ShapeError("global_local_loss: membership-mean requires membership")
        tape = head_outputs.tape
        acc = None
        for i in range(n):
            wgt = ops.reshape(ops.index_select(membership, 1, i), (b, 1))
            term = ops.mul(ops.index_select(head_outputs, 1, i), wgt)
            acc = term if acc is None else ops.add(acc, term)
        queries = [critic(acc)]
    else:
        raise ShapeError(f"global_local_loss: unknown head_mode {head_mode!r}")

    total = None
    for h in range(hh):
        for w in range(ww):
            key_t = ops.transpose(_location(local_next, h, w))
            for q in queries:
                term = ops.softmax_cross_entropy(ops.matmul(q, key_t), targets)
                total = term if total is None else ops.add(total, term)
    return ops.scale(total, 1.0 / (hh * ww * len(queries)))


def local_local_loss(local_t, local_next, critic):
    """InfoNCE pairing same-location local features across adjacent frames."""
    _check_maps("local_local_loss", local_t)
    _check_maps("local_local_loss", local_next)
    if local_t.shape != local_next.shape:
        raise ShapeError(
            f"local_local_loss: map shapes differ: {local_t.shape} vs {local_next.shape}"
        )
    b, hh, ww, _ = local_t.shape
    targets = np.arange(b)
    total = None
    for h in range(hh):
        for w in range(ww):
            q = critic(_location(local_t, h, w))
            key_t = ops.transpose(_location(local_next, h, w))
            term = ops.softmax_cross_entropy(ops.matmul(q, key_t), targets)
            total = term if total is None else ops.add(total, term)
    return ops.scale(total, 1.0 / (hh * ww))


def ua_discrepancy(q):
    """Mean squared deviation of membership rows from the uniform distribution.

    Returns the positive discrepancy in [0, (n-1)/n]; the training loop
    applies the negative coefficient.
    """
    if q.ndim != 2:
        raise ShapeError(f"ua_discrepancy: expects (B, N), got {q.shape}")
    rows = q.data
    if np.any(rows < -1e-7) or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-5):
        raise ShapeError("ua_discrepancy: rows are not probability vectors")
    n = q.shape[1]
    diff = ops.sub(q, q.tape.constant(1.0 / n))
    return ops.reduce_mean(ops.reduce_sum(ops.mul(diff, diff), axis=1))


def build_centroid_matrix(head_outputs, normalize=True):
    """Average the (optionally L2-normalized) chart vectors of each sample
    into a D x B centroid matrix."""
    if head_outputs.ndim != 3 or head_outputs.shape[1] < 1:
        raise ShapeError(
            f"centroid matrix needs (B, N, D) head outputs, got {head_outputs.shape}"
        )
    vecs = ops.l2_normalize(head_outputs) if normalize else head_outputs
    centroids = ops.reduce_mean(vecs, axis=1)
    return CentroidMatrix(ops.transpose(centroids), normalize).validate()


def mmcr_loss(head_outputs, normalize=True):
    """Negative nuclear norm of the centroid matrix (capacity objective)."""
    cm = build_centroid_matrix(head_outputs, normalize=normalize)
    return ops.scale(ops.nuclear_norm(cm.matrix), -1.0)


def nt_xent(view_a, view_b, tau):
    """Normalized-temperature cross-entropy over the 2B cosine-similarity
    structure with the self-pair masked out."""
    if tau <= 0:
        raise ShapeError(f"nt_xent: tau must be positive, got {tau}")
    if view_a.shape != view_b.shape or view_a.ndim != 2:
        raise ShapeError(
            f"nt_xent: views must share a (B, D) shape, got {view_a.shape}, {view_b.shape}"
        )
    b = view_a.shape[0]
    z = ops.l2_normalize(ops.concat([view_a, view_b], axis=0))
    sim = ops.scale(ops.matmul(z, ops.transpose(z)), 1.0 / tau)
    mask = view_a.tape.constant(-1e9 * np.eye(2 * b))
    logits = ops.add(sim, mask)
    targets = np.concatenate([np.arange(b, 2 * b), np.arange(b)])
    return ops.softmax_cross_entropy(logits, targets)


def barlow_twins(view_a, view_b, lam):
    """Redundancy-reduction loss on the batch-standardized cross-correlation
    matrix: squared diagonal error plus lam times squared off-diagonals."""
    if view_a.ndim != 2 or view_a.shape != view_b.shape:
        raise ShapeError(
            f"barlow_twins: views must share a (B, D) shape, got {view_a.shape}, {view_b.shape}"
        )
    b, d = view_a.shape
    if b < 2:
        raise ShapeError(f"barlow_twins: batch standardization needs B >= 2, got {b}")
    tape = view_a.tape

    def standardize(v):
        mu = ops.reduce_mean(v, axis=0, keepdims=True)
        xc = ops.sub(v, mu)
        var = ops.reduce_mean(ops.mul(xc, xc), axis=0, keepdims=True)
        return ops.div(xc, ops.sqrt(ops.add(var, tape.constant(1e-12))))

    za = standardize(view_a)
    zb = standardize(view_b)
    corr = ops.scale(ops.matmul(ops.transpose(za), zb), 1.0 / b)
    eye = tape.constant(np.eye(d))
    off_mask = tape.constant(1.0 - np.eye(d))
    diff = ops.sub(corr, eye)
    on_diag = ops.reduce_sum(ops.mul(ops.mul(diff, diff), eye))
    off_diag = ops.reduce_sum(ops.mul(ops.mul(corr, corr), off_mask))
    return ops.add(on_diag, ops.scale(off_diag, lam))


def pairwise_head_loss(out_a, out_b, custom):
    """Mean of ``custom`` over all N^2 ordered chart pairs of two views."""
    if out_a.ndim != 3 or out_b.ndim != 3:
        raise ShapeError("pairwise_head_loss: expects (B, N, D) head outputs")
    if out_a.shape[1] != out_b.shape[1]:
        raise ShapeError(
            f"pairwise_head_loss: head counts differ: {out_a.shape[1]} vs {out_b.shape[1]}"
        )
    n = out_a.shape[1]
    total = None
    for i in range(n):
        ai = ops.index_select(out_a, 1, i)
        for j in range(n):
            term = custom(ai, ops.index_select(out_b, 1, j))
            total = term if total is None else ops.add(total, term)
    return ops.scale(total, 1.0 / (n * n))


_MODE_PARTS = {
    "dim-c": ("global", "local"),
    "dim-uac": ("global", "local", "ua_t", "ua_next"),
    "simclr-c": ("pairwise",),
    "bt-c": ("pairwise",),
}


def composite_loss(mode, parts, weights):
    """Weighted sum of the mode's raw loss parts.

    ``parts`` maps part names to scalar tensors: global/local (temporal
    modes), ua_t/ua_next (membership modes), pairwise (two-view modes),
    and optionally mmcr (computed from the first view only, so its
    gradient never touches the second view). Returns the total tensor and
    the logged weighted components (global, local, ua, mmcr, total); the
    logged total is the 64-bit sum of the logged components, so component
    additivity holds exactly even on a float32 tape.
    """
    if mode not in _MODE_PARTS:
        raise ShapeError(f"composite_loss: unknown mode {mode!r}")
    for name in _MODE_PARTS[mode]:
        if name not in parts:
            raise ShapeError(f"composite_loss: mode {mode} requires part {name!r}")

    terms = []
    logged = {"global": 0.0, "local": 0.0, "ua": 0.0, "mmcr": 0.0}
    if "pairwise" in _MODE_PARTS[mode]:
        terms.append(parts["pairwise"])
        logged["global"] = parts["pairwise"].item()
    else:
        terms.append(parts["global"])
        terms.append(parts["local"])
        logged["global"] = parts["global"].item()
        logged["local"] = parts["local"].item()
    if "ua_t" in _MODE_PARTS[mode]:
        ua = ops.scale(ops.add(parts["ua_t"], parts["ua_next"]), weights.ua_coefficient)
        terms.append(ua)
        logged["ua"] = ua.item()
    if "mmcr" in parts and weights.epsilon > 0:
        mm = ops.scale(parts["mmcr"], weights.epsilon)
        terms.append(mm)
        logged["mmcr"] = mm.item()

    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    logged["total"] = logged["global"] + logged["local"] + logged["ua"] + logged["mmcr"]
    return total, logged


def estimate_mi_lower_bound(loss_value, batch_size):
    """log(B) - L: the mutual-information lower bound certified by an
    InfoNCE loss value L at batch size B."""
    if batch_size < 2:
        raise ShapeError(f"mi bound needs batch size >= 2, got {batch_size}")
    if isinstance(loss_value, Tensor):
        loss_value = loss_value.item()
    return float(np.log(batch_size) - loss_value)


def train_mi_critic(
    dim=32,
    batch_size=64,
    steps=500,
    lr=5e-3,
    seed=0,
    paired=True,
    eval_batches=100,
    val_every=25,
    val_batches=20,
):
    """Train a bilinear critic with InfoNCE on synthetic pairs and report
    the mutual-information bound on fresh data.

    ``paired=True`` draws (u, u) copies (high MI); ``paired=False`` draws
    independent (u, v) (zero MI). The critic starts at zero, where the
    loss is exactly log(B) and the bound exactly 0. The reported critic is
    the snapshot with the best loss on a held-out validation set (standard
    model selection; without it a noise-fit critic reports a spuriously
    negative bound on independent data), evaluated on fresh batches.
    """
    rng = np.random.default_rng([seed, 91641, int(paired)])
    w = np.zeros((dim, dim))
    params = {"w": w}
    state = AdamState(params)

    def batch(generator):
        u = generator.standard_normal((batch_size, dim))
        v = u.copy() if paired else generator.standard_normal((batch_size, dim))
        return u, v

    def loss_on(weights, u, v, for_grad=False):
        tape = Tape(np.float64)
        wt = tape.tensor(weights, requires_grad=for_grad)
        scores = ops.matmul(ops.matmul(tape.constant(u), wt), ops.transpose(tape.constant(v)))
        loss = info_nce(scores)
        if for_grad:
            tape.backward(loss)
            return loss.item(), wt.grad
        return loss.item(), None

    val_rng = np.random.default_rng([seed, 52307, int(paired)])
    val_set = [batch(val_rng) for _ in range(val_batches)]

    def validation(weights):
        return float(np.mean([loss_on(weights, u, v)[0] for u, v in val_set]))

    initial_loss, _ = loss_on(w, *batch(rng))
    best_val = validation(w)
    best_w = w.copy()
    for step in range(1, steps + 1):
        u, v = batch(rng)
        _, grad = loss_on(w, u, v, for_grad=True)
        adam_step(params, {"w": grad}, state, lr=lr)
        if step % val_every == 0 or step == steps:
            val = validation(w)
            if val < best_val:
                best_val = val
                best_w = w.copy()

    eval_rng = np.random.default_rng([seed, 77923, int(paired)])
    eval_losses = [loss_on(best_w, *batch(eval_rng))[0] for _ in range(eval_batches)]
    mean_loss = float(np.mean(eval_losses))
    return {
        "initial_bound": estimate_mi_lower_bound(initial_loss, batch_size),
        "bound": estimate_mi_lower_bound(mean_loss, batch_size),
        "eval_loss": mean_loss,
        "eval_loss_sd": float(np.std(eval_losses)),
        "validation_loss": best_val,
    }


def loss_checks():
    """Gradcheck samplers for every loss (64-bit, see gradcheck module).

    ua_discrepancy is checked through a softmax reparameterization so that
    finite-difference perturbations stay on the probability simplex.
    """
    from .autodiff.gradcheck import tape_fn

    def sample_info_nce(rng):
        return tape_fn(lambda tape, ts: info_nce(ts[0])), [rng.standard_normal((4, 4))]

    def _critic(wc, bc):
        return lambda t: ops.add(ops.matmul(t, wc), bc)

    def sample_global_local(rng, mode):
        heads = rng.standard_normal((3, 2, 3))
        local = rng.standard_normal((3, 2, 2, 2))
        wc = rng.standard_normal((3, 2))
        bc = rng.standard_normal(2)
        memb = rng.uniform(0.2, 1.0, (3, 2))
        memb /= memb.sum(axis=1, keepdims=True)

        def build(tape, ts):
            m = tape.constant(memb) if mode == "membership-mean" else None
            return global_local_loss(
                ts[0], ts[1], _critic(ts[2], ts[3]), head_mode=mode, membership=m
            )

        return tape_fn(build), [heads, local, wc, bc]

    def sample_local_local(rng):
        a = rng.standard_normal((3, 2, 2, 2))
        b = rng.standard_normal((3, 2, 2, 2))
        wc = rng.standard_normal((2, 2))
        bc = rng.standard_normal(2)
        fn = tape_fn(lambda tape, ts: local_local_loss(ts[0], ts[1], _critic(ts[2], ts[3])))
        return fn, [a, b, wc, bc]

    def sample_ua(rng):
        logits = rng.standard_normal((4, 3))
        return tape_fn(lambda tape, ts: ua_discrepancy(ops.softmax(ts[0]))), [logits]

    def sample_mmcr(rng):
        heads = rng.standard_normal((3, 2, 4)) + 0.1
        return tape_fn(lambda tape, ts: mmcr_loss(ts[0])), [heads]

    def sample_nt_xent(rng):
        arrays = [rng.standard_normal((4, 3)), rng.standard_normal((4, 3))]
        return tape_fn(lambda tape, ts: nt_xent(ts[0], ts[1], tau=0.5)), arrays

    def sample_barlow(rng):
        arrays = [rng.standard_normal((5, 3)), rng.standard_normal((5, 3))]
        return tape_fn(lambda tape, ts: barlow_twins(ts[0], ts[1], lam=0.005)), arrays

    def sample_pairwise(rng):
        a = rng.standard_normal((4, 2, 3))
        b = rng.standard_normal((4, 2, 3))
        fn = tape_fn(
            lambda tape, ts: pairwise_head_loss(ts[0], ts[1], lambda x, y: nt_xent(x, y, tau=0.5))
        )
        return fn, [a, b]

    def with_mode(mode):
        return lambda rng: sample_global_local(rng, mode)

    checks = {
        "loss/info_nce": lambda rng: sample_info_nce(rng),
        "loss/global_local_per_head": with_mode("per-head"),
        "loss/global_local_head_mean": with_mode("head-mean"),
        "loss/global_local_membership_mean": with_mode("membership-mean"),
        "loss/local_local": sample_local_local,
        "loss/ua_discrepancy": sample_ua,
        "loss/mmcr": sample_mmcr,
        "loss/nt_xent": sample_nt_xent,
        "loss/barlow_twins": sample_barlow,
        "loss/pairwise_heads": sample_pairwise,
    }
    return checks
