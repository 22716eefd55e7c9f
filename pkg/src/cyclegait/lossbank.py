"""Scalar training losses with analytic gradients, plus coefficient schedules.

Four losses feed the weighted combination
    combined = sigma0 * consistency + sigma1 * ce + sigma2 * triplet + sigma3 * contrastive
and every gradient here is exact (finite-difference checked in the tests).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import softmax


class BatchStructureError(ValueError):
    """A batch violates the structural contract of a loss (sampler bug)."""


@dataclass(frozen=True)
class LossBreakdown:
    """Per-batch loss components and the coefficients that combined them."""

    l_c: float
    l_ce: float
    l_tri: float
    l_mil: float
    l_crc: float
    sigma0: float
    sigma1: float
    sigma2: float
    sigma3: float

    def as_dict(self) -> dict:
        return {
            "l_c": self.l_c,
            "l_ce": self.l_ce,
            "l_tri": self.l_tri,
            "l_mil": self.l_mil,
            "l_crc": self.l_crc,
            "sigma0": self.sigma0,
            "sigma1": self.sigma1,
            "sigma2": self.sigma2,
            "sigma3": self.sigma3,
        }

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in self.as_dict().values())


@dataclass(frozen=True)
class Ramp:
    """Piecewise-linear coefficient: start -> end over ramp_iters, then flat."""

    start: float
    end: float
    ramp_iters: int = 0

    @property
    def direction(self) -> str:
        if self.end > self.start:
            return "up"
        if self.end < self.start:
            return "down"
        return "flat"

    def value(self, iteration: int) -> float:
        if iteration < 0:
            raise ValueError("iteration must be >= 0")
        if self.ramp_iters <= 0 or iteration >= self.ramp_iters:
            return self.end
        frac = iteration / self.ramp_iters
        return self.start + (self.end - self.start) * frac

    @classmethod
    def constant(cls, v: float) -> "Ramp":
        return cls(v, v, 0)


@dataclass(frozen=True)
class CoeffSchedule:
    """The four loss coefficients as ramps, evaluable at any iteration."""

    sigma0: Ramp
    sigma1: Ramp
    sigma2: Ramp
    sigma3: Ramp

    def at(self, iteration: int):
        return (
            self.sigma0.value(iteration),
            self.sigma1.value(iteration),
            self.sigma2.value(iteration),
            self.sigma3.value(iteration),
        )

    @classmethod
    def constants(cls, s0=0.1, s1=1.0, s2=0.1, s3=0.1) -> "CoeffSchedule":
        return cls(*(Ramp.constant(v) for v in (s0, s1, s2, s3)))

    @classmethod
    def noisy_default(cls, total_iters: int, ramp_fraction: float = 0.5) -> "CoeffSchedule":
        """Ramped profile for noisy-data runs.

        The consistency and triplet weights grow 0.01 -> 0.1 over the ramp
        window while the CE weight anneals 1.0 -> 0.1 over the same window
        (fitting pressure hands over to the noise-robust terms); the
        contrastive weight follows the triplet weight.
        """
        ramp = max(1, int(total_iters * ramp_fraction))
        up = Ramp(0.01, 0.1, ramp)
        down = Ramp(1.0, 0.1, ramp)
        return cls(sigma0=up, sigma1=down, sigma2=up, sigma3=up)

    @classmethod
    def clean_default(cls) -> "CoeffSchedule":
        return cls.constants(0.1, 1.0, 0.1, 0.1)


def coteach_loss(p_m, p_f, detach_teacher: bool = False):
    """Soft cross-entropy of the F-network prediction against the M-network.

    Returns (loss, grad wrt p_f, grad wrt p_m). With detach_teacher the
    teacher logits are treated as constants and their gradient is zero.
    """
    p_m = np.asarray(p_m, dtype=np.float64)
    p_f = np.asarray(p_f, dtype=np.float64)
    if p_m.shape != p_f.shape or p_m.ndim != 1:
        raise ValueError("logit vectors must be 1-D and equally sized")
    if p_m.size < 2:
        raise ValueError("need at least two classes")
    a = softmax(p_m)  # teacher distribution
    b = softmax(p_f)
    log_b = p_f - p_f.max()
    log_b = log_b - np.log(np.exp(log_b).sum())
    loss = float(-np.sum(a * log_b))
    grad_f = b - a
    if detach_teacher:
        grad_m = np.zeros_like(a)
    else:
        grad_m = a * (-log_b - loss)
    return loss, grad_f, grad_m


def ce_loss(p, y: int):
    """Cross-entropy of logits against a class index; grad = softmax - onehot."""
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= y < p.size:
        raise ValueError(f"label {y} out of range for {p.size} classes")
    probs = softmax(p)
    log_p = p - p.max()
    log_p = log_p - np.log(np.exp(log_p).sum())
    loss = float(-log_p[y])
    grad = probs.copy()
    grad[y] -= 1.0
    return loss, grad


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def batch_coteach(p_m: np.ndarray, p_f: np.ndarray, detach_teacher: bool = False):
    """Row-vectorized coteach_loss averaged over the batch.

    Returns (mean loss, grad wrt p_f rows, grad wrt p_m rows); gradients are
    already divided by the batch size so they differentiate the mean.
    """
    if p_m.shape != p_f.shape:
        raise ValueError("logit batches must have equal shapes")
    b = p_m.shape[0]
    a = softmax_rows(p_m)
    sm_f = softmax_rows(p_f)
    log_f = log_softmax_rows(p_f)
    per_sample = -np.sum(a * log_f, axis=1)
    grad_f = (sm_f - a) / b
    if detach_teacher:
        grad_m = np.zeros_like(a)
    else:
        grad_m = a * (-log_f - per_sample[:, None]) / b
    return float(per_sample.mean()), grad_f, grad_m


def batch_ce(p: np.ndarray, labels) -> tuple:
    """Row-vectorized ce_loss averaged over the batch; grads include the 1/B."""
    labels = np.asarray(labels, dtype=int)
    b = p.shape[0]
    log_p = log_softmax_rows(p)
    loss = float(-log_p[np.arange(b), labels].mean())
    grad = softmax_rows(p)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def _pairwise_distances(embeddings: np.ndarray) -> np.ndarray:
    sq = np.sum(embeddings**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * embeddings @ embeddings.T
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2)


def has_valid_triplet(labels) -> bool:
    labels = np.asarray(labels)
    _, counts = np.unique(labels, return_counts=True)
    return len(counts) >= 2 and counts.max() >= 2


def triplet_loss(embeddings, labels, margin: float = 0.2):
    """Batch-all triplet loss with Euclidean distances.

    Mean of hinge(d(a,p) - d(a,n) + margin) over triplets whose hinge is
    strictly positive; zero when every valid triplet already satisfies the
    margin. Returns (loss, per-embedding gradients).
    """
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if e.ndim != 2 or e.shape[0] != labels.shape[0]:
        raise ValueError("embeddings must be (B, d) with one label per row")
    if not has_valid_triplet(labels):
        raise BatchStructureError(
            "no valid (anchor, positive, negative) triplet in batch"
        )
    b = e.shape[0]
    dist = _pairwise_distances(e)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same

    hinge = dist[:, :, None] - dist[:, None, :] + margin  # (a, p, n)
    valid = pos_mask[:, :, None] & neg_mask[:, None, :]
    active = valid & (hinge > 0.0)
    n_active = int(active.sum())
    if n_active == 0:
        return 0.0, np.zeros_like(e)
    loss = float(hinge[active].sum() / n_active)

    # coefficient on each pair distance: +count over n for (a,p), -count over p for (a,n)
    coeff = np.zeros((b, b))
    coeff += active.sum(axis=2)  # anchor-positive pairs
    coeff -= active.sum(axis=1)  # anchor-negative pairs
    coeff /= n_active

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(dist > 0.0, 1.0 / np.where(dist > 0.0, dist, 1.0), 0.0)
    w = coeff * inv
    diff = e[:, None, :] - e[None, :, :]  # e_i - e_j
    grad = (w[:, :, None] * diff).sum(axis=1) - (w[:, :, None] * diff).sum(axis=0)
    return loss, grad


def mil_loss(q, positives, negatives, temperature: float = 1.0):
    """Multi-sample contrastive loss for one query.

    loss = -log( sum_pos exp(q.k/t) / (sum_pos exp(q.k/t) + sum_neg exp(q.k/t)) )

    Returns (loss, grad_q, grad_positives, grad_negatives). An empty negative
    set gives exactly zero loss; an empty positive set is a caller bug.
    """
    q = np.asarray(q, dtype=np.float64)
    pos = np.asarray(positives, dtype=np.float64).reshape(-1, q.size)
    neg = (
        np.asarray(negatives, dtype=np.float64).reshape(-1, q.size)
        if len(negatives)
        else np.zeros((0, q.size))
    )
    if pos.shape[0] == 0:
        raise BatchStructureError("contrastive query needs at least one positive")
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")

    s_pos = pos @ q / temperature
    s_neg = neg @ q / temperature
    shift = max(s_pos.max(), s_neg.max() if s_neg.size else -np.inf)
    w_pos = np.exp(s_pos - shift)
    w_neg = np.exp(s_neg - shift) if s_neg.size else np.zeros(0)
    s_sum = w_pos.sum() + w_neg.sum()
    loss = float(-np.log(w_pos.sum() / s_sum))

    # d loss / d score
    d_pos = (-w_pos / w_pos.sum() + w_pos / s_sum) / temperature
    d_neg = (w_neg / s_sum) / temperature if w_neg.size else np.zeros(0)

    grad_q = d_pos @ pos + (d_neg @ neg if d_neg.size else 0.0)
    grad_pos = d_pos[:, None] * q[None, :]
    grad_neg = d_neg[:, None] * q[None, :] if d_neg.size else np.zeros_like(neg)
    return loss, grad_q, grad_pos, grad_neg


def batch_mil_loss(embeddings, labels, temperature: float = 1.0):
    """Mean contrastive loss over every sample that has an in-batch positive.

    Embeddings are used as given (normalize upstream). Samples without any
    same-label peer are skipped as queries but still serve as keys. Returns
    (loss, per-embedding gradients, number of queries).
    """
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    b = e.shape[0]
    if b == 0:
        return 0.0, np.zeros_like(e), 0
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same
    is_query = pos_mask.any(axis=1)
    n_queries = int(is_query.sum())
    if n_queries == 0:
        return 0.0, np.zeros_like(e), 0

    sim = e @ e.T / temperature
    key_mask = pos_mask | neg_mask
    shifted = np.where(key_mask, sim, -np.inf)
    shift = shifted.max(axis=1, keepdims=True)
    shift[~is_query] = 0.0
    w = np.where(key_mask, np.exp(sim - shift), 0.0)
    s_pos = (w * pos_mask).sum(axis=1)
    s_all = (w * key_mask).sum(axis=1)
    losses = np.where(is_query, -np.log(np.where(is_query, s_pos / np.where(s_all > 0, s_all, 1.0), 1.0)), 0.0)
    loss = float(losses.sum() / n_queries)

    # d(loss_i)/d(sim_ij): positives get (-w/s_pos + w/s_all), negatives w/s_all
    d_sim = np.zeros((b, b))
    rows = is_query
    with np.errstate(invalid="ignore", divide="ignore"):
        d_sim += np.where(pos_mask, -w / s_pos[:, None] + w / s_all[:, None], 0.0)
        d_sim += np.where(neg_mask, w / s_all[:, None], 0.0)
    d_sim[~rows] = 0.0
    d_sim /= temperature * n_queries
    grads = d_sim @ e + d_sim.T @ e
    return loss, grads, n_queries


def crc_combine(l_c, l_ce, l_tri, l_mil, schedule: CoeffSchedule, iteration: int) -> LossBreakdown:
    """Evaluate the coefficients at this iteration and combine the parts."""
    s0, s1, s2, s3 = schedule.at(iteration)
    combined = s0 * l_c + s1 * l_ce + s2 * l_tri + s3 * l_mil
    return LossBreakdown(
        l_c=float(l_c),
        l_ce=float(l_ce),
        l_tri=float(l_tri),
        l_mil=float(l_mil),
        l_crc=float(combined),
        sigma0=s0,
        sigma1=s1,
        sigma2=s2,
        sigma3=s3,
    )
