"""Balancing weights: normalization, entropy, constraint gap and the weight-model loss.

Weights come from factor models with a sigmoid link (positivity) followed by
an exact per-batch mean rescale (normality). The weight-model objective is::

    sign * sum_g scale_g * sum_j w_j log w_j  +  lam * gap^2

where ``gap`` is the reweighted biased-data loss minus the uniform-data
loss. ``sign=+1`` (``entropy_sign="max-entropy"``) pulls weights toward
uniform; ``sign=-1`` (``entropy_sign="paper"``) flips the entropy term so
it rewards concentrated weights.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .estimators import EstimatorKind, build_groups, group_moments, uniform_loss
from .exceptions import ContractError
from .factor import loss_grad

ENTROPY_SIGNS = {"max-entropy": 1.0, "paper": -1.0}


@dataclass(frozen=True)
class WeightBatch:
    raw: np.ndarray
    normalized: np.ndarray
    target_mean: float


def normalize_weights(raw, target_mean):
    """Rescale positive ``raw`` so its mean is exactly ``target_mean``."""
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    if target_mean <= 0:
        raise ContractError("target_mean must be positive")
    if len(raw) == 0 or np.any(~(raw > 0)):
        raise ContractError("raw weights must be a non-empty vector of positive numbers")
    w = raw * (target_mean * len(raw) / raw.sum())
    return WeightBatch(raw, w, float(target_mean))


def normalize_backward(batch, grad_normalized):
    """Pull a gradient on normalized weights back to the raw weights."""
    g = np.asarray(grad_normalized, dtype=np.float64)
    raw = batch.raw
    total = raw.sum()
    c = batch.target_mean * len(raw) / total
    return c * (g - (g @ raw) / total)


def entropy_term(weights):
    """``sum_j w_j ln w_j`` (negative entropy; lower means closer to uniform)."""
    w = weights.normalized if isinstance(weights, WeightBatch) else np.asarray(weights, dtype=np.float64)
    if np.any(~(w > 0)):
        raise ContractError("entropy needs positive weights")
    return float(np.sum(w * np.log(w)))


def _kind(kind):
    if isinstance(kind, EstimatorKind):
        return kind.family
    name = kind.lower().removeprefix("bal-")
    return {"mf": "naive", "auto": "autodebias"}.get(name, name)


def predict_weights(kind, xi, batch):
    """Normalized weights of every group, keyed ``"w"`` or ``"w1"``/``"w2"``."""
    groups = build_groups(_kind(kind), batch)
    return {g.key: normalize_weights(xi[g.key].predict(g.users, g.items), g.uniform_weight) for g in groups}


def gap_from_moments(moments, scales, weights, target):
    """``sum_g scale_g * sum_j w_gj * a_gj - target``."""
    total = 0.0
    for a, s, w in zip(moments, scales, weights):
        w = w.normalized if isinstance(w, WeightBatch) else np.asarray(w, dtype=np.float64)
        if len(w) != len(a):
            raise ContractError(f"{len(w)} weights for {len(a)} samples")
        total += s * float(w @ a)
    return total - target


def constraint_gap(kind, weights, batch, theta, phi, uniform, delta="squared"):
    """Left side minus right side of the balancing equality on the given batches."""
    if uniform is None or len(uniform) == 0:
        raise ContractError("constraint gap needs a non-empty uniform sample")
    groups = build_groups(_kind(kind), batch)
    moments = group_moments(groups, theta, phi or {}, delta)
    for g in groups:
        if g.key not in weights:
            raise ContractError(f"missing weight block {g.key!r}")
    target = uniform_loss(uniform, theta, delta, with_grad=False).value
    return gap_from_moments(moments, [g.scale for g in groups], [weights[g.key] for g in groups], target)


@dataclass
class WeightLoss:
    value: float
    grads: dict
    gap: float
    entropy: float
    weights: dict


def weight_loss(kind, xi, batch, theta, phi, uniform, lam, entropy_sign="max-entropy", delta="squared"):
    """Weight-model objective and its gradient for each weight model in ``xi``."""
    if lam < 0:
        raise ContractError("lambda must be >= 0")
    if entropy_sign not in ENTROPY_SIGNS:
        raise ContractError(f"entropy_sign must be one of {tuple(ENTROPY_SIGNS)}")
    sign = ENTROPY_SIGNS[entropy_sign]
    groups = build_groups(_kind(kind), batch)
    moments = group_moments(groups, theta, phi or {}, delta)
    target = uniform_loss(uniform, theta, delta, with_grad=False).value

    batches = {}
    for g in groups:
        if g.key not in xi:
            raise ContractError(f"missing weight model {g.key!r}")
        batches[g.key] = normalize_weights(xi[g.key].predict(g.users, g.items), g.uniform_weight)
    gap = gap_from_moments(moments, [g.scale for g in groups], [batches[g.key] for g in groups], target)

    entropy = 0.0
    grads = {}
    for g, a in zip(groups, moments):
        wb = batches[g.key]
        w = wb.normalized
        entropy += g.scale * float(w @ np.log(w))
        g_norm = sign * g.scale * (np.log(w) + 1.0) + 2.0 * lam * gap * g.scale * a
        g_raw = normalize_backward(wb, g_norm)
        grads[g.key] = loss_grad(xi[g.key], g.users, g.items, g_raw, None, "linear")[1]
    value = sign * entropy + lam * gap**2
    return WeightLoss(value, grads, gap, entropy, batches)


def dump_weights(path, users, items, weights):
    """Write learned weights as CSV ``user,item,weight``."""
    w = weights.normalized if isinstance(weights, WeightBatch) else np.asarray(weights)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user", "item", "weight"])
        for u, i, x in zip(np.asarray(users).tolist(), np.asarray(items).tolist(), w.tolist()):
            writer.writerow([u, i, repr(x)])
