"""Ranking metrics: global AUC, per-user NDCG@k, relative improvement."""

from __future__ import annotations

import csv
import math
import os

import numpy as np
from scipy.stats import rankdata

from .exceptions import ContractError, UndefinedMetricError

REPORT_HEADER = ("method", "seed", "lambda", "auc", "ndcg@5", "ndcg@10")


def _binary_labels(labels):
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ContractError("labels must be 0/1")
    return labels


def auc(scores, labels):
    """Mann-Whitney AUC from ascending-score ranks; ties get average ranks."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = _binary_labels(labels)
    if len(scores) != len(labels):
        raise ContractError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def descending_positions(scores):
    """1-based position of each entry when sorted by decreasing score (stable)."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    pos = np.empty(len(order), dtype=np.int64)
    pos[order] = np.arange(1, len(order) + 1)
    return pos


def _dcg_discounts(k):
    return 1.0 / np.log2(np.arange(2, k + 2))


def ndcg_at_k(users, scores, labels, k):
    """Mean NDCG@k over users that have at least one positive item.

    Within a user, items are ranked by decreasing score; each positive at
    position ``z <= k`` adds ``1 / log2(z + 1)``.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    users = np.asarray(users).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = _binary_labels(labels)
    if not (len(users) == len(scores) == len(labels)):
        raise ContractError("users, scores and labels differ in length")
    order = np.argsort(users, kind="stable")
    users, scores, labels = users[order], scores[order], labels[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    discounts = _dcg_discounts(k)
    values = []
    for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, len(users)]):
        lab = labels[lo:hi]
        n_pos = int(lab.sum())
        if n_pos == 0:
            continue
        pos = descending_positions(scores[lo:hi])
        hit = (lab == 1) & (pos <= k)
        dcg = float(np.sum(1.0 / np.log2(pos[hit] + 1.0)))
        idcg = float(discounts[: min(n_pos, k)].sum())
        values.append(dcg / idcg)
    if not values:
        raise UndefinedMetricError("no user has a positive item")
    return float(np.mean(values))


def relative_improvement(new, base):
    """Percentage change ``100 * (new - base) / base``."""
    if base <= 0:
        raise ContractError("relative improvement needs a positive base")
    return 100.0 * (new - base) / base


def evaluate(model, table, threshold=4.0, ks=(5, 10)):
    """AUC and NDCG@k of ``model`` on ``table`` (labels binarized at ``threshold``)."""
    labels = table.labels(threshold)
    scores = model.predict(table.users, table.items)
    out = {"auc": auc(scores, labels)}
    for k in ks:
        out[f"ndcg@{k}"] = ndcg_at_k(table.users, scores, labels, k)
    return out


def format_value(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def append_report(path, row, header=REPORT_HEADER):
    """Append one metrics row to a CSV, writing the header if the file is new."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(header)
        writer.writerow([format_value(row[h]) for h in header])


def is_finite_metric(x):
    return x is not None and math.isfinite(x)
