"""Loss estimators for the prediction model: ideal, naive, uniform, IPS, DR,
AutoDebias and their balanced (reweighted) variants.

Every biased-data estimator is expressed as a list of weight *groups*. A
group is a block of samples (a mini-batch of all pairs ``D`` or of observed
pairs ``B``) that shares one balancing-weight vector, and holds one or more
*terms* ``sign * delta(score, label) / propensity``. With uniform weights a
group reproduces the plain estimator; with learned weights it is the
balanced estimator. The same structure yields the per-sample moments needed
by the balancing-weight objective and the mixed second derivative needed by
the hypergradient.

Imputation models output an imputed *label* ``m``; the imputed error is
``e_hat = delta(score, m)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError
from .factor import loss_cross_slope, loss_grad, loss_slope, pointwise_loss, score_directional

FAMILIES = ("ideal", "naive", "uniform", "ips", "dr", "autodebias")
DELTAS = ("squared", "cross-entropy")

# phi models each family needs, by role name
REQUIRED_MODELS = {
    "ideal": (),
    "naive": (),
    "uniform": (),
    "ips": ("p",),
    "dr": ("p", "e"),
    "autodebias": ("p1", "p2", "e"),
}
# balancing-weight blocks each family reweights
WEIGHT_KEYS = {"naive": ("w",), "ips": ("w",), "dr": ("w1", "w2"), "autodebias": ("w1", "w2")}

METHOD_ALIASES = {"mf": "naive", "auto": "autodebias"}


@dataclass(frozen=True)
class EstimatorKind:
    family: str
    balanced: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown estimator family {self.family!r}; expected one of {FAMILIES}")
        if self.balanced and self.family not in WEIGHT_KEYS:
            raise ContractError(f"family {self.family!r} has no balanced variant")

    @classmethod
    def parse(cls, method):
        """``"ips"``, ``"bal-dr"``, ``"mf"``, ``"bal-autodebias"`` ..."""
        name = method.strip().lower()
        balanced = name.startswith("bal-")
        if balanced:
            name = name[4:]
        return cls(METHOD_ALIASES.get(name, name), balanced)

    @property
    def method(self):
        base = "mf" if self.family == "naive" else self.family
        return f"bal-{base}" if self.balanced else base

    @property
    def required_models(self):
        return REQUIRED_MODELS[self.family]

    @property
    def weight_keys(self):
        return WEIGHT_KEYS[self.family] if self.balanced else ()


@dataclass
class LossValue:
    value: float
    grad_theta: np.ndarray | None = None
    terms: np.ndarray | None = None
    term_users: np.ndarray | None = field(default=None, repr=False)
    term_items: np.ndarray | None = field(default=None, repr=False)


def prediction_error(r, r_hat, delta="squared"):
    """Per-pair prediction error ``e = delta(r, r_hat)``; accepts scalars or arrays."""
    r = np.asarray(r, dtype=np.float64)
    r_hat = np.asarray(r_hat, dtype=np.float64)
    if delta == "cross-entropy":
        if not np.isin(r, (0.0, 1.0)).all():
            raise ContractError("cross-entropy needs binary ratings")
        if not ((r_hat > 0) & (r_hat < 1)).all():
            raise ContractError("cross-entropy needs predictions in (0, 1)")
    elif delta != "squared":
        raise ContractError(f"unknown delta {delta!r}; expected one of {DELTAS}")
    out = pointwise_loss(r_hat, r, delta)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Mini-batches and weight groups
# --------------------------------------------------------------------------


@dataclass
class Batch:
    """Samples of ``B`` (observed) and ``D`` (all pairs) with population sizes.

    ``n_biased = |B|`` and ``n_total = |D|`` set the Monte-Carlo scaling of
    mini-batch sums.
    """

    b_users: np.ndarray
    b_items: np.ndarray
    b_ratings: np.ndarray
    d_users: np.ndarray
    d_items: np.ndarray
    n_biased: int
    n_total: int

    @classmethod
    def full(cls, biased):
        """All of ``B`` and an enumeration of all of ``D``."""
        M, N = biased.num_users, biased.num_items
        uu, ii = np.divmod(np.arange(M * N), N)
        return cls(biased.users, biased.items, biased.ratings, uu, ii, len(biased), M * N)

    @classmethod
    def sample(cls, biased, rng, batch_b, batch_d):
        """``B`` without replacement (capped at ``|B|``); ``D`` uniform with replacement."""
        M, N = biased.num_users, biased.num_items
        nb = min(batch_b, len(biased))
        idx = rng.choice(len(biased), size=nb, replace=False)
        flat = rng.integers(0, M * N, size=batch_d)
        du, di = np.divmod(flat, N)
        return cls(biased.users[idx], biased.items[idx], biased.ratings[idx], du, di, len(biased), M * N)


@dataclass
class Term:
    sign: float
    labels: np.ndarray | None = None
    label_model: str | None = None
    propensity_model: str | None = None


@dataclass
class Group:
    key: str
    users: np.ndarray
    items: np.ndarray
    scale: float
    uniform_weight: float
    terms: list


def build_groups(family, batch):
    """Weight groups of a biased-data estimator on ``batch``."""
    if family not in WEIGHT_KEYS:
        raise ContractError(f"family {family!r} is not a biased-data estimator")
    nb, nd = batch.n_biased, batch.n_total
    if len(batch.b_users) == 0:
        raise ContractError("empty B batch")
    b_scale = nb / len(batch.b_users)
    obs = Term(1.0, labels=batch.b_ratings)
    if family == "naive":
        return [Group("w", batch.b_users, batch.b_items, b_scale, 1.0 / nb, [obs])]
    if family == "ips":
        obs.propensity_model = "p"
        return [Group("w", batch.b_users, batch.b_items, b_scale, 1.0 / nd, [obs])]
    d_scale = nd / len(batch.d_users)
    if family == "dr":
        return [
            Group("w1", batch.d_users, batch.d_items, d_scale, 1.0 / nd, [Term(1.0, label_model="e")]),
            Group(
                "w2",
                batch.b_users,
                batch.b_items,
                b_scale,
                1.0 / nd,
                [
                    Term(1.0, labels=batch.b_ratings, propensity_model="p"),
                    Term(-1.0, label_model="e", propensity_model="p"),
                ],
            ),
        ]
    # autodebias
    return [
        Group("w1", batch.d_users, batch.d_items, d_scale, 1.0 / nd, [Term(1.0, label_model="e", propensity_model="p1")]),
        Group("w2", batch.b_users, batch.b_items, b_scale, 1.0 / nd, [Term(1.0, labels=batch.b_ratings, propensity_model="p2")]),
    ]


def _require(phi, family):
    phi = phi or {}
    missing = [name for name in REQUIRED_MODELS[family] if name not in phi]
    if missing:
        raise ContractError(f"{family} needs models {missing}")
    return phi


def _term_inputs(term, users, items, phi):
    labels = term.labels if term.label_model is None else phi[term.label_model].predict(users, items)
    prop = np.ones(len(users)) if term.propensity_model is None else phi[term.propensity_model].predict(users, items)
    return labels, prop


def _group_weights(groups, weights):
    out = []
    for g in groups:
        if weights is None:
            out.append(np.full(len(g.users), g.uniform_weight))
            continue
        if g.key not in weights:
            raise ContractError(f"missing weight block {g.key!r}")
        w = np.asarray(weights[g.key], dtype=np.float64).reshape(-1)
        if w.shape != (len(g.users),):
            raise ContractError(f"weight block {g.key!r} has {w.shape[0]} entries for {len(g.users)} samples")
        out.append(w)
    return out


def group_moments(groups, theta, phi, delta):
    """Per-sample moments ``a_j`` (contribution per unit weight) for each group."""
    moments = []
    for g in groups:
        s = theta.predict(g.users, g.items)
        a = np.zeros(len(g.users))
        for term in g.terms:
            labels, prop = _term_inputs(term, g.users, g.items, phi)
            a += term.sign * pointwise_loss(s, labels, delta) / prop
        moments.append(a)
    return moments


def evaluate_groups(groups, theta, phi, delta, weights=None, with_grad=True):
    """``sum_g scale_g * sum_j w_j * a_j`` and its gradient in the prediction model."""
    ws = _group_weights(groups, weights)
    value = 0.0
    grad = np.zeros(theta.num_params) if with_grad else None
    terms, tu, ti = [], [], []
    for g, w in zip(groups, ws):
        s = theta.predict(g.users, g.items)
        per = np.zeros(len(g.users))
        for term in g.terms:
            labels, prop = _term_inputs(term, g.users, g.items, phi)
            coef = g.scale * w * term.sign / prop
            per += coef * pointwise_loss(s, labels, delta)
            if with_grad:
                grad += loss_grad(theta, g.users, g.items, labels, coef, delta)[1]
        value += float(per.sum())
        terms.append(per)
        tu.append(g.users)
        ti.append(g.items)
    return LossValue(value, grad, np.concatenate(terms), np.concatenate(tu), np.concatenate(ti))


def mixed_second_directional(groups, theta, phi, v, delta):
    """``grad_phi ( grad_theta L(theta, phi) . v )`` for every phi model the groups use.

    Only propensities (dividing a term) and imputed labels depend on phi, so
    the result is a sum of weighted score gradients of those models.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (theta.num_params,):
        raise ContractError(f"direction has shape {v.shape}, expected ({theta.num_params},)")
    out = {}
    for g in groups:
        w = np.full(len(g.users), g.uniform_weight)
        s = theta.predict(g.users, g.items)
        q = score_directional(theta, g.users, g.items, v)
        for term in g.terms:
            labels, prop = _term_inputs(term, g.users, g.items, phi)
            c = g.scale * w * term.sign
            if term.propensity_model is not None:
                dprop = -q * loss_slope(s, labels, delta) * c / prop**2
                model = phi[term.propensity_model]
                grad = loss_grad(model, g.users, g.items, dprop, None, "linear")[1]
                out[term.propensity_model] = out.get(term.propensity_model, 0.0) + grad
            if term.label_model is not None:
                dlabel = q * loss_cross_slope(s, labels, delta) * c / prop
                model = phi[term.label_model]
                grad = loss_grad(model, g.users, g.items, dlabel, None, "linear")[1]
                out[term.label_model] = out.get(term.label_model, 0.0) + grad
    for name, model in (phi or {}).items():
        out.setdefault(name, np.zeros(model.num_params))
    return out


# --------------------------------------------------------------------------
# Public loss functions
# --------------------------------------------------------------------------


def _table_loss(table, theta, delta, with_grad=True):
    n = len(table)
    if n == 0:
        raise ContractError(f"{table.role} table is empty")
    s = theta.predict(table.users, table.items)
    per = pointwise_loss(s, table.ratings, delta) / n
    grad = None
    if with_grad:
        grad = loss_grad(theta, table.users, table.items, table.ratings, np.full(n, 1.0 / n), delta)[1]
    return LossValue(float(per.sum()), grad, per, table.users, table.items)


def uniform_loss(uniform, theta, delta="squared", with_grad=True):
    """Mean prediction error over the uniform table."""
    return _table_loss(uniform, theta, delta, with_grad)


def ideal_loss(truth, theta, delta="squared", with_grad=True):
    """Mean prediction error over every pair of a full-truth table."""
    if len(truth) != truth.num_users * truth.num_items:
        raise ContractError("the ideal loss needs a full-truth table covering every pair")
    return _table_loss(truth, theta, delta, with_grad)


def base_loss(kind, batch, theta, phi=None, delta="squared", uniform=None, truth=None, with_grad=True):
    """Unweighted estimator value (and prediction-model gradient) on ``batch``."""
    kind = EstimatorKind.parse(kind) if isinstance(kind, str) else kind
    if kind.balanced:
        raise ContractError("use balanced_loss for balanced estimators")
    if kind.family == "ideal":
        if truth is None:
            raise ContractError("ideal loss needs a full-truth table")
        return ideal_loss(truth, theta, delta, with_grad)
    if kind.family == "uniform":
        if uniform is None:
            raise ContractError("uniform loss needs a uniform table")
        return uniform_loss(uniform, theta, delta, with_grad)
    phi = _require(phi, kind.family)
    return evaluate_groups(build_groups(kind.family, batch), theta, phi, delta, None, with_grad)


def balanced_loss(kind, batch, weights, theta, phi=None, delta="squared", with_grad=True):
    """Reweighted estimator; ``weights`` maps ``"w"`` or ``"w1"``/``"w2"`` to per-sample weights."""
    kind = EstimatorKind.parse(kind) if isinstance(kind, str) else kind
    if kind.family not in WEIGHT_KEYS:
        raise ContractError(f"family {kind.family!r} has no balanced variant")
    phi = _require(phi, kind.family)
    for key, w in weights.items():
        if np.any(np.asarray(w) <= 0):
            raise ContractError(f"weights in block {key!r} must be positive")
    return evaluate_groups(build_groups(kind.family, batch), theta, phi, delta, weights, with_grad)


def dump_terms(loss, path):
    """Write per-sample contributions as CSV ``user,item,term``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user", "item", "term"])
        for u, i, t in zip(loss.term_users.tolist(), loss.term_items.tolist(), loss.terms.tolist()):
            writer.writerow([u, i, repr(t)])


# --------------------------------------------------------------------------
# Full-population estimators on arrays (observation mask form)
# --------------------------------------------------------------------------
# Arrays run over all pairs on the last axis; leading axes are replicates.


def naive_estimate(o, e):
    o = np.asarray(o, dtype=np.float64)
    return (o * e).sum(axis=-1) / o.sum(axis=-1)


def ips_estimate(o, e, p_hat):
    return np.mean(np.asarray(o, dtype=np.float64) * e / p_hat, axis=-1)


def dr_estimate(o, e, e_hat, p_hat):
    o = np.asarray(o, dtype=np.float64)
    return np.mean(e_hat + o * (e - e_hat) / p_hat, axis=-1)


def autodebias_estimate(o, e, e_hat, p1_hat, p2_hat):
    o = np.asarray(o, dtype=np.float64)
    return np.mean(e_hat / p1_hat + o * e / p2_hat, axis=-1)
