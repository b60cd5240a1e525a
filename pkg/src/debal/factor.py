"""Embedding-based scorers and their analytic derivatives.

A :class:`FactorModel` scores a pair as ``link(<P_u, Q_i> + b_u + b_i + b_0)``.
The same class backs the prediction model, the propensity and imputation
models, and the balancing-weight models; only the link and clip floor differ.

Flat parameter vectors use the order ``user_vectors`` (row-major),
``item_vectors`` (row-major), ``user_bias``, ``item_bias``, ``global_bias``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError, NumericError, ParseError

LINKS = ("identity", "sigmoid", "softplus")
OBJECTIVES = ("squared", "cross-entropy", "linear")
# sigmoid outputs are kept this far inside (0, 1) so saturated scores stay
# valid cross-entropy inputs; only |z| > ~34.5 is affected
SIGMOID_MARGIN = 1e-15


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


@dataclass
class FactorModel:
    user_vectors: np.ndarray
    item_vectors: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    global_bias: float = 0.0
    link: str = "identity"
    clip_floor: float = 0.0

    def __post_init__(self):
        self.user_vectors = np.asarray(self.user_vectors, dtype=np.float64)
        self.item_vectors = np.asarray(self.item_vectors, dtype=np.float64)
        self.user_bias = np.asarray(self.user_bias, dtype=np.float64).reshape(-1)
        self.item_bias = np.asarray(self.item_bias, dtype=np.float64).reshape(-1)
        self.global_bias = float(self.global_bias)
        if self.link not in LINKS:
            raise ContractError(f"unknown link {self.link!r}; expected one of {LINKS}")
        if self.clip_floor < 0:
            raise ContractError("clip_floor must be >= 0")
        M, d = self.user_vectors.shape
        N, d2 = self.item_vectors.shape
        if d2 != d or self.user_bias.shape != (M,) or self.item_bias.shape != (N,):
            raise ContractError(
                f"inconsistent shapes: P {self.user_vectors.shape}, Q {self.item_vectors.shape}, "
                f"b_u {self.user_bias.shape}, b_i {self.item_bias.shape}"
            )

    @property
    def num_users(self):
        return self.user_vectors.shape[0]

    @property
    def num_items(self):
        return self.item_vectors.shape[0]

    @property
    def dim(self):
        return self.user_vectors.shape[1]

    @property
    def num_params(self):
        return param_count(self.num_users, self.num_items, self.dim)

    def copy(self):
        return FactorModel(
            self.user_vectors.copy(),
            self.item_vectors.copy(),
            self.user_bias.copy(),
            self.item_bias.copy(),
            self.global_bias,
            self.link,
            self.clip_floor,
        )

    def _check_index(self, users, items):
        if len(users) and (users.min() < 0 or users.max() >= self.num_users):
            raise IndexError(f"user index out of range [0, {self.num_users})")
        if len(items) and (items.min() < 0 or items.max() >= self.num_items):
            raise IndexError(f"item index out of range [0, {self.num_items})")

    def raw(self, users, items):
        users = np.asarray(users, dtype=np.int64).reshape(-1)
        items = np.asarray(items, dtype=np.int64).reshape(-1)
        self._check_index(users, items)
        return (
            np.einsum("ij,ij->i", self.user_vectors[users], self.item_vectors[items])
            + self.user_bias[users]
            + self.item_bias[items]
            + self.global_bias
        )

    def _apply_link(self, z):
        if self.link == "identity":
            return z
        if self.link == "softplus":
            return softplus(z)
        s = np.clip(sigmoid(z), SIGMOID_MARGIN, 1.0 - SIGMOID_MARGIN)
        if self.clip_floor > 0:
            s = np.maximum(s, self.clip_floor)
        return s

    def _link_slope(self, z):
        """Derivative of the (clipped) link at ``z``; zero where the clip is active."""
        if self.link == "identity":
            return np.ones_like(z)
        s = sigmoid(z)
        if self.link == "softplus":
            return s
        slope = s * (1.0 - s)
        if self.clip_floor > 0:
            slope = np.where(s < self.clip_floor, 0.0, slope)
        return slope

    def predict(self, users, items):
        return self._apply_link(self.raw(users, items))

    def score(self, user, item):
        return float(self.predict([user], [item])[0])

    # -- flat parameter views ------------------------------------------------

    def flatten(self):
        return np.concatenate(
            [
                self.user_vectors.ravel(),
                self.item_vectors.ravel(),
                self.user_bias,
                self.item_bias,
                [self.global_bias],
            ]
        )

    def set_flat(self, vector):
        P, Q, bu, bi, b0 = split_params(vector, self.num_users, self.num_items, self.dim)
        self.user_vectors = P.copy()
        self.item_vectors = Q.copy()
        self.user_bias = bu.copy()
        self.item_bias = bi.copy()
        self.global_bias = float(b0[0])
        return self

    def with_flat(self, vector):
        return self.copy().set_flat(vector)

    def predict_all(self):
        M, N = self.num_users, self.num_items
        uu, ii = np.divmod(np.arange(M * N), N)
        return self.predict(uu, ii).reshape(M, N)


def param_count(M, N, d):
    return (M + N) * d + M + N + 1


def split_params(vector, M, N, d):
    """Views ``(P, Q, b_u, b_i, b_0)`` into a flat parameter vector."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (param_count(M, N, d),):
        raise ContractError(f"parameter vector has shape {vector.shape}, expected ({param_count(M, N, d)},)")
    a = M * d
    b = a + N * d
    P = vector[:a].reshape(M, d)
    Q = vector[a:b].reshape(N, d)
    bu = vector[b : b + M]
    bi = vector[b + M : b + M + N]
    b0 = vector[b + M + N :]
    return P, Q, bu, bi, b0


def unflatten(vector, M, N, d, link="identity", clip_floor=0.0):
    P, Q, bu, bi, b0 = split_params(vector, M, N, d)
    return FactorModel(P.copy(), Q.copy(), bu.copy(), bi.copy(), float(b0[0]), link, clip_floor)


def init_model(M, N, d, link="identity", seed=0, clip_floor=0.0):
    """Embeddings ~ N(0, (0.1 / sqrt(d))^2), biases zero."""
    if M < 1 or N < 1:
        raise ContractError("a factor model needs at least one user and one item")
    if d < 1:
        raise ContractError(f"latent dimension must be >= 1, got {d}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    scale = 0.1 / math.sqrt(d)
    return FactorModel(
        rng.normal(scale=scale, size=(M, d)),
        rng.normal(scale=scale, size=(N, d)),
        np.zeros(M),
        np.zeros(N),
        0.0,
        link=link,
        clip_floor=clip_floor,
    )


# -- per-sample losses -------------------------------------------------------


def pointwise_loss(score, target, objective):
    """Per-sample ``delta(target, score)``."""
    if objective == "squared":
        return (score - target) ** 2
    if objective == "cross-entropy":
        return -(target * np.log(score) + (1.0 - target) * np.log1p(-score))
    if objective == "linear":
        return target * score
    raise ContractError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")


def loss_slope(score, target, objective):
    """``d delta / d score``."""
    if objective == "squared":
        return 2.0 * (score - target)
    if objective == "cross-entropy":
        return (score - target) / (score * (1.0 - score))
    if objective == "linear":
        return np.asarray(target, dtype=np.float64) * np.ones_like(score)
    raise ContractError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")


def loss_cross_slope(score, target, objective):
    """``d^2 delta / (d score d target)``; used when the target comes from a model."""
    if objective == "squared":
        return np.full_like(score, -2.0)
    if objective == "cross-entropy":
        return -1.0 / (score * (1.0 - score))
    if objective == "linear":
        return np.ones_like(score)
    raise ContractError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")


def _check_domain(score, target, objective, users, items):
    if objective == "cross-entropy":
        bad = ~((score > 0.0) & (score < 1.0))
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            msg = f"cross-entropy needs scores in (0, 1); pair ({users[k]}, {items[k]}) scored {float(score[k])!r}"
            if not np.isfinite(score[k]):
                raise NumericError(msg, pair=(int(users[k]), int(items[k])))
            raise ContractError(msg)


def scatter_score_grad(model, users, items, dz, out=None):
    """Accumulate ``sum_j dz_j * d raw_j / d params`` into a flat vector."""
    grad = np.zeros(model.num_params) if out is None else out
    if len(users) == 0:
        return grad
    P, Q, bu, bi, b0 = split_params(grad, model.num_users, model.num_items, model.dim)
    np.add.at(P, users, dz[:, None] * model.item_vectors[items])
    np.add.at(Q, items, dz[:, None] * model.user_vectors[users])
    np.add.at(bu, users, dz)
    np.add.at(bi, items, dz)
    b0 += dz.sum()
    return grad


def loss_grad(model, users, items, targets, weights=None, objective="squared", l2=0.0):
    """Weighted loss ``sum_j w_j * delta(t_j, s_j)`` and its exact parameter gradient.

    ``objective="linear"`` gives ``sum_j w_j * t_j * s_j``, i.e. a weighted
    sum of scores; it is the building block for chain-rule products.
    ``l2`` adds ``0.5 * l2 * ||params||^2``.
    """
    users = np.asarray(users, dtype=np.int64).reshape(-1)
    items = np.asarray(items, dtype=np.int64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    weights = np.ones(len(users)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if not (len(users) == len(items) == len(targets) == len(weights)):
        raise ContractError("users, items, targets and weights must have equal length")
    if not np.isfinite(weights).all():
        raise ContractError("weights must be finite")

    value = 0.0
    grad = np.zeros(model.num_params)
    if len(users):
        z = model.raw(users, items)
        s = model._apply_link(z)
        _check_domain(s, targets, objective, users, items)
        if model.link == "sigmoid" and objective == "cross-entropy" and model.clip_floor == 0:
            # d delta / dz = s - t, avoids dividing by s(1 - s)
            dz = weights * (s - targets)
        else:
            dz = weights * loss_slope(s, targets, objective) * model._link_slope(z)
        per = weights * pointwise_loss(s, targets, objective)
        bad = ~(np.isfinite(per) & np.isfinite(dz))
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise NumericError(
                f"non-finite loss at pair ({users[k]}, {items[k]})", pair=(int(users[k]), int(items[k]))
            )
        value = float(per.sum())
        scatter_score_grad(model, users, items, dz, out=grad)
    if l2:
        theta = model.flatten()
        value += 0.5 * l2 * float(theta @ theta)
        grad += l2 * theta
    return value, grad


def score_directional(model, users, items, v):
    """Directional derivative ``d s_j / d params . v`` for each sample."""
    users = np.asarray(users, dtype=np.int64).reshape(-1)
    items = np.asarray(items, dtype=np.int64).reshape(-1)
    vP, vQ, vbu, vbi, vb0 = split_params(v, model.num_users, model.num_items, model.dim)
    if len(users) == 0:
        return np.zeros(0)
    z = model.raw(users, items)
    dz = (
        np.einsum("ij,ij->i", vP[users], model.item_vectors[items])
        + np.einsum("ij,ij->i", model.user_vectors[users], vQ[items])
        + vbu[users]
        + vbi[items]
        + vb0[0]
    )
    return model._link_slope(z) * dz


# -- checkpoints -------------------------------------------------------------


def _fmt(x):
    return repr(float(x))


def save_checkpoint(model, path):
    """Plain-text checkpoint: header ``FACTOR v1 M N d link clip`` then rows."""
    lines = [f"FACTOR v1 {model.num_users} {model.num_items} {model.dim} {model.link} {_fmt(model.clip_floor)}"]
    lines += [" ".join(_fmt(x) for x in row) for row in model.user_vectors]
    lines += [" ".join(_fmt(x) for x in row) for row in model.item_vectors]
    lines.append(" ".join(_fmt(x) for x in model.user_bias))
    lines.append(" ".join(_fmt(x) for x in model.item_bias))
    lines.append(_fmt(model.global_bias))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty checkpoint", line=1, path=path)
    head = lines[0].split()
    if len(head) != 7 or head[:2] != ["FACTOR", "v1"]:
        raise ParseError("header must read 'FACTOR v1 M N d link clip'", line=1, path=path)
    try:
        M, N, d = int(head[2]), int(head[3]), int(head[4])
        link, clip = head[5], float(head[6])
    except ValueError:
        raise ParseError("malformed checkpoint header", line=1, path=path) from None
    expected = 1 + M + N + 3
    if len(lines) != expected:
        raise ParseError(f"checkpoint has {len(lines)} lines, expected {expected}", path=path)

    def row(k, width):
        try:
            vals = [float(x) for x in lines[k].split()]
        except ValueError:
            raise ParseError("non-numeric entry", line=k + 1, path=path) from None
        if len(vals) != width:
            raise ParseError(f"expected {width} values, got {len(vals)}", line=k + 1, path=path)
        return vals

    P = [row(1 + u, d) for u in range(M)]
    Q = [row(1 + M + i, d) for i in range(N)]
    bu = row(1 + M + N, M)
    bi = row(2 + M + N, N)
    b0 = row(3 + M + N, 1)[0]
    return FactorModel(np.array(P).reshape(M, d), np.array(Q).reshape(N, d), bu, bi, b0, link, clip)
