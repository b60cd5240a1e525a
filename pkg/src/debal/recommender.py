"""Scikit-learn style wrapper around the training loop.

``X`` is an integer array of shape ``(n, 2)`` holding ``(user, item)``
pairs and ``y`` the matching ratings.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import InteractionTable
from .estimators import EstimatorKind
from .exceptions import ContractError, ValidationError
from .metrics import auc
from .training import TrainConfig, TrainingData, init_state, train_full


def check_pairs(X, num_users=None, num_items=None):
    """Validate an ``(n, 2)`` array of non-negative integer ids."""
    X = check_array(X, dtype=None, ensure_2d=True)
    if X.shape[1] != 2:
        raise ValidationError(f"expected (user, item) pairs, got {X.shape[1]} columns")
    if not np.issubdtype(X.dtype, np.integer):
        if not np.all(np.equal(np.mod(X, 1), 0)):
            raise ValidationError("user and item ids must be integers")
        X = X.astype(np.int64)
    if X.min(initial=0) < 0:
        raise ValidationError("ids must be non-negative")
    if num_users is not None and X[:, 0].max(initial=-1) >= num_users:
        raise ValidationError(f"user id out of range for {num_users} users")
    if num_items is not None and X[:, 1].max(initial=-1) >= num_items:
        raise ValidationError(f"item id out of range for {num_items} items")
    return X.astype(np.int64, copy=False)


def _table(X, y, num_users, num_items, role, scale):
    X = check_pairs(X, num_users, num_items)
    y = check_array(y, ensure_2d=False, dtype=np.float64)
    if len(y) != len(X):
        raise ValidationError(f"{len(X)} pairs but {len(y)} ratings")
    return InteractionTable(num_users, num_items, X[:, 0], X[:, 1], y, role=role, scale=scale)


class BalancedRecommender(BaseEstimator):
    """Factor-model recommender trained with a (balanced) debiasing estimator.

    Parameters mirror :class:`~debal.training.TrainConfig`; ``method`` is one
    of ``mf``, ``ips``, ``dr``, ``autodebias`` with an optional ``bal-``
    prefix. Labels are expected already binarized when ``delta`` is
    ``"cross-entropy"``.
    """

    def __init__(
        self,
        method="bal-autodebias",
        dim=8,
        outer_iters=100,
        inner_steps=20,
        lam=2.0**-6,
        delta="cross-entropy",
        lr_theta=1.0,
        lr_phi=1e-2,
        lr_xi=1.0,
        wd_theta=1e-4,
        wd_phi=1e-4,
        wd_xi=1e-4,
        batch_b=256,
        batch_d=512,
        batch_u=64,
        patience=10,
        entropy_sign="max-entropy",
        seed=0,
    ):
        self.method = method
        self.dim = dim
        self.outer_iters = outer_iters
        self.inner_steps = inner_steps
        self.lam = lam
        self.delta = delta
        self.lr_theta = lr_theta
        self.lr_phi = lr_phi
        self.lr_xi = lr_xi
        self.wd_theta = wd_theta
        self.wd_phi = wd_phi
        self.wd_xi = wd_xi
        self.batch_b = batch_b
        self.batch_d = batch_d
        self.batch_u = batch_u
        self.patience = patience
        self.entropy_sign = entropy_sign
        self.seed = seed

    def _config(self):
        keys = set(TrainConfig.keys())
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in keys})

    def fit(self, X, y, X_uniform, y_uniform, X_val=None, y_val=None, n_users=None, n_items=None):
        """Train on biased ``(X, y)`` using the uniform sample for balancing/hypergradients."""
        kind = EstimatorKind.parse(self.method)
        config = self._config()
        X = check_pairs(X)
        pools = [X, check_pairs(X_uniform)] + ([check_pairs(X_val)] if X_val is not None else [])
        n_users = n_users if n_users is not None else 1 + max(int(p[:, 0].max(initial=0)) for p in pools)
        n_items = n_items if n_items is not None else 1 + max(int(p[:, 1].max(initial=0)) for p in pools)
        scale = (0.0, 1.0) if self.delta == "cross-entropy" else None
        biased = _table(X, y, n_users, n_items, "biased", scale)
        balance = _table(X_uniform, y_uniform, n_users, n_items, "uniform-balance", scale)
        validation = None
        if X_val is not None:
            if y_val is None:
                raise ContractError("X_val given without y_val")
            validation = _table(X_val, y_val, n_users, n_items, "uniform-validation", scale)
        state = init_state(kind, n_users, n_items, config)
        train_full(state, config, TrainingData(biased, balance, validation), kind)
        self.model_ = state.theta
        self.state_ = state
        self.history_ = list(state.history)
        self.n_users_ = n_users
        self.n_items_ = n_items
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_pairs(X, self.n_users_, self.n_items_)
        return self.model_.predict(X[:, 0], X[:, 1])

    def score(self, X, y, threshold=4.0):
        """AUC of predictions against labels (ratings binarized at ``threshold``)."""
        y = np.asarray(y, dtype=np.float64)
        labels = y if np.isin(y, (0.0, 1.0)).all() else (y >= threshold).astype(np.float64)
        return auc(self.predict(X), labels)
