"""Bi-level propensity/imputation training and alternating balanced training.

:func:`train_phi` fits the propensity and imputation models through exact
hypergradients of the uniform-data loss after an assumed prediction-model
step, without touching the prediction model. :func:`train_full` alternates
that phase with inner loops that update the balancing-weight models and then
the prediction model.
"""

from __future__ import annotations

import logging
from collections import Counter
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .balancing import ENTROPY_SIGNS, predict_weights, weight_loss
from .estimators import (
    Batch,
    EstimatorKind,
    balanced_loss,
    base_loss,
    build_groups,
    mixed_second_directional,
    uniform_loss,
)
from .exceptions import ContractError, NumericError, UndefinedMetricError
from .factor import init_model
from .metrics import evaluate

log = logging.getLogger(__name__)

RULES = ("plain-sgd", "adam")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


# --------------------------------------------------------------------------
# Optimizer rules
# --------------------------------------------------------------------------


@dataclass
class Moments:
    first: np.ndarray
    second: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def optimizer_step(moments, grad, params, rule, lr, weight_decay=0.0):
    """Return ``(delta, new_moments)``; the caller adds ``delta`` to ``params``.

    Weight decay is folded into the gradient (``grad + wd * params``) for
    both rules. Adam uses bias-corrected moments with betas (0.9, 0.999) and
    eps 1e-8.
    """
    g = np.asarray(grad, dtype=np.float64)
    if weight_decay:
        g = g + weight_decay * np.asarray(params, dtype=np.float64)
    if rule == "plain-sgd":
        return -lr * g, moments
    if rule != "adam":
        raise ContractError(f"unknown optimizer rule {rule!r}; expected one of {RULES}")
    b1, b2 = ADAM_BETAS
    t = moments.step + 1
    m = b1 * moments.first + (1.0 - b1) * g
    v = b2 * moments.second + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    return -lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS), Moments(m, v, t)


# --------------------------------------------------------------------------
# Configuration and state
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    outer_iters: int = 100
    inner_steps: int = 20
    phi_steps: int | None = None
    dim: int = 8
    delta: str = "cross-entropy"
    lr_theta: float = 1.0
    lr_phi: float = 1e-2
    lr_xi: float = 1.0
    assumed_lr: float | None = None
    wd_theta: float = 1e-4
    wd_phi: float = 1e-4
    wd_xi: float = 1e-4
    rule_theta: str = "plain-sgd"
    rule_phi: str = "adam"
    rule_xi: str = "plain-sgd"
    lam: float = 2.0**-6
    entropy_sign: str = "max-entropy"
    batch_b: int = 256
    batch_d: int = 512
    batch_u: int = 64
    patience: int = 10
    propensity_floor: float = 0.05
    threshold: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.outer_iters < 1 or self.inner_steps < 1:
            raise ContractError("outer_iters and inner_steps must be >= 1")
        if self.phi_steps is not None and self.phi_steps < 0:
            raise ContractError("phi_steps must be >= 0")
        for name in ("lr_theta", "lr_phi", "lr_xi"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be > 0")
        if self.assumed_lr is not None and self.assumed_lr < 0:
            raise ContractError("assumed_lr must be >= 0")
        for name in ("batch_b", "batch_d", "batch_u", "dim"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        for name in ("rule_theta", "rule_phi", "rule_xi"):
            if getattr(self, name) not in RULES:
                raise ContractError(f"{name} must be one of {RULES}")
        if self.lam < 0:
            raise ContractError("lam must be >= 0")
        if self.entropy_sign not in ENTROPY_SIGNS:
            raise ContractError(f"entropy_sign must be one of {tuple(ENTROPY_SIGNS)}")
        if self.delta not in ("squared", "cross-entropy"):
            raise ContractError("delta must be 'squared' or 'cross-entropy'")

    @property
    def n_phi_steps(self):
        return self.inner_steps if self.phi_steps is None else self.phi_steps

    @property
    def step_for_assumed_update(self):
        return self.lr_theta if self.assumed_lr is None else self.assumed_lr

    @classmethod
    def keys(cls):
        return tuple(f.name for f in fields(cls))

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainingData:
    biased: object
    balance: object
    validation: object = None

    def __post_init__(self):
        shapes = {(t.num_users, t.num_items) for t in (self.biased, self.balance, self.validation) if t is not None}
        if len(shapes) != 1:
            raise ContractError(f"tables disagree on (users, items): {sorted(shapes)}")
        if len(self.balance) == 0:
            raise ContractError("the uniform balance table is empty")

    @property
    def num_users(self):
        return self.biased.num_users

    @property
    def num_items(self):
        return self.biased.num_items


@dataclass
class TrainState:
    theta: object
    phi: dict
    xi: dict
    moments: dict
    rng: np.random.Generator
    steps: Counter = field(default_factory=Counter)
    passes: Counter = field(default_factory=Counter)
    history: list = field(default_factory=list)
    best_epoch: int | None = None
    best_score: float | None = None
    trace: list | None = None

    def models(self):
        out = {"theta": self.theta}
        out.update({f"phi.{k}": m for k, m in self.phi.items()})
        out.update({f"xi.{k}": m for k, m in self.xi.items()})
        return out

    def snapshot(self):
        return (self.theta.copy(), {k: m.copy() for k, m in self.phi.items()}, {k: m.copy() for k, m in self.xi.items()})

    def restore(self, snap):
        self.theta, self.phi, self.xi = snap


def _label_link(delta):
    return "sigmoid" if delta == "cross-entropy" else "identity"


def init_state(kind, num_users, num_items, config, with_weights=None):
    """Fresh models for ``kind``; randomness is split from ``config.seed`` as
    ``[theta, phi, xi, sampling]`` child seeds."""
    kind = EstimatorKind.parse(kind) if isinstance(kind, str) else kind
    ss_theta, ss_phi, ss_xi, ss_sample = np.random.SeedSequence(config.seed).spawn(4)
    d = config.dim
    theta = init_model(num_users, num_items, d, _label_link(config.delta), np.random.default_rng(ss_theta))
    phi = {}
    phi_rngs = ss_phi.spawn(3)
    for k, name in enumerate(kind.required_models):
        rng = np.random.default_rng(phi_rngs[k])
        if name == "e":
            phi[name] = init_model(num_users, num_items, d, _label_link(config.delta), rng)
        else:
            phi[name] = init_model(num_users, num_items, d, "sigmoid", rng, clip_floor=config.propensity_floor)
    xi = {}
    keys = kind.weight_keys if with_weights is None else with_weights
    xi_rngs = ss_xi.spawn(2)
    for k, name in enumerate(keys):
        xi[name] = init_model(num_users, num_items, d, "sigmoid", np.random.default_rng(xi_rngs[k]))
    moments = {name: Moments.zeros(m.num_params) for name, m in [("theta", theta)] + [
        (f"phi.{k}", m) for k, m in phi.items()] + [(f"xi.{k}", m) for k, m in xi.items()]}
    return TrainState(theta, phi, xi, moments, np.random.default_rng(ss_sample))


def _apply(state, name, model, grad, rule, lr, wd):
    params = model.flatten()
    delta, state.moments[name] = optimizer_step(state.moments[name], grad, params, rule, lr, wd)
    new = params + delta
    if not np.isfinite(new).all():
        raise NumericError(
            f"non-finite parameters in {name} at step {state.steps[name]}",
            model=name,
            step=int(state.steps[name]),
            grad_norm=float(np.linalg.norm(grad)) if np.isfinite(grad).all() else float("nan"),
        )
    model.set_flat(new)
    state.steps[name] += 1
    if state.trace is not None:
        state.trace.append(name)


# --------------------------------------------------------------------------
# Bi-level step
# --------------------------------------------------------------------------


def _family(kind):
    return (EstimatorKind.parse(kind) if isinstance(kind, str) else kind).family


def assumed_update(theta, phi, batch, lr, family, delta="cross-entropy"):
    """``theta - lr * grad_theta L_B(theta, phi; batch)`` as a new model; ``theta`` is untouched."""
    if lr < 0:
        raise ContractError("assumed-update step must be >= 0")
    grad = base_loss(_family(family), batch, theta, phi, delta).grad_theta
    if not np.isfinite(grad).all():
        raise NumericError("non-finite lower-level gradient", batch_size=len(batch.b_users))
    return theta.with_flat(theta.flatten() - lr * grad)


def hypergradient(theta, phi, batch, uniform_batch, lr, family, delta="cross-entropy"):
    """Exact ``grad_phi L_U(theta'(phi))`` for ``theta' = theta - lr * grad_theta L_B``.

    Equals ``-lr * grad_phi (grad_theta L_B . v)`` with ``v = grad L_U(theta')``.
    """
    fam = _family(family)
    if lr == 0:
        return {k: np.zeros(m.num_params) for k, m in phi.items()}
    theta_next = assumed_update(theta, phi, batch, lr, fam, delta)
    v = uniform_loss(uniform_batch, theta_next, delta).grad_theta
    mixed = mixed_second_directional(build_groups(fam, batch), theta, phi, v, delta)
    return {k: -lr * g for k, g in mixed.items()}


def _sample_uniform(table, rng, size):
    n = min(size, len(table))
    return table.subset(np.sort(rng.choice(len(table), size=n, replace=False)))


@contextmanager
def _step_context(state, model="theta"):
    """Tag a ``NumericError`` raised while computing a loss with the model and step."""
    try:
        yield
    except NumericError as err:
        err.context.setdefault("model", model)
        err.context.setdefault("step", int(state.steps[model]))
        raise


def train_phi(state, config, data, kind):
    """Run ``phi_steps`` hypergradient steps on the propensity/imputation models."""
    kind = EstimatorKind.parse(kind) if isinstance(kind, str) else kind
    if not state.phi:
        return state
    for _ in range(config.n_phi_steps):
        batch = Batch.sample(data.biased, state.rng, config.batch_b, config.batch_d)
        u_batch = _sample_uniform(data.balance, state.rng, config.batch_u)
        with _step_context(state, f"phi.{min(state.phi)}"):
            grads = hypergradient(
                state.theta, state.phi, batch, u_batch, config.step_for_assumed_update, kind.family, config.delta
            )
        state.passes["theta.lower"] += 1
        state.passes["theta.upper"] += 1
        state.passes["phi.backward_on_backward"] += 1
        for name in sorted(state.phi):
            _apply(state, f"phi.{name}", state.phi[name], grads[name], config.rule_phi, config.lr_phi, config.wd_phi)
    return state


# --------------------------------------------------------------------------
# Alternating training
# --------------------------------------------------------------------------


def _validation_metrics(state, data, config):
    if data.validation is None:
        return {}
    try:
        return evaluate(state.theta, data.validation, threshold=config.threshold)
    except UndefinedMetricError:
        return {}


def _inner_losses(state, config, kind, batch, u_batch):
    if not kind.balanced:
        return base_loss(kind, batch, state.theta, state.phi, config.delta), None
    wl = weight_loss(
        kind, state.xi, batch, state.theta, state.phi, u_batch, config.lam, config.entropy_sign, config.delta
    )
    state.passes["xi.forward_backward"] += 1
    for name in sorted(state.xi):
        _apply(state, f"xi.{name}", state.xi[name], wl.grads[name], config.rule_xi, config.lr_xi, config.wd_xi)
    weights = {k: wb.normalized for k, wb in predict_weights(kind, state.xi, batch).items()}
    state.passes["xi.forward"] += 1
    return balanced_loss(kind, batch, weights, state.theta, state.phi, config.delta), wl


def train_full(state, config, data, kind, callback=None):
    """Alternate phi training with inner (weight model, prediction model) steps.

    The returned state holds the models from the outer iteration with the
    best validation AUC (the last one when there is no validation table).
    ``state.history`` has one record per outer iteration.
    """
    kind = EstimatorKind.parse(kind) if isinstance(kind, str) else kind
    missing = [k for k in kind.required_models if k not in state.phi]
    if missing:
        raise ContractError(f"{kind.method} needs phi models {missing}")
    if kind.balanced:
        missing = [k for k in kind.weight_keys if k not in state.xi]
        if missing:
            raise ContractError(f"{kind.method} needs weight models {missing}")

    best = None
    stale = 0
    for t in range(config.outer_iters):
        train_phi(state, config, data, kind)
        losses, wlosses, gaps = [], [], []
        for _ in range(config.inner_steps):
            batch = Batch.sample(data.biased, state.rng, config.batch_b, config.batch_d)
            u_batch = _sample_uniform(data.balance, state.rng, config.batch_u)
            with _step_context(state):
                loss, wl = _inner_losses(state, config, kind, batch, u_batch)
            if wl is not None:
                wlosses.append(wl.value)
                gaps.append(wl.gap)
            state.passes["theta.forward_backward"] += 1
            _apply(state, "theta", state.theta, loss.grad_theta, config.rule_theta, config.lr_theta, config.wd_theta)
            losses.append(loss.value)

        metrics = _validation_metrics(state, data, config)
        record = {
            "t": t,
            "train_loss": float(np.mean(losses)),
            "weight_loss": float(np.mean(wlosses)) if wlosses else float("nan"),
            "gap": float(np.mean(gaps)) if gaps else float("nan"),
            "uniform_loss": uniform_loss(data.balance, state.theta, config.delta, with_grad=False).value,
            "val_auc": metrics.get("auc", float("nan")),
            "val_ndcg@5": metrics.get("ndcg@5", float("nan")),
            "val_ndcg@10": metrics.get("ndcg@10", float("nan")),
        }
        state.history.append(record)
        if callback is not None:
            callback(record)
        log.debug("outer %d: %s", t, record)

        score = metrics.get("auc")
        if score is None:
            best = None
            state.best_epoch = t
            continue
        if best is None or score > state.best_score:
            best = state.snapshot()
            state.best_score = score
            state.best_epoch = t
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best is not None:
        state.restore(best)
    return state


RUNLOG_HEADER = ("t", "train_loss", "weight_loss", "gap", "uniform_loss", "val_auc", "val_ndcg@5", "val_ndcg@10")
