"""Rating tables: loading, saving, splitting, binarization and synthetic worlds.

The canonical on-disk format is TSV triples with a one-line header::

    #users=290 items=300
    0	12	4
    0	41	2

Coat's dense ASCII matrices (one row per user, ``0`` = missing) are read with
``format="coat-matrix"``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import GenerationError, ParseError, SplitError, ValidationError

ROLES = ("biased", "uniform", "uniform-balance", "uniform-validation", "uniform-test", "full-truth")
FORMATS = ("tsv-triples", "coat-matrix")
DATA_DIR_ENV = "DEBAL_DATA_DIR"


@dataclass(frozen=True)
class InteractionTable:
    """Immutable set of observed ``(user, item, rating)`` triples.

    ``scale`` is the declared rating range ``(low, high)``; ``None`` means
    unchecked. Binarized tables carry ``scale=(0, 1)``.
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    role: str = "biased"
    scale: tuple[float, float] | None = None

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64).reshape(-1)
        items = np.asarray(self.items, dtype=np.int64).reshape(-1)
        ratings = np.asarray(self.ratings, dtype=np.float64).reshape(-1)
        if not (len(users) == len(items) == len(ratings)):
            raise ValidationError("users, items and ratings must have equal length")
        if self.num_users < 1 or self.num_items < 1:
            raise ValidationError("a table needs at least one user and one item")
        if self.role not in ROLES:
            raise ValidationError(f"unknown role {self.role!r}; expected one of {ROLES}")
        if len(users):
            bad = (users < 0) | (users >= self.num_users) | (items < 0) | (items >= self.num_items)
            if bad.any():
                k = int(np.flatnonzero(bad)[0])
                raise ValidationError(
                    f"record {k} has pair ({users[k]}, {items[k]}) outside "
                    f"{self.num_users} users x {self.num_items} items"
                )
            keys = users * self.num_items + items
            if len(np.unique(keys)) != len(keys):
                raise ValidationError("duplicate (user, item) pair in table")
            if not np.isfinite(ratings).all():
                raise ValidationError("non-finite rating")
            if self.scale is not None:
                lo, hi = self.scale
                if ratings.min() < lo or ratings.max() > hi:
                    raise ValidationError(f"rating outside declared scale [{lo}, {hi}]")
        for arr in (users, items, ratings):
            arr.flags.writeable = False
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "ratings", ratings)

    def __len__(self):
        return len(self.ratings)

    @property
    def is_binary(self):
        return self.scale == (0, 1) or self.scale == (0.0, 1.0)

    def subset(self, index, role=None):
        index = np.asarray(index, dtype=np.int64)
        return InteractionTable(
            self.num_users,
            self.num_items,
            self.users[index],
            self.items[index],
            self.ratings[index],
            role=role or self.role,
            scale=self.scale,
        )

    def with_role(self, role):
        return replace(self, role=role)

    def pairs(self):
        return np.column_stack([self.users, self.items])

    def labels(self, threshold=4.0):
        """Binary relevance labels; binarized tables are returned as is."""
        if self.is_binary:
            return self.ratings.copy()
        return (self.ratings >= threshold).astype(np.float64)


@dataclass(frozen=True)
class SplitBundle:
    biased: InteractionTable
    balance: InteractionTable
    validation: InteractionTable
    test: InteractionTable
    seed: int


def resolve_path(path):
    """Return ``path``, falling back to ``$DEBAL_DATA_DIR/path`` when relative and missing."""
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    base = os.environ.get(DATA_DIR_ENV)
    if base:
        alt = Path(base) / p
        if alt.exists():
            return alt
    return p


def _parse_header(line, path):
    fields = {}
    for token in line.lstrip("#").split():
        if "=" not in token:
            raise ParseError(f"bad header token {token!r}", line=1, path=path)
        key, value = token.split("=", 1)
        fields[key.strip()] = value.strip()
    try:
        num_users = int(fields["users"])
        num_items = int(fields["items"])
    except (KeyError, ValueError):
        raise ParseError("header must read '#users=M items=N'", line=1, path=path) from None
    scale = None
    if "scale" in fields:
        try:
            lo, hi = (float(x) for x in fields["scale"].split(","))
        except ValueError:
            raise ParseError("scale must read 'scale=low,high'", line=1, path=path) from None
        scale = (lo, hi)
    return num_users, num_items, scale


def _read_triples(path, role):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ParseError("missing '#users=M items=N' header", line=1, path=path)
    num_users, num_items, scale = _parse_header(lines[0], path)
    users, items, ratings = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}", line=lineno, path=path)
        try:
            users.append(int(parts[0]))
            items.append(int(parts[1]))
            ratings.append(float(parts[2]))
        except ValueError:
            raise ParseError(f"cannot parse {line!r}", line=lineno, path=path) from None
    return InteractionTable(num_users, num_items, users, items, ratings, role=role, scale=scale)


def _read_coat_matrix(path, role):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append([int(tok) for tok in line.split()])
            except ValueError:
                raise ParseError(f"non-integer entry in {line.strip()[:40]!r}", line=lineno, path=path) from None
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(
                    f"row has {len(rows[-1])} columns, expected {len(rows[0])}", line=lineno, path=path
                )
    if not rows:
        raise ParseError("empty matrix file", line=1, path=path)
    mat = np.asarray(rows, dtype=np.float64)
    users, items = np.nonzero(mat)
    return InteractionTable(mat.shape[0], mat.shape[1], users, items, mat[users, items], role=role)


def load_interactions(path, format="tsv-triples", role="biased"):
    """Load a table from ``path`` in one of :data:`FORMATS`."""
    path = resolve_path(path)
    if format == "tsv-triples":
        return _read_triples(path, role)
    if format == "coat-matrix":
        return _read_coat_matrix(path, role)
    raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")


def _format_rating(value):
    if float(value).is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(float(value))


def save_interactions(table, path):
    """Write ``table`` as TSV triples. Ratings use shortest round-trip formatting."""
    header = f"#users={table.num_users} items={table.num_items}"
    if table.scale is not None:
        header += f" scale={_format_rating(table.scale[0])},{_format_rating(table.scale[1])}"
    lines = [header]
    lines += [
        f"{u}\t{i}\t{_format_rating(r)}" for u, i, r in zip(table.users.tolist(), table.items.tolist(), table.ratings.tolist())
    ]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def split_uniform(uniform, fractions=(0.05, 0.05, 0.90), seed=0):
    """Partition a uniform table into balance / validation / test parts.

    Balance and validation sizes are ``floor(n * f)``; the remainder goes to test.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise SplitError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(uniform)
    n_bal = int(math.floor(n * fractions[0] + 1e-9))
    n_val = int(math.floor(n * fractions[1] + 1e-9))
    n_test = n - n_bal - n_val
    if min(n_bal, n_val, n_test) < 1:
        raise SplitError(f"{n} uniform records cannot give every part at least one record with {fractions}")
    perm = np.random.default_rng(seed).permutation(n)
    return SplitBundle(
        biased=None,
        balance=uniform.subset(np.sort(perm[:n_bal]), role="uniform-balance"),
        validation=uniform.subset(np.sort(perm[n_bal : n_bal + n_val]), role="uniform-validation"),
        test=uniform.subset(np.sort(perm[n_bal + n_val :]), role="uniform-test"),
        seed=seed,
    )


def make_splits(biased, uniform, fractions=(0.05, 0.05, 0.90), seed=0):
    return replace(split_uniform(uniform, fractions, seed), biased=biased)


def binarize(table, threshold=4.0):
    """Map ratings to 1 when ``>= threshold`` else 0."""
    binary = (table.ratings >= threshold).astype(np.float64)
    return InteractionTable(
        table.num_users, table.num_items, table.users, table.items, binary, role=table.role, scale=(0, 1)
    )


# --------------------------------------------------------------------------
# Synthetic confounded worlds
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Generative settings for :func:`generate_confounded`.

    Propensity families:

    * ``logistic``: ``p~ = sigmoid(logit(base) + slope * z + s * (2h - 1))``
    * ``linear``:   ``p~ = base + slope * z + s * (2h - 1)``

    where ``z`` is the standardized low-rank rating mean, ``h ~ Bernoulli(0.5)``
    is the hidden confounder and ``s`` the confound strength. Ratings are
    ``mean + error_shift * h + rating_noise * N(0, 1)``; errors are measured
    against the confounder-free mean with the squared loss.
    """

    num_users: int = 30
    num_items: int = 40
    rank: int = 3
    confound_strength: float = 0.0
    propensity_family: str = "logistic"
    base_propensity: float = 0.2
    propensity_slope: float = 1.0
    error_shift: float = 1.0
    rating_noise: float = 0.5
    uniform_size: int = 100
    min_propensity: float = 1e-3

    @classmethod
    def one_stratum(cls, num_users=20, num_items=20, confound_strength=0.3):
        """Every pair shares ``p~ in {0.8, 0.2}`` and ``e = h``."""
        return cls(
            num_users=num_users,
            num_items=num_items,
            rank=1,
            confound_strength=confound_strength,
            propensity_family="linear",
            base_propensity=0.5,
            propensity_slope=0.0,
            error_shift=1.0,
            rating_noise=0.0,
            uniform_size=min(50, num_users * num_items),
        )


@dataclass(frozen=True)
class SyntheticWorld:
    """A fully known world; arrays are ``(num_users, num_items)`` unless noted."""

    num_users: int
    num_items: int
    confounder: np.ndarray
    nominal_propensity: np.ndarray
    true_propensity: np.ndarray
    full_ratings: np.ndarray
    confound_strength: float
    propensity_given_h: np.ndarray = field(repr=False)  # (2, M, N)
    rating_mean: np.ndarray = field(repr=False)
    reference_prediction: np.ndarray = field(repr=False)
    error_shift: float = 1.0
    rating_noise: float = 0.0

    def error_mean_given_h(self):
        """``E[e | x, h]`` for ``h = 0, 1`` under the squared loss vs the reference."""
        shift = np.array([0.0, self.error_shift]).reshape(2, 1, 1)
        base = self.rating_mean - self.reference_prediction
        return (base[None] + shift) ** 2 + self.rating_noise**2

    def imputation_oracle(self):
        """``g = E[e | x]``, averaging the confounder out."""
        return self.error_mean_given_h().mean(axis=0)

    def full_errors(self):
        return (self.full_ratings - self.reference_prediction) ** 2

    def sample_observed(self, rng):
        """Observation mask for the world's fixed confounder realization."""
        return rng.random(self.true_propensity.shape) < self.true_propensity

    def resample(self, rng, size=None):
        """Draw fresh ``(h, o, e, p~)`` from the generative model.

        ``size`` prepends a replicate axis.
        """
        shape = self.true_propensity.shape if size is None else (size,) + self.true_propensity.shape
        h = (rng.random(shape) < 0.5).astype(np.int8)
        p_true = np.where(h == 1, self.propensity_given_h[1], self.propensity_given_h[0])
        o = rng.random(shape) < p_true
        noise = rng.standard_normal(shape) * self.rating_noise if self.rating_noise else 0.0
        ratings = self.rating_mean + self.error_shift * h + noise
        e = (ratings - self.reference_prediction) ** 2
        return h, o, e, p_true


def _propensity(cfg, z, h):
    tilt = cfg.confound_strength * (2.0 * h - 1.0)
    if cfg.propensity_family == "logistic":
        b = cfg.base_propensity
        if not 0.0 < b < 1.0:
            raise GenerationError(f"base_propensity must lie in (0, 1), got {b}")
        logit = math.log(b / (1.0 - b)) + cfg.propensity_slope * z + tilt
        return 1.0 / (1.0 + np.exp(-logit))
    if cfg.propensity_family == "linear":
        return cfg.base_propensity + cfg.propensity_slope * z + tilt
    raise GenerationError(f"unknown propensity family {cfg.propensity_family!r}")


def generate_confounded(config=None, seed=0):
    """Draw a world plus one biased table (observed with ``p~``) and a uniform table.

    Returns ``(world, biased, uniform)``.
    """
    cfg = config or SyntheticConfig()
    if cfg.num_users < 1 or cfg.num_items < 1:
        raise GenerationError("num_users and num_items must be positive")
    if cfg.confound_strength < 0:
        raise GenerationError("confound_strength must be >= 0")
    rng = np.random.default_rng(seed)
    M, N = cfg.num_users, cfg.num_items
    k = max(cfg.rank, 1)
    mean = rng.normal(size=(M, k)) @ rng.normal(size=(N, k)).T / math.sqrt(k)
    sd = mean.std()
    z = (mean - mean.mean()) / sd if sd > 0 else np.zeros_like(mean)

    p_given_h = np.stack([_propensity(cfg, z, 0.0), _propensity(cfg, z, 1.0)])
    lo = cfg.min_propensity
    if not np.all((p_given_h > lo) & (p_given_h < 1.0 - lo)):
        raise GenerationError(
            f"true propensity leaves ({lo}, {1 - lo}): range [{p_given_h.min():.4g}, {p_given_h.max():.4g}]"
        )
    if cfg.confound_strength == 0:
        nominal = p_given_h[0].copy()
    else:
        nominal = p_given_h.mean(axis=0)

    h = (rng.random((M, N)) < 0.5).astype(np.int8)
    p_true = np.where(h == 1, p_given_h[1], p_given_h[0])
    noise = rng.standard_normal((M, N)) * cfg.rating_noise
    ratings = mean + cfg.error_shift * h + noise

    world = SyntheticWorld(
        num_users=M,
        num_items=N,
        confounder=h,
        nominal_propensity=nominal,
        true_propensity=p_true,
        full_ratings=ratings,
        confound_strength=float(cfg.confound_strength),
        propensity_given_h=p_given_h,
        rating_mean=mean,
        reference_prediction=mean.copy(),
        error_shift=cfg.error_shift,
        rating_noise=cfg.rating_noise,
    )

    observed = world.sample_observed(rng)
    bu, bi = np.nonzero(observed)
    biased = InteractionTable(M, N, bu, bi, ratings[bu, bi], role="biased")

    n_uniform = min(cfg.uniform_size, M * N)
    flat = np.sort(rng.choice(M * N, size=n_uniform, replace=False))
    uu, ui = np.divmod(flat, N)
    uniform = InteractionTable(M, N, uu, ui, ratings[uu, ui], role="uniform")
    return world, biased, uniform


def full_truth_table(world):
    """All ``M * N`` pairs with their complete ratings."""
    uu, ii = np.divmod(np.arange(world.num_users * world.num_items), world.num_items)
    return InteractionTable(world.num_users, world.num_items, uu, ii, world.full_ratings[uu, ii], role="full-truth")
