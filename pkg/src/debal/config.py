"""Run configuration: INI file with ``[data]``, ``[run]`` and ``[train]`` sections.

Keys
----
``[data]``
    ``biased``, ``uniform``: table paths (relative paths fall back to
    ``$DEBAL_DATA_DIR``). ``format``: ``coat-matrix`` or ``tsv-triples``.
    ``fractions``: balance/validation/test shares of the uniform table
    (default ``0.05, 0.05, 0.90``). ``split_seed``: seed of that split
    (default 0). ``threshold``: positive-label cutoff (default 4).
``[run]``
    ``method``: ``mf``/``ips``/``dr``/``autodebias`` with optional ``bal-``
    prefix. ``seeds``: comma list. ``output_dir``. ``metrics``: comma list
    (``auc, ndcg@5, ndcg@10``).
``[train]``
    Any :class:`~debal.training.TrainConfig` field; ``lambda`` is accepted
    as an alias of ``lam``.

The training ``seed`` drives every random choice of a run: it is split
into child seeds for the prediction, propensity/imputation and weight
model initializations and for mini-batch sampling.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace

from .data import FORMATS, binarize, load_interactions, make_splits, resolve_path
from .estimators import EstimatorKind
from .exceptions import ContractError
from .training import TrainConfig

DEFAULT_METRICS = ("auc", "ndcg@5", "ndcg@10")
KEY_ALIASES = {"lambda": "lam", "d": "dim", "lr": "lr_theta", "wd": "wd_theta"}


@dataclass
class RunConfig:
    biased: str
    uniform: str
    format: str = "coat-matrix"
    fractions: tuple = (0.05, 0.05, 0.90)
    split_seed: int = 0
    threshold: float = 4.0
    method: str = "bal-autodebias"
    seeds: tuple = (0,)
    output_dir: str = "runs"
    metrics: tuple = DEFAULT_METRICS
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        EstimatorKind.parse(self.method)
        if self.format not in FORMATS:
            raise ContractError(f"format must be one of {FORMATS}")
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) <= 0:
            raise ContractError("fractions must be three positive shares summing to 1")
        unknown = [m for m in self.metrics if m not in DEFAULT_METRICS]
        if unknown:
            raise ContractError(f"unknown metrics {unknown}; expected a subset of {DEFAULT_METRICS}")
        if not self.seeds:
            raise ContractError("seeds must not be empty")

    def check_paths(self):
        for name in ("biased", "uniform"):
            p = resolve_path(getattr(self, name))
            if not p.exists():
                raise ContractError(f"{name} data not found: {getattr(self, name)} (also tried $DEBAL_DATA_DIR)")

    def with_train(self, **overrides):
        return replace(self, train=replace(self.train, **overrides))

    def load_splits(self):
        """Load, split and (for cross-entropy) binarize the data."""
        self.check_paths()
        biased = load_interactions(self.biased, self.format, role="biased")
        uniform = load_interactions(self.uniform, self.format, role="uniform")
        bundle = make_splits(biased, uniform, self.fractions, seed=self.split_seed)
        if self.train.delta == "cross-entropy":
            bundle = type(bundle)(
                binarize(bundle.biased, self.threshold),
                binarize(bundle.balance, self.threshold),
                binarize(bundle.validation, self.threshold),
                binarize(bundle.test, self.threshold),
                bundle.seed,
            )
        return bundle


def _floats(text):
    return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())


def _ints(text):
    return tuple(int(x) for x in text.replace(";", ",").split(",") if x.strip())


def coerce_train_value(key, text):
    """Parse one ``[train]`` value to the type of the matching field."""
    key = KEY_ALIASES.get(key, key)
    types = {f.name: f.type for f in fields(TrainConfig)}
    if key not in types:
        raise ContractError(f"unknown training key {key!r}")
    kind = types[key]
    if isinstance(text, str):
        text = text.strip()
        if "int" in kind:
            if text.lower() == "none" and "None" in kind:
                return key, None
            return key, int(float(text)) if "e" in text.lower() else int(text)
        if "float" in kind:
            if text.lower() == "none" and "None" in kind:
                return key, None
            return key, float(text)
    return key, text


def load_config(path, overrides=None):
    """Read an INI run config; ``overrides`` (flat ``key -> value``) win over the file."""
    parser = configparser.ConfigParser()
    p = resolve_path(path)
    if not p.exists():
        raise ContractError(f"config file not found: {path}")
    try:
        parser.read(p, encoding="utf-8")
    except configparser.Error as exc:
        raise ContractError(f"cannot parse {path}: {exc}") from None
    data = dict(parser["data"]) if parser.has_section("data") else {}
    run = dict(parser["run"]) if parser.has_section("run") else {}
    train = dict(parser["train"]) if parser.has_section("train") else {}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in ("biased", "uniform", "format", "fractions", "split_seed", "threshold"):
            data[key] = str(value)
        elif key in ("method", "seeds", "output_dir", "metrics"):
            run[key] = str(value)
        else:
            train[key] = str(value)
    return build_config(data, run, train)


def build_config(data, run, train):
    missing = [k for k in ("biased", "uniform") if k not in data]
    if missing:
        raise ContractError(f"[data] is missing {missing}")
    try:
        train_kwargs = dict(coerce_train_value(k, v) for k, v in train.items())
        if "threshold" in data:
            train_kwargs.setdefault("threshold", float(data["threshold"]))
        tc = TrainConfig(**train_kwargs)
        cfg = RunConfig(
            biased=data["biased"],
            uniform=data["uniform"],
            format=data.get("format", "coat-matrix"),
            fractions=_floats(data["fractions"]) if "fractions" in data else (0.05, 0.05, 0.90),
            split_seed=int(data.get("split_seed", 0)),
            threshold=float(data.get("threshold", 4.0)),
            method=run.get("method", "bal-autodebias"),
            seeds=_ints(run["seeds"]) if "seeds" in run else (tc.seed,),
            output_dir=run.get("output_dir", "runs"),
            metrics=tuple(m.strip() for m in run["metrics"].split(",")) if "metrics" in run else DEFAULT_METRICS,
            train=tc,
        )
    except (TypeError, ValueError) as exc:
        raise ContractError(f"bad config value: {exc}") from None
    return cfg
