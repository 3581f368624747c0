"""Per-node push-down benefit: a stylized cost function and a logistic predictor over its factors."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

FACTORS = ("cardinality_ratio", "factorized_cost", "tuple_dim_ratio", "depth_ratio")
# second-order terms kept by the predictor, all pairs with the cardinality ratio
INTERACTIONS = (("cardinality_ratio", "factorized_cost"), ("cardinality_ratio", "tuple_dim_ratio"),
                ("cardinality_ratio", "depth_ratio"))
FACTOR_RANGES = {
    "cardinality_ratio": (0.2, 4.0),
    "factorized_cost": (0.1, 10.0),
    "tuple_dim_ratio": (0.05, 1.0),
    "depth_ratio": (0.0, 1.0),
}
CHAIN_HEIGHT = 6


def node_benefit(cardinality_ratio, factorized_cost, tuple_dim_ratio, depth_ratio, height: int = CHAIN_HEIGHT):
    """Relative cost saving from pushing one unit down a chain of joins.

    The node sits ``depth_ratio * height`` levels below the root and every
    join above it multiplies the row count by ``cardinality_ratio``. Costs
    are in units of one row times the unit's raw input width, with lambda 1.
    Not pushed: raw columns travel to the root, where the unit runs once per
    root row. Pushed: the unit runs once per node row and its output, of
    relative width ``tuple_dim_ratio``, travels instead. Returns
    (cost_not_pushed - cost_pushed) / cost_not_pushed; negative means harmful.
    """
    cr = np.asarray(cardinality_ratio, dtype=np.float64)
    fc = np.asarray(factorized_cost, dtype=np.float64)
    tdr = np.asarray(tuple_dim_ratio, dtype=np.float64)
    levels = np.asarray(depth_ratio, dtype=np.float64) * height
    growth = cr**levels
    near_one = np.abs(cr - 1.0) < 1e-9
    safe = np.where(near_one, 2.0, cr)
    # rows summed over the node and every ancestor up to the root
    rows = np.where(near_one, levels + 1.0, (safe ** (levels + 1.0) - 1.0) / (safe - 1.0))
    before = fc * growth + rows
    after = fc + tdr * rows
    return (before - after) / before


def sample_factors(n: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    lo = np.array([FACTOR_RANGES[f][0] for f in FACTORS])
    hi = np.array([FACTOR_RANGES[f][1] for f in FACTORS])
    return lo + rng.random((n, len(FACTORS))) * (hi - lo)


def benefit_dataset(n: int = 500, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(factors, 0/1 beneficial labels) drawn uniformly over the factor ranges."""
    x = sample_factors(n, seed)
    y = (node_benefit(*x.T) > 0).astype(np.float64)
    return x, y


# ------------------------------------------------------------------ logistic


def design_matrix(x: np.ndarray, factors: Sequence[str] = FACTORS) -> tuple[np.ndarray, tuple[str, ...]]:
    """First-order columns for ``factors`` plus the kept interactions among them."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != len(FACTORS):
        raise ValueError(f"expected an (n, {len(FACTORS)}) factor matrix")
    idx = {f: i for i, f in enumerate(FACTORS)}
    cols, names = [], []
    for f in factors:
        cols.append(x[:, idx[f]])
        names.append(f)
    for a, b in INTERACTIONS:
        if a in factors and b in factors:
            cols.append(x[:, idx[a]] * x[:, idx[b]])
            names.append(f"{a}*{b}")
    return np.stack(cols, axis=1), tuple(names)


@dataclass(frozen=True)
class LogisticModel:
    terms: tuple[str, ...]
    factors: tuple[str, ...]
    weights: np.ndarray
    intercept: float
    mean: np.ndarray
    scale: np.ndarray

    def score(self, x: np.ndarray) -> np.ndarray:
        z, _ = design_matrix(np.atleast_2d(x), self.factors)
        return ((z - self.mean) / self.scale) @ self.weights + self.intercept

    def to_json(self) -> dict:
        return {
            "terms": list(self.terms), "factors": list(self.factors), "weights": self.weights.tolist(),
            "intercept": self.intercept, "mean": self.mean.tolist(), "scale": self.scale.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "LogisticModel":
        model = cls(tuple(d["terms"]), tuple(d["factors"]), np.array(d["weights"], dtype=np.float64),
                    float(d["intercept"]), np.array(d["mean"], dtype=np.float64), np.array(d["scale"], dtype=np.float64))
        if not (np.all(np.isfinite(model.weights)) and np.isfinite(model.intercept)):
            raise ValueError("benefit model has non-finite weights")
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "LogisticModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def sigmoid(t):
    t = np.asarray(t, dtype=np.float64)
    return np.where(t >= 0, 1.0 / (1.0 + np.exp(-np.abs(t))), np.exp(-np.abs(t)) / (1.0 + np.exp(-np.abs(t))))


def log_loss(params: np.ndarray, z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean log-loss of ``sigmoid(z @ w + b)`` and its gradient; params = [w..., b]."""
    w, b = params[:-1], params[-1]
    t = z @ w + b
    # log(1 + e^t) - y t, computed without overflow
    loss = float(np.mean(np.logaddexp(0.0, t) - y * t))
    r = (sigmoid(t) - y) / len(y)
    return loss, np.concatenate([z.T @ r, [r.sum()]])


def train_logistic(x: np.ndarray, y: np.ndarray, epochs: int = 2000, lr: float = 0.5,
                   factors: Sequence[str] = FACTORS) -> LogisticModel:
    """Full-batch gradient descent on standardized design columns, starting from zero."""
    y = np.asarray(y, dtype=np.float64)
    if len(y) < 50:
        raise ValueError("need at least 50 samples")
    if len(np.unique(y)) < 2:
        raise ValueError("labels contain a single class")
    raw, terms = design_matrix(x, tuple(factors))
    mean = raw.mean(axis=0)
    scale = raw.std(axis=0)
    scale[scale == 0] = 1.0
    z = (raw - mean) / scale
    params = np.zeros(z.shape[1] + 1)
    for _ in range(epochs):
        _, g = log_loss(params, z, y)
        params -= lr * g
    return LogisticModel(terms, tuple(factors), params[:-1].copy(), float(params[-1]), mean, scale)


def predict_benefit(x, model: LogisticModel) -> np.ndarray:
    """Probability that pushing at a node with factors ``x`` pays off."""
    return sigmoid(model.score(np.asarray(x, dtype=np.float64)))


def accuracy(model: LogisticModel, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((predict_benefit(x, model) > 0.5) == (np.asarray(y) > 0.5)))


def ablation(n: int = 500, seed: int = 0, train_frac: float = 0.8, epochs: int = 2000) -> dict[str, float]:
    """Held-out accuracy with all factors ("all") and with each factor dropped in turn."""
    x, y = benefit_dataset(n, seed)
    cut = int(round(n * train_frac))
    out = {"all": accuracy(train_logistic(x[:cut], y[:cut], epochs), x[cut:], y[cut:])}
    for f in FACTORS:
        keep = tuple(g for g in FACTORS if g != f)
        out[f] = accuracy(train_logistic(x[:cut], y[:cut], epochs, factors=keep), x[cut:], y[cut:])
    return out
