"""Variance-based (Sobol) sensitivity indices with Saltelli's paired matrices.

First-order indices use the estimator S_i = E[f(B) (f(A_B^i) - f(A))] / Var(Y);
pairwise closed indices use E[f(B_A^i) f(A_B^j) - f(A) f(B)] / Var(Y) minus both
first-order terms. A_B^i is A with column i taken from B.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc


@dataclass(frozen=True)
class SobolResult:
    names: tuple[str, ...]
    first_order: dict[str, float]
    second_order: dict[tuple[str, str], float]
    total_variance: float

    def ranking(self) -> list[str]:
        return sorted(self.names, key=lambda k: -self.first_order[k])


def sobol_indices(
    f: Callable[..., np.ndarray],
    ranges: Sequence[tuple[float, float]],
    n_samples: int,
    names: Sequence[str] | None = None,
    seed: int = 0,
    second_order: bool = True,
) -> SobolResult:
    """Estimate first- and second-order indices of ``f`` over independent uniform factors.

    ``f`` takes one array per factor and returns an array of outputs.
    """
    if n_samples < 64 or n_samples & (n_samples - 1):
        raise ValueError("n_samples must be a power of two and at least 64")
    d = len(ranges)
    if d < 1:
        raise ValueError("need at least one factor")
    names = tuple(names) if names is not None else tuple(f"x{i + 1}" for i in range(d))
    if len(names) != d:
        raise ValueError("one name per factor")
    lo = np.array([r[0] for r in ranges], dtype=np.float64)
    hi = np.array([r[1] for r in ranges], dtype=np.float64)
    if np.any(hi < lo):
        raise ValueError("each range must satisfy lo <= hi")
    u = qmc.Sobol(2 * d, scramble=True, seed=seed).random_base2(int(math.log2(n_samples)))
    a = lo + u[:, :d] * (hi - lo)
    b = lo + u[:, d:] * (hi - lo)

    def run(x: np.ndarray) -> np.ndarray:
        return np.asarray(f(*x.T), dtype=np.float64).reshape(len(x))

    fa, fb = run(a), run(b)
    var = float(np.var(np.concatenate([fa, fb])))
    if not var > 1e-300:
        raise ValueError("output variance is zero; indices are undefined")
    f_ab, f_ba = [], []
    for i in range(d):
        x = a.copy()
        x[:, i] = b[:, i]
        f_ab.append(run(x))
        if second_order:
            x = b.copy()
            x[:, i] = a[:, i]
            f_ba.append(run(x))
    s1 = {names[i]: float(np.mean(fb * (f_ab[i] - fa)) / var) for i in range(d)}
    s2: dict[tuple[str, str], float] = {}
    if second_order:
        cross = float(np.mean(fa) * np.mean(fb))
        for i in range(d):
            for j in range(i + 1, d):
                closed = (float(np.mean(f_ba[i] * f_ab[j])) - cross) / var
                s2[(names[i], names[j])] = closed - s1[names[i]] - s1[names[j]]
    return SobolResult(names, s1, s2, var)


def ishigami(x1, x2, x3, a: float = 7.0, b: float = 0.1):
    return np.sin(x1) + a * np.sin(x2) ** 2 + b * x3**4 * np.sin(x1)


def ishigami_first_order(a: float = 7.0, b: float = 0.1) -> tuple[float, float, float]:
    """Closed-form first-order indices of the Ishigami function on [-pi, pi]^3."""
    pi4 = math.pi**4
    v1 = 0.5 * (1 + b * pi4 / 5) ** 2
    v2 = a * a / 8
    total = v1 + v2 + 8 * b * b * pi4 * pi4 / 225
    return v1 / total, v2 / total, 0.0
