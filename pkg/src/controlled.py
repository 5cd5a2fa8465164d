"""
Controlled single-head study of attention capture.

Gaussian tokens X ~ N(mu, 1), projections W_Q = -w I and W_K = w I. The
attacker shifts token 0 by -sign(mu) * eps on every feature and wins when
at least a success_fraction of the queries put >= attention_threshold of
their weight on key 0. The minimum such eps is found by bisection.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.metrics import silhouette_score as sk_silhouette_score

from src.attention import scaled_logits
from src.exceptions import ConfigError, ShapeError, UsageError
from src.logging_config import get_sweep_logger, log_execution_time
from src.seeding import stream
from src.tensor import Tensor, matmul, softmax_lastdim, transpose

logger = logging.getLogger(__name__)

AXES = ("mu", "w", "d_k")


@dataclass
class ControlledConfig:
    """One point of the controlled study plus the search settings."""
    mu: float = 1.0
    w: float = 1.0
    d_k: int = 64
    n: int = 64
    attention_threshold: float = 0.99
    success_fraction: float = 0.95
    tolerance: float = 1e-3
    scaled: bool = True
    upper_start: float = 64.0
    upper_cap: float = 4096.0

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError(f"n must be >= 2 (a single token attends to itself), got {self.n}")
        if self.d_k < 1:
            raise ConfigError(f"d_k must be >= 1, got {self.d_k}")
        if self.w < 0:
            raise ConfigError(f"w must be >= 0, got {self.w}")
        for name in ("attention_threshold", "success_fraction"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must be in (0, 1), got {value}")
        if self.tolerance <= 0:
            raise ConfigError(f"tolerance must be positive, got {self.tolerance}")
        if not 0 < self.upper_start <= self.upper_cap:
            raise ConfigError("bisection bounds need 0 < upper_start <= upper_cap")


@dataclass
class SweepGrid:
    """Axis values of the sweep; every other setting comes from base."""
    mu: List[float] = field(default_factory=lambda: [0.1, 0.5, 1.0])
    w: List[float] = field(default_factory=lambda: [1.0, 2.0, 4.0])
    d_k: List[int] = field(default_factory=lambda: [16, 64, 256])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    base: ControlledConfig = field(default_factory=ControlledConfig)

    def __post_init__(self):
        for axis in AXES + ("seeds",):
            if not getattr(self, axis):
                raise ConfigError(f"controlled grid axis {axis!r} is empty")

    def cells(self) -> List[ControlledConfig]:
        return [replace(self.base, mu=mu, w=w, d_k=d_k)
                for mu, w, d_k in itertools.product(self.mu, self.w, self.d_k)]

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class EpsilonResult:
    epsilon: float
    attained: bool


# ============================================================================
# SINGLE CELL
# ============================================================================

def sample_inputs(config: ControlledConfig, seed: int) -> np.ndarray:
    """(n, d_k) tokens with i.i.d. N(mu, 1) features."""
    rng = stream(seed, "controlled", "inputs", config.n, config.d_k)
    return config.mu + rng.standard_normal((config.n, config.d_k))


def perturbation_sign(mu: float) -> float:
    """Direction of the shift applied to token 0 (-1 for mu >= 0)."""
    return 1.0 if mu < 0 else -1.0


def project(X: np.ndarray, w: float) -> Tuple[np.ndarray, np.ndarray]:
    """(P_Q, P_K) = (X W_Q, X W_K) with W_Q = -w I, W_K = w I."""
    return -w * X, w * X


def controlled_attention(X: np.ndarray, config: ControlledConfig) -> np.ndarray:
    """Row-stochastic weights A; A[j][i] is query j attending to key i."""
    p_q, p_k = project(X, config.w)
    if config.scaled:
        logits = scaled_logits(Tensor(p_q), Tensor(p_k))
    else:
        logits = matmul(Tensor(p_q), transpose(Tensor(p_k)))
    return softmax_lastdim(logits).data


def perturb(X: np.ndarray, epsilon: float, mu: float) -> np.ndarray:
    adversarial = np.array(X, dtype=np.float64)
    adversarial[0] += perturbation_sign(mu) * epsilon
    return adversarial


def controlled_attack_success(X: np.ndarray, epsilon: float, config: ControlledConfig) -> bool:
    """True when enough queries attend to the perturbed token 0."""
    if epsilon < 0:
        raise UsageError(f"epsilon must be >= 0, got {epsilon}")
    X = np.asarray(X, dtype=np.float64)
    if X.shape != (config.n, config.d_k):
        raise ShapeError(f"inputs {X.shape} do not match (n, d_k) = {(config.n, config.d_k)}")
    weights = controlled_attention(perturb(X, epsilon, config.mu), config)
    captured = np.mean(weights[:, 0] >= config.attention_threshold)
    return bool(captured >= config.success_fraction)


def min_epsilon_bisect(config: ControlledConfig, seed: int) -> EpsilonResult:
    """
    Smallest eps (to within tolerance) for which the attack succeeds.

    The upper bound starts at upper_start and doubles up to upper_cap;
    if even the cap fails the result is marked unattained (eps = inf).
    """
    X = sample_inputs(config, seed)
    if controlled_attack_success(X, 0.0, config):
        return EpsilonResult(epsilon=0.0, attained=True)

    upper = config.upper_start
    while not controlled_attack_success(X, upper, config):
        if upper >= config.upper_cap:
            return EpsilonResult(epsilon=math.inf, attained=False)
        upper = min(upper * 2.0, config.upper_cap)

    lower = 0.0
    while upper - lower > config.tolerance:
        middle = 0.5 * (lower + upper)
        if controlled_attack_success(X, middle, config):
            upper = middle
        else:
            lower = middle
    return EpsilonResult(epsilon=upper, attained=True)


# ============================================================================
# SWEEP
# ============================================================================

def _cell_rows(config: ControlledConfig, seeds: Sequence[int]) -> List[Dict]:
    results = [min_epsilon_bisect(config, seed) for seed in seeds]
    base = {"mu": config.mu, "w": config.w, "d_k": config.d_k, "n": config.n}
    rows = [
        {**base, "seed_or_median": str(seed), "epsilon_star": r.epsilon, "attained": int(r.attained)}
        for seed, r in zip(seeds, results)
    ]
    attained = sum(r.attained for r in results)
    median = float(np.median([r.epsilon for r in results]))
    rows.append({**base, "seed_or_median": "median", "epsilon_star": median, "attained": attained})
    get_sweep_logger().log_cell(config.mu, config.w, config.d_k, median, attained, len(seeds))
    return rows


@log_execution_time(label="controlled sweep")
def controlled_sweep(grid: SweepGrid, threads: int = 1) -> pd.DataFrame:
    """
    Per-seed and median eps* for every (mu, w, d_k) cell.

    Every cell reuses the same seeds, so cells differ only in their
    parameters; results do not depend on the number of workers.
    """
    cells = grid.cells()
    logger.info(f"🔬 controlled sweep: {len(cells)} cells x {len(grid.seeds)} seeds")
    chunks = Parallel(n_jobs=threads)(delayed(_cell_rows)(cell, grid.seeds) for cell in cells)
    return pd.DataFrame([row for chunk in chunks for row in chunk])


def sweep_medians(table: pd.DataFrame) -> pd.DataFrame:
    return table[table["seed_or_median"] == "median"].reset_index(drop=True)


def monotonicity_report(table: pd.DataFrame, slack: float = 0.02) -> pd.DataFrame:
    """
    Check that the median eps* does not increase along each axis.

    A step from value a to the next larger value b holds when
    eps(b) <= eps(a) + slack * max(eps(a), eps(b)).
    """
    medians = sweep_medians(table)
    rows = []
    for axis in AXES:
        others = [a for a in AXES if a != axis]
        for key, group in medians.groupby(others, sort=True):
            group = group.sort_values(axis)
            values = group[axis].tolist()
            eps = group["epsilon_star"].tolist()
            fixed = dict(zip(others, key))
            for i in range(len(values) - 1):
                lower_eps, upper_eps = eps[i], eps[i + 1]
                if math.isinf(lower_eps):
                    holds = True
                elif math.isinf(upper_eps):
                    holds = False
                else:
                    holds = upper_eps <= lower_eps + slack * max(lower_eps, upper_eps)
                rows.append({
                    "axis": axis, **fixed,
                    "from_value": values[i], "to_value": values[i + 1],
                    "epsilon_from": lower_eps, "epsilon_to": upper_eps,
                    "holds": bool(holds),
                })
    columns = ["axis", "mu", "w", "d_k", "from_value", "to_value", "epsilon_from", "epsilon_to", "holds"]
    return pd.DataFrame(rows).reindex(columns=columns)


# ============================================================================
# CLUSTER SEPARATION
# ============================================================================

def silhouette_score(keys, queries) -> float:
    """
    Mean silhouette with keys and queries as the two clusters (Euclidean).

    A cluster of one point contributes 0 for that point.
    """
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if len(keys) < 1 or len(queries) < 1:
        raise ShapeError("silhouette needs at least one key and one query")
    if keys.shape[1] != queries.shape[1]:
        raise ShapeError(f"keys {keys.shape} and queries {queries.shape} have different widths")
    if len(keys) + len(queries) == 2:
        return 0.0
    points = np.concatenate([keys, queries])
    labels = np.concatenate([np.zeros(len(keys), dtype=int), np.ones(len(queries), dtype=int)])
    return float(sk_silhouette_score(points, labels, metric="euclidean"))


@log_execution_time(label="silhouette sweep")
def silhouette_sweep(grid: SweepGrid, threads: int = 1) -> pd.DataFrame:
    """Silhouette of clean projected keys vs queries for every cell and seed."""
    def _score(cell: ControlledConfig, seed: int) -> Dict:
        p_q, p_k = project(sample_inputs(cell, seed), cell.w)
        return {"mu": cell.mu, "w": cell.w, "d_k": cell.d_k, "seed": seed,
                "score": silhouette_score(p_k, p_q)}

    jobs = [(cell, seed) for cell in grid.cells() for seed in grid.seeds]
    rows = Parallel(n_jobs=threads)(delayed(_score)(cell, seed) for cell, seed in jobs)
    return pd.DataFrame(rows)
