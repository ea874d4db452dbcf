"""Instrumental-variable pipeline on a tripartite linear model.

Instruments drive a single exposure, the exposure drives the outcome, and a
hidden confounder leans on both. Invalid instruments leak directly into the
outcome through gamma; two-stage least squares is unbiased only when the
instrument set excludes the leaky columns, which is exactly the knowledge an
expert filter contributes.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

WEAK_F_THRESHOLD = 10.0


class TooFewSamples(Exception):
    pass


class EmptySubset(Exception):
    pass


class RankDeficient(Exception):
    pass


class NoValidInstruments(Exception):
    pass


class WeakInstrumentWarning(UserWarning):
    pass


@dataclass(frozen=True)
class IvScenario:
    """Coefficients of the two-stage linear model.

    exposure = instruments @ alpha + confounder * confounder_exposure + eps_e
    outcome  = exposure * beta + instruments @ gamma
               + confounder * confounder_outcome + eps_o
    """

    alpha: tuple[float, ...]
    beta: float
    gamma: tuple[float, ...]
    confounder_exposure: float = 1.0
    confounder_outcome: float = 1.0
    noise_exposure: float = 1.0
    noise_outcome: float = 1.0
    confounder_scale: float = 1.0

    def __post_init__(self):
        if len(self.alpha) < 1:
            raise ValueError("need at least one instrument")
        if len(self.gamma) != len(self.alpha):
            raise ValueError("alpha and gamma must have equal length")
        for name in ("noise_exposure", "noise_outcome", "confounder_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def p(self) -> int:
        return len(self.alpha)


# One strong leak (last gamma) keeps the invalid-IV bias visible above
# Monte Carlo noise while the first three instruments stay clean and strong.
DEFAULT_SCENARIO = IvScenario(
    alpha=(1.0, 1.0, 1.0, 0.5, 0.5),
    beta=1.0,
    gamma=(0.0, 0.0, 0.0, 0.0, 1.0),
)


@dataclass(frozen=True)
class IvDataset:
    """Observed columns only; the confounder stays hidden."""

    instruments: np.ndarray  # [n, p]
    exposure: np.ndarray  # [n]
    outcome: np.ndarray  # [n]

    @property
    def n(self) -> int:
        return self.instruments.shape[0]

    @property
    def p(self) -> int:
        return self.instruments.shape[1]


@dataclass(frozen=True)
class IvEstimate:
    beta_hat: float
    f_statistic: float
    instruments: tuple[int, ...]


@dataclass(frozen=True)
class RelevanceReport:
    f_statistic: float
    weak: bool
    instruments: tuple[int, ...]


def simulate_iv(
    scenario: IvScenario,
    n: int,
    rng: Union[int, np.random.Generator],
) -> IvDataset:
    """Draw n rows of the two-stage model; deterministic given the seed."""
    if n < scenario.p + 2:
        raise TooFewSamples(f"need n >= p + 2 = {scenario.p + 2}, got {n}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    alpha = np.array(scenario.alpha)
    gamma = np.array(scenario.gamma)
    instruments = rng.standard_normal((n, scenario.p))
    confounder = scenario.confounder_scale * rng.standard_normal(n)
    exposure = (
        instruments @ alpha
        + confounder * scenario.confounder_exposure
        + scenario.noise_exposure * rng.standard_normal(n)
    )
    outcome = (
        exposure * scenario.beta
        + instruments @ gamma
        + confounder * scenario.confounder_outcome
        + scenario.noise_outcome * rng.standard_normal(n)
    )
    return IvDataset(instruments, exposure, outcome)


def _subset_matrix(dataset: IvDataset, subset: Optional[Sequence[int]]) -> tuple[np.ndarray, tuple[int, ...]]:
    if subset is None:
        subset = range(dataset.p)
    cols = tuple(int(i) for i in subset)
    if not cols:
        raise EmptySubset("instrument subset is empty")
    if any(i < 0 or i >= dataset.p for i in cols):
        raise IndexError(f"instrument index out of range 0..{dataset.p - 1}")
    return dataset.instruments[:, cols], cols


def _first_stage(dataset: IvDataset, subset: Optional[Sequence[int]]) -> tuple[np.ndarray, float, tuple[int, ...]]:
    """Project the exposure onto the chosen instruments; no intercepts anywhere."""
    z, cols = _subset_matrix(dataset, subset)
    if np.linalg.matrix_rank(z) < len(cols):
        raise RankDeficient("selected instrument columns are collinear")
    coef, _, _, _ = np.linalg.lstsq(z, dataset.exposure, rcond=None)
    fitted = z @ coef
    residual = dataset.exposure - fitted
    k = len(cols)
    dof = dataset.n - k
    rss = float(residual @ residual)
    ess = float(fitted @ fitted)
    if rss <= 0.0:
        f_stat = float("inf")  # noiseless first stage
    else:
        f_stat = (ess / k) / (rss / dof)
    return fitted, f_stat, cols


def tsls(dataset: IvDataset, subset: Optional[Sequence[int]] = None) -> IvEstimate:
    """Two-stage least squares through the stated instrument columns."""
    fitted, f_stat, cols = _first_stage(dataset, subset)
    denom = float(fitted @ fitted)
    if denom <= 0.0:
        raise RankDeficient("projected exposure carries no variation")
    beta_hat = float(fitted @ dataset.outcome) / denom
    return IvEstimate(beta_hat, f_stat, cols)


def knowledge_filter(flags: Sequence[bool], dataset: IvDataset) -> IvEstimate:
    """2SLS restricted to instruments an expert marked valid."""
    if len(flags) != dataset.p:
        raise ValueError("need one verdict per instrument")
    subset = [i for i, ok in enumerate(flags) if ok]
    if not subset:
        raise NoValidInstruments("every instrument was flagged invalid")
    return tsls(dataset, subset)


def relevance_check(dataset: IvDataset, subset: Optional[Sequence[int]] = None) -> RelevanceReport:
    """First-stage F with a weak-instrument flag below 10.

    Only relevance is testable from data; exclusion violations (gamma leaks)
    are invisible here, which is why the expert filter matters.
    """
    _, f_stat, cols = _first_stage(dataset, subset)
    weak = f_stat < WEAK_F_THRESHOLD
    if weak:
        warnings.warn(
            f"first-stage F = {f_stat:.2f} < {WEAK_F_THRESHOLD:g}: weak instruments",
            WeakInstrumentWarning,
            stacklevel=2,
        )
    return RelevanceReport(f_stat, weak, cols)


def scenario_to_json(scenario: IvScenario) -> str:
    return json.dumps(
        {
            "alpha": list(scenario.alpha),
            "beta": scenario.beta,
            "gamma": list(scenario.gamma),
            "confounder_exposure": scenario.confounder_exposure,
            "confounder_outcome": scenario.confounder_outcome,
            "noise_exposure": scenario.noise_exposure,
            "noise_outcome": scenario.noise_outcome,
            "confounder_scale": scenario.confounder_scale,
        },
        indent=2,
    )


def scenario_from_json(source: Union[str, Path]) -> IvScenario:
    """Accepts a JSON string or a path to a scenario file."""
    text = source
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).is_file()):
        text = Path(source).read_text()
    doc = json.loads(text)
    return IvScenario(
        alpha=tuple(doc["alpha"]),
        beta=float(doc["beta"]),
        gamma=tuple(doc["gamma"]),
        confounder_exposure=float(doc.get("confounder_exposure", 1.0)),
        confounder_outcome=float(doc.get("confounder_outcome", 1.0)),
        noise_exposure=float(doc.get("noise_exposure", 1.0)),
        noise_outcome=float(doc.get("noise_outcome", 1.0)),
        confounder_scale=float(doc.get("confounder_scale", 1.0)),
    )


def iv_demo(
    scenario: IvScenario = DEFAULT_SCENARIO,
    n: int = 10_000,
    seeds: int = 100,
) -> dict:
    """Replicated contrast of naive-vs-filtered 2SLS on the leaky scenario."""
    valid_flags = [g == 0.0 for g in scenario.gamma]
    if not any(valid_flags):
        raise NoValidInstruments("demo scenario has no valid instrument")
    naive, filtered = [], []
    for seed in range(seeds):
        data = simulate_iv(scenario, n, seed)
        naive.append(tsls(data).beta_hat)
        filtered.append(knowledge_filter(valid_flags, data).beta_hat)
    return {
        "beta": scenario.beta,
        "seeds": seeds,
        "n": n,
        "naive_mean": float(np.mean(naive)),
        "naive_bias": float(np.mean(naive) - scenario.beta),
        "filtered_mean": float(np.mean(filtered)),
        "filtered_bias": float(np.mean(filtered) - scenario.beta),
    }
