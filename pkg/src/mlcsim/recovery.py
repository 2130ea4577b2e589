"""Recovery of the Trust-level coefficient from a fitted mixture model.

Each Trust gets a posterior-weighted mean outcome (its class-membership
probabilities combined with the casemix-adjusted class intercepts); the
Trust-level coefficient is then the ordinary least-squares slope of those
means on the known Trust covariate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .em import FitResult
from .errors import ParameterError
from .simulate import Dataset

POSTERIOR_SPREAD_TOL = 1e-8
OUTCOME_SPREAD_TOL = 1e-10

DEGENERATE_MEMBERSHIP = "degenerate-membership"
DEGENERATE_FIT = "degenerate-fit"
_EXCLUSION_REASONS = (DEGENERATE_MEMBERSHIP, DEGENERATE_FIT)


@dataclass(frozen=True)
class RecoveredBeta:
    value: float | None = None
    intercept: float | None = None
    trust_means: np.ndarray | None = None
    exclusion_reason: str | None = None

    def __post_init__(self):
        if self.exclusion_reason is not None and self.exclusion_reason not in _EXCLUSION_REASONS:
            raise ParameterError(f"unknown exclusion reason {self.exclusion_reason!r}")
        if self.exclusion_reason is None and self.value is None:
            raise ParameterError("a non-excluded recovery must carry a value")

    @property
    def excluded(self) -> bool:
        return self.exclusion_reason is not None

    @classmethod
    def exclude(cls, reason: str) -> "RecoveredBeta":
        return cls(exclusion_reason=reason)


def weighted_trust_outcome(fit: FitResult) -> np.ndarray:
    """Posterior-weighted class means per Trust: m_j = sum_c P(c|j) alpha_bar_c."""
    return fit.trust_posteriors @ fit.params.class_means()


def ols_slope(x, y, weights=None) -> tuple[float, float]:
    """Closed-form least-squares slope and intercept of y on x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ParameterError("need matching vectors of length >= 2")
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    xbar = float(w @ x)
    ybar = float(w @ y)
    var_x = float(w @ (x - xbar) ** 2)
    if var_x == 0.0:
        raise ParameterError("Trust covariate has zero variance")
    slope = float(w @ ((x - xbar) * (y - ybar))) / var_x
    return slope, ybar - slope * xbar


def posterior_spread(trust_posteriors: np.ndarray) -> float:
    """Maximum pairwise L-infinity distance between Trust posterior rows."""
    return float(
        np.max(trust_posteriors.max(axis=0) - trust_posteriors.min(axis=0))
    )


def recover_beta(
    fit: FitResult,
    dataset: Dataset,
    mode: str = "adjusted",
    weight_by_size: bool = False,
) -> RecoveredBeta:
    """Recovered Trust-level coefficient, or an exclusion marker.

    mode="adjusted" regresses posterior-weighted class intercepts on the
    Trust covariate; mode="raw" uses raw per-Trust mean outcomes instead.
    Datasets where all Trusts received indistinguishable memberships (or the
    weighted means are constant) are excluded as degenerate.
    """
    if mode == "raw":
        counts = np.bincount(dataset.trust_id, minlength=dataset.n_trusts)
        means = (
            np.bincount(dataset.trust_id, weights=dataset.outcome, minlength=dataset.n_trusts)
            / counts
        )
    elif mode == "adjusted":
        means = weighted_trust_outcome(fit)
    else:
        raise ParameterError(f"unknown recovery mode {mode!r}")
    if mode == "adjusted":
        if posterior_spread(fit.trust_posteriors) < POSTERIOR_SPREAD_TOL:
            return RecoveredBeta.exclude(DEGENERATE_MEMBERSHIP)
        if float(np.std(means)) < OUTCOME_SPREAD_TOL:
            return RecoveredBeta.exclude(DEGENERATE_MEMBERSHIP)
    weights = None
    if weight_by_size:
        weights = np.bincount(dataset.trust_id, minlength=dataset.n_trusts).astype(float)
    slope, intercept = ols_slope(dataset.trust_covariate, means, weights=weights)
    return RecoveredBeta(value=slope, intercept=intercept, trust_means=means)
