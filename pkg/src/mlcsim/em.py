"""Two-level mixture-of-regressions estimation by EM with restarts.

The model: each Trust belongs to one of T latent Trust classes (weights pi);
given Trust class c, each patient independently belongs to one of P latent
patient classes (weights rho[c]); given (c, k) the outcome is normal with
mean alpha[c, k] + slopes . x and shared residual variance sigma2. Slopes
are shared across classes so the classes differ only in level, which is what
makes the Trust classes casemix-adjusted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateFitError, FitError, ParameterError
from .rng import substream
from .simulate import Dataset

_MIN_CLASS_WEIGHT = 1e-6
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ModelSpec:
    """Latent class counts and patient-level fixed effects."""

    n_patient_classes: int = 1
    n_trust_classes: int = 2
    covariates: tuple = ("age", "sex", "ses")

    def __post_init__(self):
        if self.n_patient_classes < 1 or self.n_trust_classes < 1:
            raise ParameterError("class counts must be >= 1")

    @property
    def label(self) -> str:
        return f"{self.n_patient_classes}P{self.n_trust_classes}T"

    @classmethod
    def from_label(cls, label: str) -> "ModelSpec":
        try:
            p_part, t_part = label.upper().rstrip("T").split("P")
            return cls(n_patient_classes=int(p_part), n_trust_classes=int(t_part))
        except (ValueError, ParameterError) as exc:
            raise ParameterError(f"cannot parse model label {label!r}") from exc


@dataclass(frozen=True)
class EmConfig:
    n_restarts: int = 20
    max_iter: int = 500
    rel_tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.n_restarts < 1:
            raise ParameterError("n_restarts must be >= 1")
        if self.rel_tol <= 0:
            raise ParameterError("rel_tol must be > 0")


@dataclass
class MlcParams:
    """Parameters of the two-level mixture of regressions."""

    trust_weights: np.ndarray  # (T,) pi
    patient_mix: np.ndarray  # (T, P) rho, rows sum to 1
    intercepts: np.ndarray  # (T, P) alpha
    slopes: np.ndarray  # (d,) shared across classes
    sigma2: float

    def __post_init__(self):
        self.trust_weights = np.asarray(self.trust_weights, dtype=float)
        self.patient_mix = np.atleast_2d(np.asarray(self.patient_mix, dtype=float))
        self.intercepts = np.atleast_2d(np.asarray(self.intercepts, dtype=float))
        self.slopes = np.asarray(self.slopes, dtype=float)
        self.validate()

    @property
    def n_trust_classes(self) -> int:
        return self.trust_weights.shape[0]

    @property
    def n_patient_classes(self) -> int:
        return self.patient_mix.shape[1]

    def validate(self):
        if self.sigma2 <= 0:
            raise ParameterError("sigma2 must be > 0")
        if not (
            np.all(np.isfinite(self.trust_weights))
            and np.all(np.isfinite(self.patient_mix))
            and np.all(np.isfinite(self.intercepts))
            and np.all(np.isfinite(self.slopes))
        ):
            raise ParameterError("parameters must be finite")
        if np.any(self.trust_weights < 0) or abs(self.trust_weights.sum() - 1.0) > 1e-8:
            raise ParameterError("trust_weights must be a probability vector")
        if np.any(self.patient_mix < 0) or np.max(np.abs(self.patient_mix.sum(axis=1) - 1.0)) > 1e-8:
            raise ParameterError("each patient_mix row must sum to 1")
        if self.intercepts.shape != self.patient_mix.shape:
            raise ParameterError("intercepts and patient_mix shapes must agree")

    def class_means(self) -> np.ndarray:
        """Mixture-averaged intercept per Trust class: sum_k rho[c,k] alpha[c,k]."""
        return np.sum(self.patient_mix * self.intercepts, axis=1)

    def to_dict(self) -> dict:
        return {
            "trust_weights": self.trust_weights.tolist(),
            "patient_mix": self.patient_mix.tolist(),
            "intercepts": self.intercepts.tolist(),
            "slopes": self.slopes.tolist(),
            "sigma2": float(self.sigma2),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlcParams":
        return cls(
            trust_weights=d["trust_weights"],
            patient_mix=d["patient_mix"],
            intercepts=d["intercepts"],
            slopes=d["slopes"],
            sigma2=d["sigma2"],
        )


@dataclass
class FitResult:
    params: MlcParams
    trust_posteriors: np.ndarray  # (n_trusts, T)
    loglik: float
    loglik_trace: np.ndarray
    converged: bool
    best_restart_index: int
    n_iter: int = 0
    n_degenerate_restarts: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "params": self.params.to_dict(),
                "trust_posteriors": self.trust_posteriors.tolist(),
                "loglik": float(self.loglik),
                "loglik_trace": np.asarray(self.loglik_trace).tolist(),
                "converged": bool(self.converged),
                "best_restart_index": int(self.best_restart_index),
                "n_iter": int(self.n_iter),
                "n_degenerate_restarts": int(self.n_degenerate_restarts),
            },
            sort_keys=True,
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        d = json.loads(text)
        return cls(
            params=MlcParams.from_dict(d["params"]),
            trust_posteriors=np.asarray(d["trust_posteriors"], dtype=float),
            loglik=d["loglik"],
            loglik_trace=np.asarray(d["loglik_trace"], dtype=float),
            converged=d["converged"],
            best_restart_index=d["best_restart_index"],
            n_iter=d.get("n_iter", 0),
            n_degenerate_restarts=d.get("n_degenerate_restarts", 0),
        )


def normal_log_density(y, mean, sigma2):
    y = np.asarray(y, dtype=float)
    return -0.5 * (_LOG_2PI + np.log(sigma2)) - (y - mean) ** 2 / (2.0 * sigma2)


def patient_log_density(y, x, c: int, k: int, params: MlcParams):
    """log N(y; alpha[c,k] + slopes.x, sigma2) for one patient row."""
    mean = params.intercepts[c, k] + float(np.dot(params.slopes, np.asarray(x, dtype=float)))
    return normal_log_density(y, mean, params.sigma2)


def _log_densities(y, X, params: MlcParams) -> np.ndarray:
    """(n, T, P) patient log densities under every (trust, patient) class."""
    xb = X @ params.slopes
    resid = y[:, None, None] - (xb[:, None, None] + params.intercepts[None, :, :])
    return -0.5 * (_LOG_2PI + np.log(params.sigma2)) - resid**2 / (2.0 * params.sigma2)


def _patient_class_collapse(y, X, params: MlcParams):
    """Collapse patient classes: per-patient log f(y_i | trust class c).

    Returns (log_f (n, T), log posterior of patient class (n, T, P)).
    """
    ld = _log_densities(y, X, params)
    if params.n_patient_classes == 1:
        return ld[:, :, 0], np.zeros_like(ld)
    with np.errstate(divide="ignore"):
        weighted = ld + np.log(params.patient_mix)[None, :, :]
    log_f = logsumexp(weighted, axis=2)
    return log_f, weighted - log_f[:, :, None]


def trust_class_loglik(y, X, c: int, params: MlcParams) -> float:
    """Log-likelihood of one Trust's patients under Trust class c."""
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ParameterError("trust must be nonempty")
    log_f, _ = _patient_class_collapse(y, np.atleast_2d(X), params)
    return float(log_f[:, c].sum())


class GroupedData:
    """Dataset rows sorted by Trust for fast per-Trust reductions."""

    def __init__(self, y, X, trust_ids, n_trusts=None):
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        trust_ids = np.asarray(trust_ids)
        order = np.argsort(trust_ids, kind="stable")
        self.y = y[order]
        self.X = X[order]
        self.trust_ids = trust_ids[order]
        self.n_trusts = int(n_trusts if n_trusts is not None else trust_ids.max() + 1)
        counts = np.bincount(self.trust_ids, minlength=self.n_trusts)
        if counts.min() == 0:
            raise ParameterError("every Trust must have at least one patient")
        self.starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.counts = counts

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "GroupedData":
        return cls(dataset.outcome, dataset.covariates(), dataset.trust_id, dataset.n_trusts)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def group_sum(self, values: np.ndarray) -> np.ndarray:
        """Sum rows of (n, ...) within each Trust -> (n_trusts, ...)."""
        return np.add.reduceat(values, self.starts, axis=0)


def trust_logliks(data: GroupedData, params: MlcParams):
    """(n_trusts, T) per-Trust class log-likelihoods, plus patient posteriors."""
    log_f, log_patient_post = _patient_class_collapse(data.y, data.X, params)
    return data.group_sum(log_f), log_patient_post


def loglik(params: MlcParams, data: GroupedData) -> float:
    """Observed-data log-likelihood, log-sum-exp stabilized over Trust classes."""
    ell, _ = trust_logliks(data, params)
    with np.errstate(divide="ignore"):
        log_pi = np.log(params.trust_weights)
    return float(logsumexp(ell + log_pi[None, :], axis=1).sum())


def e_step(params: MlcParams, data: GroupedData):
    """Posterior Trust-class memberships and patient-class posteriors.

    Returns (trust_posteriors (n_trusts, T), patient_posteriors (n, T, P),
    loglik) with all mixture collapses done in log space.
    """
    ell, log_patient_post = trust_logliks(data, params)
    with np.errstate(divide="ignore"):
        log_pi = np.log(params.trust_weights)
    scores = ell + log_pi[None, :]
    norm = logsumexp(scores, axis=1)
    if not np.all(np.isfinite(norm)):
        raise DegenerateFitError("trust posterior underflow")
    trust_post = np.exp(scores - norm[:, None])
    return trust_post, np.exp(log_patient_post), float(norm.sum())


def m_step(trust_post, patient_post, data: GroupedData, spec: ModelSpec) -> MlcParams:
    """Weighted-likelihood maximization given posterior memberships.

    (alpha, slopes) solve the weighted least-squares normal equations where
    patient i contributes weight P(c|trust of i) * P(k|i,c) to the design row
    for class (c, k); sigma2 is the total weighted squared residual over n.
    """
    T, P = spec.n_trust_classes, spec.n_patient_classes
    n, d = data.X.shape
    pi = trust_post.mean(axis=0)
    # joint per-patient class weights u[i, c, k]
    q_per_patient = trust_post[data.trust_ids]  # (n, T)
    u = q_per_patient[:, :, None] * patient_post  # (n, T, P)
    trust_mass = q_per_patient.sum(axis=0)  # (T,)
    class_mass = u.sum(axis=0)  # (T, P)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = class_mass / trust_mass[:, None]
    if not np.all(np.isfinite(rho)):
        raise DegenerateFitError("empty trust class in m-step")

    u_flat = u.reshape(n, T * P)
    # normal equations for [alpha_flat, slopes]; since the weights for each
    # patient sum to 1 across (c, k), the slope block is the plain X'X
    a_diag = class_mass.reshape(T * P)
    b_block = u_flat.T @ data.X  # (TP, d)
    c_block = data.X.T @ data.X  # (d, d)
    lhs = np.zeros((T * P + d, T * P + d))
    lhs[: T * P, : T * P] = np.diag(a_diag)
    lhs[: T * P, T * P :] = b_block
    lhs[T * P :, : T * P] = b_block.T
    lhs[T * P :, T * P :] = c_block
    rhs = np.concatenate([u_flat.T @ data.y, data.X.T @ data.y])
    try:
        solution = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise DegenerateFitError("singular weighted least-squares system") from exc
    if not np.all(np.isfinite(solution)):
        raise DegenerateFitError("non-finite weighted least-squares solution")
    alpha = solution[: T * P].reshape(T, P)
    slopes = solution[T * P :]

    resid = data.y[:, None, None] - (data.X @ slopes)[:, None, None] - alpha[None, :, :]
    sigma2 = float(np.sum(u * resid**2) / n)
    if sigma2 <= 0 or not np.isfinite(sigma2):
        raise DegenerateFitError("degenerate residual variance")
    return MlcParams(
        trust_weights=pi, patient_mix=rho, intercepts=alpha, slopes=slopes, sigma2=sigma2
    )


def _pooled_ols(data: GroupedData):
    design = np.column_stack([np.ones(data.n), data.X])
    coef, _, _, _ = np.linalg.lstsq(design, data.y, rcond=None)
    resid = data.y - design @ coef
    sigma2 = float(resid @ resid / max(data.n - design.shape[1], 1))
    return coef[0], coef[1:], sigma2, resid


def _initial_params(data: GroupedData, spec: ModelSpec, rng: np.random.Generator) -> MlcParams:
    """Restart initialization: pooled OLS, intercepts seeded at per-Trust
    mean residuals (plus jitter) so every class starts inside the data range."""
    T, P = spec.n_trust_classes, spec.n_patient_classes
    alpha0, slopes, sigma2, resid = _pooled_ols(data)
    trust_resid_means = data.group_sum(resid) / data.counts
    spread = float(trust_resid_means.std()) or float(np.sqrt(sigma2))
    n_classes = T * P
    if data.n_trusts >= n_classes:
        anchors = rng.choice(trust_resid_means, size=n_classes, replace=False)
    else:
        anchors = rng.choice(trust_resid_means, size=n_classes, replace=True)
    alpha = alpha0 + anchors + rng.normal(0.0, 0.1 * spread + 1e-12, size=n_classes)
    return MlcParams(
        trust_weights=np.full(T, 1.0 / T),
        patient_mix=np.full((T, P), 1.0 / P),
        intercepts=alpha.reshape(T, P),
        slopes=slopes,
        sigma2=sigma2,
    )


def canonicalize(params: MlcParams, trust_posteriors: np.ndarray):
    """Fix label switching: patient classes by mean intercept, Trust classes
    by mixture-averaged intercept, both ascending."""
    k_order = np.argsort(params.intercepts.mean(axis=0), kind="stable")
    patient_mix = params.patient_mix[:, k_order]
    intercepts = params.intercepts[:, k_order]
    c_order = np.argsort(np.sum(patient_mix * intercepts, axis=1), kind="stable")
    out = MlcParams(
        trust_weights=params.trust_weights[c_order],
        patient_mix=patient_mix[c_order],
        intercepts=intercepts[c_order],
        slopes=params.slopes,
        sigma2=params.sigma2,
    )
    return out, trust_posteriors[:, c_order]


def _run_chain(data: GroupedData, spec: ModelSpec, em: EmConfig, rng: np.random.Generator):
    params = _initial_params(data, spec, rng)
    trace = []
    converged = False
    trust_post = patient_post = None
    for _ in range(em.max_iter):
        trust_post, patient_post, ll = e_step(params, data)
        trace.append(ll)
        if len(trace) > 1:
            if abs(trace[-1] - trace[-2]) < em.rel_tol * (1.0 + abs(trace[-1])):
                converged = True
                break
        params = m_step(trust_post, patient_post, data, spec)
        if params.trust_weights.min() < _MIN_CLASS_WEIGHT:
            raise DegenerateFitError("trust class weight collapsed")
    if trust_post is None:
        trust_post, patient_post, ll = e_step(params, data)
        trace.append(ll)
    return params, trust_post, np.asarray(trace), converged


def fit(dataset_or_data, spec: ModelSpec, em: EmConfig | None = None) -> FitResult:
    """Maximum-likelihood fit via EM with random restarts.

    Runs em.n_restarts chains from perturbed pooled-OLS initializations,
    discards chains that collapse a class, and returns the surviving chain
    with the highest final log-likelihood, canonicalized by intercept order.
    """
    em = em or EmConfig()
    data = (
        dataset_or_data
        if isinstance(dataset_or_data, GroupedData)
        else GroupedData.from_dataset(dataset_or_data)
    )
    best = None
    n_degenerate = 0
    for r in range(em.n_restarts):
        rng = substream(em.seed, "em-restart", r)
        try:
            params, trust_post, trace, converged = _run_chain(data, spec, em, rng)
        except DegenerateFitError:
            n_degenerate += 1
            continue
        if best is None or trace[-1] > best[2][-1]:
            best = (params, trust_post, trace, converged, r)
    if best is None:
        raise FitError(f"all {em.n_restarts} restarts degenerated")
    params, trust_post, trace, converged, r = best
    params, trust_post = canonicalize(params, trust_post)
    return FitResult(
        params=params,
        trust_posteriors=trust_post,
        loglik=float(trace[-1]),
        loglik_trace=trace,
        converged=converged,
        best_restart_index=r,
        n_iter=max(len(trace) - 1, 1),
        n_degenerate_restarts=n_degenerate,
    )
