"""Generation of synthetic two-level patient-within-provider datasets.

A dataset couples patient covariates (age, sex, socio-economic status) drawn
from a trivariate normal, a random assignment of patients to Trusts with
varying Trust sizes, a Trust-level covariate (binary with jitter, or
continuous), and a continuous outcome built from a linear predictor plus
normal noise scaled to a fixed fraction of the median within-Trust variance
of the error-free outcome.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .errors import ConfigurationError, SimulationError
from .rng import substream

DEFAULT_N_PATIENTS = 24_640
DEFAULT_N_TRUSTS = 19

DATASET_CSV_HEADER = ["trust_id", "age", "sex", "ses", "outcome"]


@dataclass(frozen=True)
class PatientBetas:
    """Fixed patient-level coefficients of the outcome linear predictor."""

    beta0: float = -0.0265
    beta_age: float = 0.0547
    beta_sex: float = -0.1368
    beta_ses: float = 0.0527

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value):
                raise ConfigurationError(f"PatientBetas.{name} must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.beta0, self.beta_age, self.beta_sex, self.beta_ses])


def _identity3():
    return ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


@dataclass(frozen=True)
class CovariateModel:
    """Trivariate normal model for (age, sex-latent, ses) before centering."""

    sd_age: float = 11.6
    sd_ses: float = 3.18
    correlation: tuple = field(default_factory=_identity3)

    def __post_init__(self):
        if self.sd_age <= 0 or self.sd_ses <= 0:
            raise ConfigurationError("covariate standard deviations must be > 0")
        corr = self.correlation_matrix()
        if corr.shape != (3, 3):
            raise ConfigurationError("correlation matrix must be 3x3")
        if not np.allclose(corr, corr.T):
            raise ConfigurationError("correlation matrix must be symmetric")
        if not np.allclose(np.diag(corr), 1.0):
            raise ConfigurationError("correlation matrix must have unit diagonal")
        if np.linalg.eigvalsh(corr).min() < -1e-10:
            raise ConfigurationError("correlation matrix must be positive semi-definite")

    def correlation_matrix(self) -> np.ndarray:
        return np.asarray(self.correlation, dtype=float)


@dataclass(frozen=True)
class BinaryTrustCovariate:
    """Two-point Trust covariate with small normal jitter."""

    low: float = -0.5
    high: float = 0.5
    jitter_sd: float = 0.01

    def __post_init__(self):
        if self.jitter_sd < 0:
            raise ConfigurationError("jitter_sd must be >= 0")
        if not self.low < self.high:
            raise ConfigurationError("binary covariate requires low < high")

    kind = "binary"


@dataclass(frozen=True)
class ContinuousTrustCovariate:
    """Uniform Trust covariate; optionally sampled from an even grid."""

    low: float = -0.5
    high: float = 0.5
    grid: int | None = None

    def __post_init__(self):
        if not self.low < self.high:
            raise ConfigurationError("continuous covariate requires low < high")
        if self.grid is not None and self.grid < 2:
            raise ConfigurationError("grid must have at least 2 points")

    kind = "continuous"


TrustCovariateKind = BinaryTrustCovariate | ContinuousTrustCovariate


def trust_kind_to_dict(kind: TrustCovariateKind) -> dict:
    d = asdict(kind)
    d["kind"] = kind.kind
    return d


def trust_kind_from_dict(d: dict) -> TrustCovariateKind:
    d = dict(d)
    name = d.pop("kind")
    if name == "binary":
        return BinaryTrustCovariate(**d)
    if name == "continuous":
        return ContinuousTrustCovariate(**d)
    raise ConfigurationError(f"unknown trust covariate kind {name!r}")


@dataclass(frozen=True)
class SimConfig:
    """Full parameterization of one simulated dataset."""

    n_patients: int = DEFAULT_N_PATIENTS
    n_trusts: int = DEFAULT_N_TRUSTS
    patient_betas: PatientBetas = field(default_factory=PatientBetas)
    covariate_model: CovariateModel = field(default_factory=CovariateModel)
    trust_kind: TrustCovariateKind = field(default_factory=BinaryTrustCovariate)
    beta_t: float = 0.137
    error_fraction: float = 0.33
    seed: int = 0
    size_concentration: float = 5.0
    min_trust_size: int = 10
    # "median variance of the error-free outcome": default reading is the
    # median across Trusts of within-Trust variances; "global" uses the
    # overall variance instead.
    variance_scope: str = "within_trust"

    def __post_init__(self):
        if self.n_trusts < 2:
            raise ConfigurationError("n_trusts must be >= 2")
        if self.n_patients < self.n_trusts * self.min_trust_size:
            raise ConfigurationError(
                "n_patients must be >= n_trusts * min_trust_size "
                f"({self.n_patients} < {self.n_trusts * self.min_trust_size})"
            )
        if not 0.0 < self.error_fraction < 1.0:
            raise ConfigurationError("error_fraction must lie in (0, 1)")
        if self.size_concentration <= 0:
            raise ConfigurationError("size_concentration must be > 0")
        if self.variance_scope not in ("within_trust", "global"):
            raise ConfigurationError("variance_scope must be 'within_trust' or 'global'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trust_kind"] = trust_kind_to_dict(self.trust_kind)
        d["correlation"] = d.pop("covariate_model")["correlation"]
        d["sd_age"] = self.covariate_model.sd_age
        d["sd_ses"] = self.covariate_model.sd_ses
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        kind = trust_kind_from_dict(d.pop("trust_kind"))
        betas = PatientBetas(**d.pop("patient_betas", {}))
        model = CovariateModel(
            sd_age=d.pop("sd_age", 11.6),
            sd_ses=d.pop("sd_ses", 3.18),
            correlation=tuple(tuple(row) for row in d.pop("correlation", _identity3())),
        )
        return cls(patient_betas=betas, covariate_model=model, trust_kind=kind, **d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SimConfig":
        return cls.from_dict(json.loads(text))

    def with_seed(self, seed: int) -> "SimConfig":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class GroundTruth:
    beta_t: float
    realized_error_variance: float
    error_fraction: float
    seed: int


@dataclass(frozen=True)
class Dataset:
    """Simulated patient rows plus the Trust covariate and ground truth."""

    trust_id: np.ndarray  # (n,) int
    age: np.ndarray  # (n,) centered years
    sex: np.ndarray  # (n,) {0, 1}
    ses: np.ndarray  # (n,) centered Townsend units
    outcome: np.ndarray  # (n,) continuous
    trust_covariate: np.ndarray  # (n_trusts,)
    truth: GroundTruth

    @property
    def n_patients(self) -> int:
        return self.trust_id.shape[0]

    @property
    def n_trusts(self) -> int:
        return self.trust_covariate.shape[0]

    def covariates(self) -> np.ndarray:
        """Patient design columns in model order (age, sex, ses)."""
        return np.column_stack([self.age, self.sex, self.ses])

    def validate(self, min_trust_size: int = 1) -> None:
        counts = np.bincount(self.trust_id, minlength=self.n_trusts)
        if self.trust_id.min() < 0 or self.trust_id.max() >= self.n_trusts:
            raise SimulationError("trust_id out of range")
        if counts.min() < min_trust_size:
            raise SimulationError("a Trust fell below the minimum size")
        if abs(self.age.mean()) >= 1e-9 or abs(self.ses.mean()) >= 1e-9:
            raise SimulationError("age/ses are not empirically centered")
        values, sex_counts = np.unique(self.sex, return_counts=True)
        if set(values.tolist()) != {0, 1} or abs(int(sex_counts[0]) - int(sex_counts[1])) > 1:
            raise SimulationError("sex must be a balanced 0/1 split")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(DATASET_CSV_HEADER)
            for j, a, s, t, y in zip(self.trust_id, self.age, self.sex, self.ses, self.outcome):
                writer.writerow([int(j), repr(float(a)), int(s), repr(float(t)), repr(float(y))])

    def sidecar_dict(self) -> dict:
        return {
            "trust_covariate": [float(v) for v in self.trust_covariate],
            "truth": asdict(self.truth),
        }

    def to_files(self, csv_path, sidecar_path) -> None:
        self.to_csv(csv_path)
        with open(sidecar_path, "w") as fh:
            json.dump(self.sidecar_dict(), fh, sort_keys=True, indent=2)

    @classmethod
    def from_files(cls, csv_path, sidecar_path) -> "Dataset":
        rows = np.genfromtxt(csv_path, delimiter=",", names=True)
        with open(sidecar_path) as fh:
            side = json.load(fh)
        truth = GroundTruth(**side["truth"])
        return cls(
            trust_id=rows["trust_id"].astype(int),
            age=rows["age"],
            sex=rows["sex"].astype(int),
            ses=rows["ses"],
            outcome=rows["outcome"],
            trust_covariate=np.asarray(side["trust_covariate"], dtype=float),
            truth=truth,
        )


def draw_patient_covariates(n: int, model: CovariateModel, rng: np.random.Generator):
    """Draw (age, sex, ses): correlated normals, median-split sex, centering.

    Returns centered age, a 0/1 sex indicator split at the sample median of
    the latent column (strictly below -> 0), and centered ses.
    """
    if n < 2:
        raise ConfigurationError("need at least 2 patients to draw covariates")
    corr = model.correlation_matrix()
    try:
        chol = np.linalg.cholesky(corr + 1e-12 * np.eye(3))
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError("correlation matrix is not positive semi-definite") from exc
    z = rng.standard_normal((n, 3)) @ chol.T
    age = z[:, 0] * model.sd_age
    sex = (z[:, 1] >= np.median(z[:, 1])).astype(np.int64)
    ses = z[:, 2] * model.sd_ses
    age = age - age.mean()
    ses = ses - ses.mean()
    return age, sex, ses


def assign_trusts(
    n_patients: int,
    n_trusts: int,
    concentration: float,
    min_trust_size: int,
    rng: np.random.Generator,
    max_retries: int = 100,
) -> np.ndarray:
    """Assign patients to Trusts with Dirichlet-multinomial varying sizes."""
    if n_patients < n_trusts * min_trust_size:
        raise ConfigurationError("n_patients too small for the minimum Trust size")
    for _ in range(max_retries):
        weights = rng.dirichlet(np.full(n_trusts, concentration))
        assignment = rng.choice(n_trusts, size=n_patients, p=weights)
        counts = np.bincount(assignment, minlength=n_trusts)
        if counts.min() >= min_trust_size:
            return assignment
    raise SimulationError(f"could not satisfy min_trust_size in {max_retries} draws")


def draw_trust_covariate(
    kind: TrustCovariateKind, n_trusts: int, rng: np.random.Generator
) -> np.ndarray:
    if n_trusts < 2:
        raise ConfigurationError("n_trusts must be >= 2")
    if isinstance(kind, BinaryTrustCovariate):
        values = rng.choice([kind.low, kind.high], size=n_trusts)
        if kind.jitter_sd > 0:
            values = values + rng.normal(0.0, kind.jitter_sd, size=n_trusts)
        return values
    if kind.grid is not None:
        grid = np.linspace(kind.low, kind.high, kind.grid)
        return rng.choice(grid, size=n_trusts)  # with replacement
    return rng.uniform(kind.low, kind.high, size=n_trusts)


def linear_predictor(age, sex, ses, trust_value, betas: PatientBetas, beta_t: float):
    return (
        betas.beta0
        + betas.beta_age * np.asarray(age)
        + betas.beta_sex * np.asarray(sex)
        + betas.beta_ses * np.asarray(ses)
        + beta_t * np.asarray(trust_value)
    )


def within_trust_variances(values: np.ndarray, assignment: np.ndarray) -> np.ndarray:
    """Sample variance (ddof=1) of values within each Trust."""
    n_trusts = int(assignment.max()) + 1
    counts = np.bincount(assignment, minlength=n_trusts)
    if counts.min() < 2:
        raise SimulationError("every Trust needs >= 2 patients for a variance")
    sums = np.bincount(assignment, weights=values, minlength=n_trusts)
    sumsq = np.bincount(assignment, weights=values * values, minlength=n_trusts)
    return (sumsq - sums * sums / counts) / (counts - 1)


def error_scale(
    error_free: np.ndarray,
    assignment: np.ndarray,
    fraction: float,
    scope: str = "within_trust",
) -> tuple[float, float]:
    """Noise standard deviation giving variance = fraction * reference variance.

    Returns (scale, variance) where variance = fraction * reference is also
    recorded in the dataset's ground truth.
    """
    if scope == "global":
        reference = float(np.var(error_free, ddof=1))
    else:
        reference = float(np.median(within_trust_variances(error_free, assignment)))
    variance = fraction * reference
    return float(np.sqrt(variance)), variance


def simulate_dataset(config: SimConfig) -> Dataset:
    """Compose the full generative pipeline for one dataset.

    Each stage draws from its own sub-stream of config.seed, so any stage is
    reproducible in isolation and the whole pipeline is a pure function of
    the configuration.
    """
    age, sex, ses = draw_patient_covariates(
        config.n_patients, config.covariate_model, substream(config.seed, "covariates")
    )
    assignment = assign_trusts(
        config.n_patients,
        config.n_trusts,
        config.size_concentration,
        config.min_trust_size,
        substream(config.seed, "assign"),
    )
    trust_covariate = draw_trust_covariate(
        config.trust_kind, config.n_trusts, substream(config.seed, "trust_covariate")
    )
    error_free = linear_predictor(
        age, sex, ses, trust_covariate[assignment], config.patient_betas, config.beta_t
    )
    scale, variance = error_scale(
        error_free, assignment, config.error_fraction, config.variance_scope
    )
    noise = substream(config.seed, "noise").normal(0.0, 1.0, size=config.n_patients) * scale
    dataset = Dataset(
        trust_id=assignment,
        age=age,
        sex=sex,
        ses=ses,
        outcome=error_free + noise,
        trust_covariate=trust_covariate,
        truth=GroundTruth(
            beta_t=config.beta_t,
            realized_error_variance=variance,
            error_fraction=config.error_fraction,
            seed=config.seed,
        ),
    )
    dataset.validate(config.min_trust_size)
    return dataset
