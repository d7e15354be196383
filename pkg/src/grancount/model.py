"""Likelihoods, gradients, and simulators for fuzzily reported counts.

The data model: a latent count Y_i follows a negative binomial regression
with mean mu_i = u_i * exp(z_i . coef) and dispersion kappa (variance
mu + mu^2/kappa), truncated to {0..K_i}. The report precision H_i is Gamma
(shape, rate) distributed, and the scaled report location C_i given (H_i,
Y_i) is Beta with shapes (H_i * ybar_i, H_i * (1 - ybar_i)), where ybar is
the scaled count with a half-count continuity correction so the shapes stay
positive at the boundary counts. The observed statistic per sample is the
pair (c_i, h_i) = (K_i * C_i, H_i).

Four observed-data likelihoods are provided:

* ``cnar``   -- marginalises the latent count (non-ignorable reporting);
* ``car1``   -- ignores the latent count, conditioning the report location
                directly on the scaled regression mean;
* ``car2``   -- same, with an extra multiplier on both Beta shapes to soak
                up the missing count variability;
* ``scalar`` -- plain negative binomial regression on defuzzified counts.

All four expose exact analytic gradients on an unconstrained scale (log
transforms for positive parameters), packaged for the HMC sampler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, digamma, gammaln

from .errors import NumericalError, ValidationError

MODEL_NAMES = ("cnar", "car1", "car2", "scalar")

# exp() overflows just above this; treat larger linear predictors as failures
_MAX_LINEAR_PREDICTOR = 700.0
_LOG_TINY = np.log(1.0e-300)
_PRIOR_NORM = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class RegressionSpec:
    """Design matrix, offsets, and per-sample truncation levels."""

    covariates: np.ndarray
    offsets: np.ndarray
    k_max: np.ndarray
    covariate_names: tuple[str, ...] | None = None

    def __post_init__(self):
        covariates = np.atleast_2d(np.asarray(self.covariates, dtype=np.float64))
        offsets = np.asarray(self.offsets, dtype=np.float64)
        k_max = np.asarray(self.k_max, dtype=np.int64)
        n = covariates.shape[0]
        if covariates.ndim != 2:
            raise ValidationError("covariates must be a 2-D matrix")
        if offsets.shape != (n,):
            raise ValidationError("offsets must have one entry per sample")
        if k_max.shape != (n,):
            raise ValidationError("k_max must have one entry per sample")
        if not np.all(np.isfinite(covariates)):
            raise ValidationError("covariates must be finite")
        if np.any(offsets <= 0.0) or not np.all(np.isfinite(offsets)):
            raise ValidationError("offsets must be strictly positive and finite")
        if np.any(k_max < 1):
            raise ValidationError("every truncation level must be at least 1")
        names = self.covariate_names
        if names is not None and len(names) != covariates.shape[1]:
            raise ValidationError("covariate_names length does not match the matrix")
        for arr in (covariates, offsets, k_max):
            arr.flags.writeable = False
        object.__setattr__(self, "covariates", covariates)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "k_max", k_max)

    @property
    def n_samples(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]


@dataclass(frozen=True)
class ModelParams:
    """Constrained-scale parameters; only the fields a model uses are set."""

    coef: np.ndarray
    dispersion: float | None = None
    precision_shape: float | None = None
    precision_rate: float | None = None
    extra_dispersion: float | None = None

    def __post_init__(self):
        coef = np.atleast_1d(np.asarray(self.coef, dtype=np.float64))
        if coef.ndim != 1 or not np.all(np.isfinite(coef)):
            raise ValidationError("coef must be a finite 1-D vector")
        for label in ("dispersion", "precision_shape", "precision_rate", "extra_dispersion"):
            value = getattr(self, label)
            if value is not None and not (np.isfinite(value) and value > 0.0):
                raise ValidationError(f"{label} must be strictly positive and finite")
        coef.flags.writeable = False
        object.__setattr__(self, "coef", coef)

    def require(self, *labels: str) -> None:
        missing = [lab for lab in labels if getattr(self, lab) is None]
        if missing:
            raise ValidationError(f"model requires parameters: {', '.join(missing)}")


@dataclass(frozen=True)
class FuzzyObservation:
    """Observed statistic pair (location, precision) on a known count space."""

    location: float
    precision: float
    k_max: int

    def __post_init__(self):
        if self.k_max < 1:
            raise ValidationError("k_max must be at least 1")
        if not 0.0 <= self.location <= self.k_max:
            raise ValidationError(
                f"location {self.location} outside [0, {self.k_max}]"
            )
        if not (np.isfinite(self.precision) and self.precision > 0.0):
            raise ValidationError("precision must be strictly positive")


def observation_arrays(observations) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split a sequence of observations into (locations, precisions, k_max)."""
    obs = list(observations)
    locations = np.array([o.location for o in obs], dtype=np.float64)
    precisions = np.array([o.precision for o in obs], dtype=np.float64)
    k = np.array([o.k_max for o in obs], dtype=np.int64)
    return locations, precisions, k


# ---------------------------------------------------------------------------
# elementary densities
# ---------------------------------------------------------------------------


def linear_means(spec: RegressionSpec, params: ModelParams) -> np.ndarray:
    """mu_i = u_i * exp(z_i . coef) for all samples."""
    if params.coef.size != spec.n_covariates:
        raise ValidationError(
            f"coef has {params.coef.size} entries, design has {spec.n_covariates} columns"
        )
    eta = np.log(spec.offsets) + spec.covariates @ params.coef
    if np.any(eta > _MAX_LINEAR_PREDICTOR):
        worst = float(eta.max())
        raise NumericalError(f"linear predictor overflow: eta={worst:.3g} exceeds exp() range")
    return np.exp(eta)


def mean_response(spec: RegressionSpec, params: ModelParams, i: int) -> float:
    """Mean of the latent count for one sample."""
    if not 0 <= i < spec.n_samples:
        raise ValidationError(f"sample index {i} out of range")
    return float(linear_means(spec, params)[i])


def negbin_log_pmf(y, mu, kappa):
    """Negative binomial log pmf, mean-dispersion form (Var = mu + mu^2/kappa)."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(np.asarray(mu) <= 0.0) or np.any(np.asarray(kappa) <= 0.0):
        raise ValidationError("mu and kappa must be strictly positive")
    return (
        gammaln(y + kappa)
        - gammaln(kappa)
        - gammaln(y + 1.0)
        + kappa * (np.log(kappa) - np.log(kappa + mu))
        + y * (np.log(mu) - np.log(kappa + mu))
    )


def truncated_count_pmf(mu: float, kappa: float, k: int):
    """Negative binomial pmf restricted and renormalised to {0..k}."""
    from .kernel import LatentCountModel

    if k < 0:
        raise ValidationError("truncation level must be non-negative")
    lp = negbin_log_pmf(np.arange(k + 1), mu, kappa)
    peak = lp.max()
    mass = np.exp(lp - peak)
    log_total = peak + np.log(mass.sum())
    if log_total < _LOG_TINY:
        raise NumericalError(
            f"truncation incompatible with mean: mass below 1e-300 on {{0..{k}}} "
            f"for mu={mu:.3g}, kappa={kappa:.3g}"
        )
    pmf = mass / mass.sum()
    return LatentCountModel(pmf)


def corrected_scaled_count(y, k):
    """Scaled count (y + 1/2) / (k + 1); keeps Beta shapes positive at 0 and k."""
    return (np.asarray(y, dtype=np.float64) + 0.5) / (np.asarray(k, dtype=np.float64) + 1.0)


def clamp_scaled_location(location, k) -> np.ndarray:
    """Scaled report location clipped into the open support of the Beta density.

    The clip interval [1/(2k+2), 1 - 1/(2k+2)] equals the range of the
    corrected scaled counts, so a clamped location and a boundary count meet
    at the same point. Idempotent.
    """
    k = np.asarray(k, dtype=np.float64)
    lo = 1.0 / (2.0 * k + 2.0)
    return np.clip(np.asarray(location, dtype=np.float64) / k, lo, 1.0 - lo)


def cond_location_log_density(c_bar, h, y_bar):
    """Log density of the scaled report location: Beta(h*ybar, h*(1-ybar))."""
    c_bar = np.asarray(c_bar, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    y_bar = np.asarray(y_bar, dtype=np.float64)
    if np.any(c_bar <= 0.0) or np.any(c_bar >= 1.0):
        raise ValidationError("c_bar must lie strictly inside (0, 1); clamp first")
    a = h * y_bar
    b = h * (1.0 - y_bar)
    if np.any(a <= 0.0) or np.any(b <= 0.0):
        raise ValidationError("Beta shapes must be positive; need h > 0, y_bar in (0, 1)")
    out = (a - 1.0) * np.log(c_bar) + (b - 1.0) * np.log1p(-c_bar) - betaln(a, b)
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(out)))[0]
        raise NumericalError(
            f"non-finite Beta log density at shapes a={np.atleast_1d(a).ravel()[bad[0]]:.3g}, "
            f"b={np.atleast_1d(b).ravel()[bad[0]]:.3g}"
        )
    return out if out.ndim else float(out)


def gamma_precision_loglik(precisions: np.ndarray, shape: float, rate: float) -> float:
    """Log likelihood of the observed precisions under Gamma(shape, rate)."""
    precisions = np.asarray(precisions, dtype=np.float64)
    if np.any(precisions <= 0.0):
        raise ValidationError("precisions must be strictly positive")
    if shape <= 0.0 or rate <= 0.0:
        raise ValidationError("Gamma shape and rate must be strictly positive")
    n = precisions.size
    return float(
        n * (shape * np.log(rate) - gammaln(shape))
        + (shape - 1.0) * np.log(precisions).sum()
        - rate * precisions.sum()
    )


# ---------------------------------------------------------------------------
# observed-data log likelihoods
# ---------------------------------------------------------------------------


def _mixture_count_loglik(
    spec: RegressionSpec,
    mu: np.ndarray,
    kappa: float,
    locations: np.ndarray,
    precisions: np.ndarray,
    k: np.ndarray,
) -> float:
    """Per-sample log of sum_y trunc_pmf(y) * beta_density(cbar | h, ybar(y))."""
    total = 0.0
    cbar = clamp_scaled_location(locations, k)
    for i in range(spec.n_samples):
        grid = np.arange(k[i] + 1)
        lp = negbin_log_pmf(grid, mu[i], kappa)
        log_norm = _logsumexp(lp)
        if log_norm < _LOG_TINY:
            raise NumericalError(f"sample {i}: truncation incompatible with mean")
        ybar = corrected_scaled_count(grid, k[i])
        b = cond_location_log_density(cbar[i], precisions[i], ybar)
        term = _logsumexp(lp + b) - log_norm
        if not np.isfinite(term):
            raise NumericalError(f"sample {i}: non-finite likelihood contribution")
        total += term
    return total


def _logsumexp(values: np.ndarray) -> float:
    peak = values.max()
    if not np.isfinite(peak):
        return float(peak)
    return float(peak + np.log(np.exp(values - peak).sum()))


def cnar_observed_loglik(spec: RegressionSpec, params: ModelParams, data) -> float:
    """Observed-data log likelihood with the latent count marginalised out."""
    params.require("dispersion", "precision_shape", "precision_rate")
    locations, precisions, k = observation_arrays(data)
    _check_alignment(spec, locations, k)
    if locations.size == 0:
        return 0.0
    mu = linear_means(spec, params)
    gamma_block = gamma_precision_loglik(
        precisions, params.precision_shape, params.precision_rate
    )
    count_block = _mixture_count_loglik(
        spec, mu, params.dispersion, locations, precisions, k
    )
    return gamma_block + count_block


def _car_loglik(spec: RegressionSpec, params: ModelParams, data, scale) -> float:
    locations, precisions, k = observation_arrays(data)
    _check_alignment(spec, locations, k)
    if locations.size == 0:
        return 0.0
    mu = linear_means(spec, params)
    cbar = clamp_scaled_location(locations, k)
    m = np.clip(mu / k, 1.0 / (2.0 * k + 2.0), 1.0 - 1.0 / (2.0 * k + 2.0))
    beta_block = cond_location_log_density(cbar, scale * precisions, m).sum()
    gamma_block = gamma_precision_loglik(
        precisions, params.precision_shape, params.precision_rate
    )
    return float(gamma_block + beta_block)


def car1_observed_loglik(spec: RegressionSpec, params: ModelParams, data) -> float:
    """Ignorable baseline: report location conditioned on the scaled mean only.

    No latent count appears, so this likelihood carries no count-level
    variability (and no dispersion parameter).
    """
    params.require("precision_shape", "precision_rate")
    return _car_loglik(spec, params, data, scale=1.0)


def car2_observed_loglik(spec: RegressionSpec, params: ModelParams, data) -> float:
    """Ignorable baseline with Beta shapes scaled by the extra dispersion."""
    params.require("precision_shape", "precision_rate", "extra_dispersion")
    return _car_loglik(spec, params, data, scale=params.extra_dispersion)


def scalar_observed_loglik(spec: RegressionSpec, params: ModelParams, counts) -> float:
    """Negative binomial regression on scalar (defuzzified) counts."""
    params.require("dispersion")
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape != (spec.n_samples,):
        raise ValidationError("counts must have one entry per sample")
    if np.any(counts < 0.0):
        raise ValidationError("counts must be non-negative")
    if counts.size == 0:
        return 0.0
    mu = linear_means(spec, params)
    return float(negbin_log_pmf(counts, mu, params.dispersion).sum())


def _check_alignment(spec: RegressionSpec, locations, k) -> None:
    if locations.size != spec.n_samples:
        raise ValidationError(
            f"{locations.size} observations for {spec.n_samples} design rows"
        )
    if locations.size and np.any(k != spec.k_max):
        raise ValidationError("observation k_max disagrees with the design k_max")


# ---------------------------------------------------------------------------
# priors and the unconstrained parametrization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PriorSpec:
    """Independent Normal priors on the unconstrained parameters.

    Coefficients are Normal(0, coef_sd) directly; every positive parameter
    gets a Normal prior on its logarithm, which doubles as the transform, so
    no separate Jacobian bookkeeping is needed.
    """

    coef_sd: float = 5.0
    log_dispersion_sd: float = 1.5
    log_precision_shape_sd: float = 1.5
    log_precision_rate_sd: float = 1.5
    log_extra_dispersion_sd: float = 1.0

    def __post_init__(self):
        for label in (
            "coef_sd",
            "log_dispersion_sd",
            "log_precision_shape_sd",
            "log_precision_rate_sd",
            "log_extra_dispersion_sd",
        ):
            if not getattr(self, label) > 0.0:
                raise ValidationError(f"{label} must be strictly positive")


_POSITIVE_BLOCKS = {
    "cnar": ("dispersion", "precision_shape", "precision_rate"),
    "car1": ("precision_shape", "precision_rate"),
    "car2": ("precision_shape", "precision_rate", "extra_dispersion"),
    "scalar": ("dispersion",),
}

_PRIOR_SD_FIELD = {
    "dispersion": "log_dispersion_sd",
    "precision_shape": "log_precision_shape_sd",
    "precision_rate": "log_precision_rate_sd",
    "extra_dispersion": "log_extra_dispersion_sd",
}


def check_model_name(model: str) -> str:
    if model not in MODEL_NAMES:
        raise ValidationError(f"unknown model '{model}'; choose one of {MODEL_NAMES}")
    return model


def parameter_names(model: str, covariate_names=None, n_covariates=None) -> list[str]:
    model = check_model_name(model)
    if covariate_names is not None:
        coef = [f"coef_{name}" for name in covariate_names]
    else:
        coef = [f"coef_{j}" for j in range(int(n_covariates))]
    return coef + list(_POSITIVE_BLOCKS[model])


def pack_params(params: ModelParams, model: str) -> np.ndarray:
    """Constrained parameters -> unconstrained vector (logs for positives)."""
    model = check_model_name(model)
    params.require(*_POSITIVE_BLOCKS[model])
    tail = [np.log(getattr(params, label)) for label in _POSITIVE_BLOCKS[model]]
    return np.concatenate([params.coef, np.array(tail)])


def unpack_params(phi: np.ndarray, n_covariates: int, model: str) -> ModelParams:
    """Unconstrained vector -> constrained parameters."""
    model = check_model_name(model)
    phi = np.asarray(phi, dtype=np.float64)
    labels = _POSITIVE_BLOCKS[model]
    if phi.shape != (n_covariates + len(labels),):
        raise ValidationError(
            f"parameter vector for '{model}' must have length {n_covariates + len(labels)}"
        )
    values = {label: float(np.exp(phi[n_covariates + j])) for j, label in enumerate(labels)}
    return ModelParams(coef=phi[:n_covariates].copy(), **values)


def params_from_constrained(values, n_covariates: int, model: str) -> ModelParams:
    """Constrained-scale vector (in `parameter_names` order) -> ModelParams."""
    model = check_model_name(model)
    values = np.asarray(values, dtype=np.float64)
    labels = _POSITIVE_BLOCKS[model]
    if values.shape != (n_covariates + len(labels),):
        raise ValidationError(
            f"constrained vector for '{model}' must have length {n_covariates + len(labels)}"
        )
    fields = {label: float(values[n_covariates + j]) for j, label in enumerate(labels)}
    return ModelParams(coef=values[:n_covariates].copy(), **fields)


def _prior_sds(priors: PriorSpec, n_covariates: int, model: str) -> np.ndarray:
    tail = [getattr(priors, _PRIOR_SD_FIELD[label]) for label in _POSITIVE_BLOCKS[model]]
    return np.concatenate([np.full(n_covariates, priors.coef_sd), np.array(tail)])


# ---------------------------------------------------------------------------
# posterior target (log density + gradient on the unconstrained scale)
# ---------------------------------------------------------------------------


class Posterior:
    """Callable log posterior with analytic gradient for one model instance.

    Evaluation happens on the unconstrained scale. Points where the
    likelihood cannot be evaluated (overflowing predictors, underflowing
    truncations) get log density -inf rather than an exception, so samplers
    can treat them as divergences.
    """

    def __init__(
        self,
        spec: RegressionSpec,
        data,
        priors: PriorSpec,
        model: str,
        exact_truncation: bool = True,
        tail_mass: float = 1.0e-12,
    ):
        self.model = check_model_name(model)
        self.spec = spec
        self.priors = priors
        self.exact_truncation = bool(exact_truncation)
        self.tail_mass = float(tail_mass)
        self.n_covariates = spec.n_covariates
        self.names = parameter_names(
            model, spec.covariate_names, n_covariates=spec.n_covariates
        )
        self.dim = len(self.names)
        self._sds = _prior_sds(priors, spec.n_covariates, model)
        self._z = spec.covariates
        self._logu = np.log(spec.offsets)
        self._kvec = spec.k_max.astype(np.float64)

        if self.model == "scalar":
            counts = np.asarray(data, dtype=np.float64)
            if counts.shape != (spec.n_samples,):
                raise ValidationError("counts must have one entry per sample")
            if np.any(counts < 0.0) or not np.all(np.isfinite(counts)):
                raise ValidationError("counts must be finite and non-negative")
            self._counts = counts
            return

        locations, precisions, k = observation_arrays(data)
        _check_alignment(spec, locations, k)
        self._h = precisions
        self._sum_log_h = float(np.log(precisions).sum()) if precisions.size else 0.0
        self._sum_h = float(precisions.sum())
        self._cbar = clamp_scaled_location(locations, k)
        self._logit_cbar = np.log(self._cbar) - np.log1p(-self._cbar)
        self._m_lo = 1.0 / (2.0 * self._kvec + 2.0)

        if self.model == "cnar":
            grid_len = int(spec.k_max.max()) + 1 if spec.n_samples else 1
            grid = np.arange(grid_len, dtype=np.float64)
            self._grid = grid
            self._valid = grid[None, :] <= self._kvec[:, None]
            self._uniform_k = bool(np.all(spec.k_max == spec.k_max[0])) if spec.n_samples else True
            ybar = corrected_scaled_count(grid[None, :], self._kvec[:, None])
            a = precisions[:, None] * ybar
            b = precisions[:, None] * (1.0 - ybar)
            logc = np.log(self._cbar)[:, None]
            log1mc = np.log1p(-self._cbar)[:, None]
            beta_mat = (a - 1.0) * logc + (b - 1.0) * log1mc - betaln(a, b)
            if not np.all(np.isfinite(beta_mat[self._valid])):
                bad = int(np.argwhere(~np.isfinite(beta_mat) & self._valid)[0][0])
                raise NumericalError(f"sample {bad}: non-finite report density")
            self._beta_mat = np.where(self._valid, beta_mat, -np.inf)
            self._lgamma_fact = gammaln(grid + 1.0)
            # scratch space reused across evaluations; the likelihood loop is
            # memory-bound, so temporaries are the dominant cost
            self._scratch = (np.empty_like(beta_mat), np.empty_like(beta_mat))

    # -- prior ------------------------------------------------------------

    def _prior_logp_grad(self, phi: np.ndarray):
        z = phi / self._sds
        logp = float(-0.5 * z @ z - np.log(self._sds).sum() - self.dim * _PRIOR_NORM)
        return logp, -z / self._sds

    # -- public surface ----------------------------------------------------

    def initial_point(self) -> np.ndarray:
        """Prior mean on the unconstrained scale."""
        return np.zeros(self.dim)

    def constrain(self, phi: np.ndarray) -> np.ndarray:
        """Map an unconstrained vector to constrained values, in `names` order."""
        phi = np.asarray(phi, dtype=np.float64)
        out = phi.copy()
        out[self.n_covariates :] = np.exp(phi[self.n_covariates :])
        return out

    def to_params(self, phi: np.ndarray) -> ModelParams:
        return unpack_params(phi, self.n_covariates, self.model)

    def logp(self, phi: np.ndarray) -> float:
        return self.logp_and_grad(phi)[0]

    def logp_and_grad(self, phi: np.ndarray):
        phi = np.asarray(phi, dtype=np.float64)
        if phi.shape != (self.dim,):
            raise ValidationError(f"parameter vector must have length {self.dim}")
        if not np.all(np.isfinite(phi)):
            return -np.inf, np.zeros(self.dim)
        # reject points whose constrained values overflow or underflow exp()
        if np.any(np.abs(phi[self.n_covariates :]) > _MAX_LINEAR_PREDICTOR):
            return -np.inf, np.zeros(self.dim)
        eta = self._logu + self._z @ phi[: self.n_covariates]
        if np.any(np.abs(eta) > _MAX_LINEAR_PREDICTOR):
            return -np.inf, np.zeros(self.dim)
        mu = np.exp(eta)
        if self.model == "cnar":
            return self._cnar_logp_grad(phi, mu)
        if self.model in ("car1", "car2"):
            return self._car_logp_grad(phi, mu)
        return self._scalar_logp_grad(phi, mu)

    # -- model blocks -------------------------------------------------------

    def _gamma_block(self, shape: float, rate: float, n: int):
        logp = (
            n * (shape * np.log(rate) - gammaln(shape))
            + (shape - 1.0) * self._sum_log_h
            - rate * self._sum_h
        )
        d_shape = n * (np.log(rate) - digamma(shape)) + self._sum_log_h
        d_rate = n * shape / rate - self._sum_h
        return logp, d_shape, d_rate

    def _cnar_logp_grad(self, phi: np.ndarray, mu: np.ndarray):
        p = self.n_covariates
        kappa, shape, rate = np.exp(phi[p : p + 3])
        n = mu.size

        grid = self._grid
        if self.exact_truncation or mu.size == 0:
            hi = grid.size
        else:
            hi = self._cutoff(mu.max(), kappa)
        grid = grid[:hi]
        valid = self._valid[:, :hi]
        beta_mat = self._beta_mat[:, :hi]

        log_kmu = np.log(kappa + mu)
        row_const = kappa * (np.log(kappa) - log_kmu) - gammaln(kappa)
        slope = np.log(mu) - log_kmu
        col_const = gammaln(grid + kappa) - self._lgamma_fact[:hi]

        # lp and lp + beta built in reusable scratch to avoid temporaries
        lp = self._scratch[0][:, :hi]
        np.multiply(slope[:, None], grid[None, :], out=lp)
        lp += row_const[:, None]
        lp += col_const[None, :]
        if not self._uniform_k:
            lp[~valid] = -np.inf
        top = self._scratch[1][:, :hi]
        np.add(lp, beta_mat, out=top)

        top_peak = top.max(axis=1)
        bot_peak = lp.max(axis=1)
        if not (np.all(np.isfinite(top_peak)) and np.all(np.isfinite(bot_peak))):
            return -np.inf, np.zeros(self.dim)
        top -= top_peak[:, None]
        np.exp(top, out=top)
        lp -= bot_peak[:, None]
        np.exp(lp, out=lp)
        w, q = top, lp
        w_sum = w.sum(axis=1)
        q_sum = q.sum(axis=1)
        count_ll = float(
            (top_peak + np.log(w_sum)).sum() - (bot_peak + np.log(q_sum)).sum()
        )

        # first moments of the count under the posterior mixture and under the
        # bare truncated pmf; their gap drives the regression gradient
        delta_y = (w @ grid) / w_sum - (q @ grid) / q_sum
        psi_grid = digamma(grid + kappa)
        delta_psi = (w @ psi_grid) / w_sum - (q @ psi_grid) / q_sum

        d_coef = self._z.T @ (delta_y * (kappa / (kappa + mu)))
        d_kappa = float((delta_psi - delta_y / (kappa + mu)).sum()) * kappa

        gamma_ll, d_shape, d_rate = self._gamma_block(shape, rate, n)
        prior_ll, prior_grad = self._prior_logp_grad(phi)

        grad = np.concatenate(
            [d_coef, [d_kappa, d_shape * shape, d_rate * rate]]
        ) + prior_grad
        logp = count_ll + gamma_ll + prior_ll
        if not np.isfinite(logp):
            return -np.inf, np.zeros(self.dim)
        return float(logp), grad

    def _cutoff(self, mu_max: float, kappa: float) -> int:
        """Grid length capturing all but `tail_mass` of the widest count pmf."""
        grid = self._grid
        lp = (
            gammaln(grid + kappa)
            - self._lgamma_fact
            + kappa * (np.log(kappa) - np.log(kappa + mu_max))
            + grid * (np.log(mu_max) - np.log(kappa + mu_max))
        )
        mass = np.exp(lp - lp.max())
        csum = np.cumsum(mass)
        cut = int(np.searchsorted(csum, (1.0 - self.tail_mass) * csum[-1])) + 1
        return min(grid.size, cut + 1)

    def _car_logp_grad(self, phi: np.ndarray, mu: np.ndarray):
        p = self.n_covariates
        shape, rate = np.exp(phi[p : p + 2])
        lam = np.exp(phi[p + 2]) if self.model == "car2" else 1.0
        n = mu.size

        raw = mu / self._kvec
        m = np.clip(raw, self._m_lo, 1.0 - self._m_lo)
        free = (raw > self._m_lo) & (raw < 1.0 - self._m_lo)
        s = lam * self._h
        a = s * m
        b = s * (1.0 - m)
        beta_ll = float(
            ((a - 1.0) * np.log(self._cbar)
             + (b - 1.0) * np.log1p(-self._cbar)
             - betaln(a, b)).sum()
        )
        dm = s * (self._logit_cbar - digamma(a) + digamma(b))
        d_coef = self._z.T @ (np.where(free, dm, 0.0) * mu / self._kvec)

        gamma_ll, d_shape, d_rate = self._gamma_block(shape, rate, n)
        prior_ll, prior_grad = self._prior_logp_grad(phi)
        logp = beta_ll + gamma_ll + prior_ll
        if not np.isfinite(logp):
            return -np.inf, np.zeros(self.dim)

        pieces = [d_coef, [d_shape * shape, d_rate * rate]]
        if self.model == "car2":
            d_lam = float(
                (
                    self._h * m * np.log(self._cbar)
                    + self._h * (1.0 - m) * np.log1p(-self._cbar)
                    - self._h * m * digamma(a)
                    - self._h * (1.0 - m) * digamma(b)
                    + self._h * digamma(s)
                ).sum()
            )
            pieces.append([d_lam * lam])
        grad = np.concatenate([np.asarray(x, dtype=np.float64) for x in pieces])
        return float(logp), grad + prior_grad

    def _scalar_logp_grad(self, phi: np.ndarray, mu: np.ndarray):
        p = self.n_covariates
        kappa = float(np.exp(phi[p]))
        y = self._counts
        kmu = kappa + mu
        ll = float(
            (
                gammaln(y + kappa)
                - gammaln(kappa)
                - gammaln(y + 1.0)
                + kappa * (np.log(kappa) - np.log(kmu))
                + y * (np.log(mu) - np.log(kmu))
            ).sum()
        )
        d_coef = self._z.T @ (y - mu * (y + kappa) / kmu)
        d_kappa = float(
            (
                digamma(y + kappa)
                - digamma(kappa)
                + np.log(kappa)
                + 1.0
                - np.log(kmu)
                - (y + kappa) / kmu
            ).sum()
        ) * kappa
        prior_ll, prior_grad = self._prior_logp_grad(phi)
        logp = ll + prior_ll
        if not np.isfinite(logp):
            return -np.inf, np.zeros(self.dim)
        return float(logp), np.concatenate([d_coef, [d_kappa]]) + prior_grad


def log_posterior(spec, phi, data, priors, model, exact_truncation=True) -> float:
    """Log posterior at an unconstrained parameter vector."""
    return Posterior(spec, data, priors, model, exact_truncation).logp(phi)


def grad_log_posterior(spec, phi, data, priors, model, exact_truncation=True) -> np.ndarray:
    """Analytic gradient of the log posterior on the unconstrained scale."""
    post = Posterior(spec, data, priors, model, exact_truncation)
    logp, grad = post.logp_and_grad(phi)
    if not np.isfinite(logp):
        raise NumericalError("log posterior not finite at the requested point")
    if not np.all(np.isfinite(grad)):
        bad = post.names[int(np.flatnonzero(~np.isfinite(grad))[0])]
        raise NumericalError(f"non-finite gradient component for parameter '{bad}'")
    return grad


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimulatedData:
    """Synthetic fuzzy observations, plus the latent counts when they exist."""

    observations: tuple[FuzzyObservation, ...]
    latent_counts: np.ndarray | None = None


def simulate(spec: RegressionSpec, params: ModelParams, seed, model: str = "cnar") -> SimulatedData:
    """Draw a synthetic dataset from one of the report models.

    Deterministic for a fixed seed (an int or a numpy SeedSequence): the
    draw order is precisions, then latent counts (cnar only), then report
    locations.
    """
    model = check_model_name(model)
    if model == "scalar":
        raise ValidationError("the scalar proxy has no fuzzy simulator; use 'cnar'")
    params.require("precision_shape", "precision_rate")
    if model == "cnar":
        params.require("dispersion")
    if model == "car2":
        params.require("extra_dispersion")

    rng = np.random.default_rng(seed)
    n = spec.n_samples
    k = spec.k_max
    mu = linear_means(spec, params)
    h = rng.gamma(shape=params.precision_shape, scale=1.0 / params.precision_rate, size=n)

    latent = None
    if model == "cnar":
        latent = np.empty(n, dtype=np.int64)
        u = rng.random(n)
        for i in range(n):
            pmf = truncated_count_pmf(mu[i], params.dispersion, int(k[i])).pmf
            latent[i] = int(np.searchsorted(np.cumsum(pmf), u[i]))
        ybar = corrected_scaled_count(latent, k)
        scaled = rng.beta(h * ybar, h * (1.0 - ybar))
    else:
        lam = params.extra_dispersion if model == "car2" else 1.0
        lo = 1.0 / (2.0 * k + 2.0)
        m = np.clip(mu / k, lo, 1.0 - lo)
        scaled = rng.beta(lam * h * m, lam * h * (1.0 - m))

    observations = tuple(
        FuzzyObservation(location=float(k[i] * scaled[i]), precision=float(h[i]), k_max=int(k[i]))
        for i in range(n)
    )
    return SimulatedData(observations=observations, latent_counts=latent)
