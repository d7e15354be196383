import numpy as np
import pytest

from grancount import ModelParams, RegressionSpec, simulate


def make_spec(n=20, k=60, seed=0, offset=10.0, names=("intercept", "x")):
    """Small regression design with an intercept and one standard-normal covariate."""
    rng = np.random.default_rng(seed)
    z = np.column_stack([np.ones(n), rng.standard_normal(n)])
    return RegressionSpec(
        covariates=z,
        offsets=np.full(n, offset),
        k_max=np.full(n, k, dtype=np.int64),
        covariate_names=names,
    )


def make_params(model="cnar", coef=(1.0, 0.5)):
    if model == "car1":
        return ModelParams(coef=np.asarray(coef), precision_shape=4.0, precision_rate=0.1)
    if model == "car2":
        return ModelParams(
            coef=np.asarray(coef),
            precision_shape=4.0,
            precision_rate=0.1,
            extra_dispersion=2.0,
        )
    if model == "scalar":
        return ModelParams(coef=np.asarray(coef), dispersion=2.0)
    return ModelParams(
        coef=np.asarray(coef), dispersion=2.0, precision_shape=4.0, precision_rate=0.1
    )


@pytest.fixture(scope="session")
def small_cnar_data():
    """One simulated CNAR dataset shared by likelihood and gradient tests."""
    spec = make_spec(n=25, k=60, seed=11)
    params = make_params("cnar")
    sim = simulate(spec, params, seed=21, model="cnar")
    return spec, params, sim
