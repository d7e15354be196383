"""Command-line pipeline: count, fit, simulate, infer, ppc, kernel-audit.

All stages read and write local files only. A run is fully determined by its
inputs, the configuration file, and the seeds inside it; outputs are
byte-identical across repeated runs (timestamps live in isolated metadata
blocks of the JSON sidecars).

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import fuzzy, inference, model, possibility, ppc
from . import kernel as kernel_mod
from .errors import NumericalError, ValidationError

logger = logging.getLogger("grancount")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class PriorConfig:
    coef_sd: float = 5.0
    log_dispersion_sd: float = 1.5
    log_precision_shape_sd: float = 1.5
    log_precision_rate_sd: float = 1.5
    log_extra_dispersion_sd: float = 1.0

    def to_spec(self) -> model.PriorSpec:
        return model.PriorSpec(**dataclasses.asdict(self))


@dataclass
class HmcSection:
    n_chains: int = 4
    n_warmup: int = 1000
    n_draws: int = 1000
    target_accept: float = 0.8
    max_leapfrog: int = 512
    seed: int = 0
    init_jitter: float = 0.5

    def to_config(self) -> inference.HmcConfig:
        return inference.HmcConfig(**dataclasses.asdict(self))


@dataclass
class FitSection:
    tol: float = 1.0e-8
    max_iter: int = 500
    crisp_precision: float = fuzzy.CRISP_PRECISION_CEILING


@dataclass
class PpcSection:
    n_reps: int = 200
    grid: int = 101


@dataclass
class SimulateSection:
    n_samples: int = 200
    k: int = 500
    coef: list[float] = field(default_factory=lambda: [1.0, 0.5])
    dispersion: float = 2.0
    precision_shape: float = 4.0
    precision_rate: float = 0.1
    extra_dispersion: float = 1.0
    offset: float = 1.0


@dataclass
class TruncationSection:
    exact: bool = False
    tail_mass: float = 1.0e-12


@dataclass
class RunConfig:
    seed: int = 0
    model: str = "cnar"
    add_intercept: bool = True
    workers: int = 1
    car_tol: float = 1.0e-9
    priors: PriorConfig = field(default_factory=PriorConfig)
    hmc: HmcSection = field(default_factory=HmcSection)
    fit: FitSection = field(default_factory=FitSection)
    ppc: PpcSection = field(default_factory=PpcSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    truncation: TruncationSection = field(default_factory=TruncationSection)

    def validate(self) -> "RunConfig":
        model.check_model_name(self.model)
        if self.workers < 1:
            raise ValidationError("workers must be at least 1")
        if self.simulate.n_samples < 1 or self.simulate.k < 1:
            raise ValidationError("simulate.n_samples and simulate.k must be positive")
        if self.simulate.offset <= 0.0:
            raise ValidationError("simulate.offset must be strictly positive")
        if self.ppc.n_reps < 1 or self.ppc.grid < 2:
            raise ValidationError("ppc.n_reps must be >= 1 and ppc.grid >= 2")
        if not self.car_tol > 0.0:
            raise ValidationError("car_tol must be strictly positive")
        self.hmc.to_config()
        self.priors.to_spec()
        return self


def _build_section(cls, payload, path):
    if not isinstance(payload, dict):
        raise ValidationError(f"config section '{path}' must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(payload) - set(known)
    if unknown:
        raise ValidationError(
            f"unknown config key(s): {', '.join(sorted(path + '.' + u for u in unknown))}"
        )
    kwargs = {}
    for name, value in payload.items():
        f = known[name]
        if dataclasses.is_dataclass(f.type) or f.name in (
            "priors",
            "hmc",
            "fit",
            "ppc",
            "simulate",
            "truncation",
        ):
            kwargs[name] = _build_section(_SECTION_TYPES[name], value, f"{path}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"config section '{path}': {exc}") from None


_SECTION_TYPES = {
    "priors": PriorConfig,
    "hmc": HmcSection,
    "fit": FitSection,
    "ppc": PpcSection,
    "simulate": SimulateSection,
    "truncation": TruncationSection,
}


def load_config(path=None, overrides=()) -> RunConfig:
    """Build the run configuration from an optional JSON file plus overrides.

    Overrides use dotted paths, e.g. ``hmc.n_draws=200``. Unknown keys are
    rejected.
    """
    payload = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                payload = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(payload, dict):
            raise ValidationError(f"{path}: top level must be a JSON object")
    config = _build_section(RunConfig, payload, "config")
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override '{item}' must look like key.path=value")
        raw_key, raw_value = item.split("=", 1)
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        target = config
        parts = raw_key.split(".")
        for part in parts[:-1]:
            if not hasattr(target, part) or not dataclasses.is_dataclass(getattr(target, part)):
                raise ValidationError(f"unknown config section '{raw_key}'")
            target = getattr(target, part)
        leaf = parts[-1]
        if not hasattr(target, leaf) or dataclasses.is_dataclass(getattr(target, leaf)):
            raise ValidationError(f"unknown config key '{raw_key}'")
        setattr(target, leaf, value)
    return config.validate()


def config_to_json(config: RunConfig) -> str:
    return json.dumps(dataclasses.asdict(config), indent=2, sort_keys=True)


def _metadata(stage: str, config: RunConfig | None = None) -> dict:
    meta = {"stage": stage, "created_unix": time.time()}
    if config is not None:
        meta["config"] = dataclasses.asdict(config)
    return meta


# ---------------------------------------------------------------------------
# shared IO helpers
# ---------------------------------------------------------------------------


def _read_covariates_csv(path):
    """Read sample_id, covariate columns, and an optional offset column."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        if not header or header[0] != "sample_id":
            raise ValidationError(f"{path}: first column must be 'sample_id'")
        names = header[1:]
        has_offset = bool(names) and names[-1] == "offset"
        if has_offset:
            names = names[:-1]
        ids, rows, offsets = [], [], []
        for i, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValidationError(f"{path}: line {i}: wrong cell count")
            try:
                values = [float(v) for v in row[1:]]
            except ValueError:
                raise ValidationError(f"{path}: line {i}: malformed numeric cell") from None
            ids.append(row[0])
            if has_offset:
                offsets.append(values[-1])
                values = values[:-1]
            rows.append(values)
    if not ids:
        raise ValidationError(f"{path}: no data rows")
    matrix = np.array(rows, dtype=np.float64)
    offset_arr = np.array(offsets) if has_offset else np.ones(len(ids))
    return ids, tuple(names), matrix, offset_arr


def _align(stats_ids, cov_ids):
    stats_index = {sid: i for i, sid in enumerate(stats_ids)}
    cov_index = {sid: i for i, sid in enumerate(cov_ids)}
    if len(stats_index) != len(stats_ids) or len(cov_index) != len(cov_ids):
        raise ValidationError("duplicate sample ids")
    missing_cov = [sid for sid in stats_ids if sid not in cov_index]
    missing_stats = [sid for sid in cov_ids if sid not in stats_index]
    if missing_cov or missing_stats:
        raise ValidationError(
            "sample id mismatch; missing covariates for "
            f"{missing_cov or 'none'}, missing statistics for {missing_stats or 'none'}"
        )
    return [cov_index[sid] for sid in stats_ids]


def _build_regression_spec(stats_path, covariates_path, add_intercept):
    ids, locations, precisions, ks = fuzzy.read_stats_csv(stats_path)
    cov_ids, cov_names, matrix, offsets = _read_covariates_csv(covariates_path)
    order = _align(ids, cov_ids)
    matrix = matrix[order]
    offsets = offsets[order]
    if add_intercept:
        matrix = np.column_stack([np.ones(len(ids)), matrix])
        cov_names = ("intercept",) + cov_names
    spec = model.RegressionSpec(
        covariates=matrix, offsets=offsets, k_max=ks, covariate_names=cov_names
    )
    observations = [
        model.FuzzyObservation(location=c, precision=h, k_max=int(k))
        for c, h, k in zip(locations, precisions, ks)
    ]
    return ids, spec, observations


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def cmd_count(args) -> int:
    assign = possibility.read_possibility_csv(args.possibility)
    logger.info(
        "stage=count input=%s n_obs=%d n_ref=%d normalized=%s",
        args.possibility,
        assign.n_obs,
        assign.n_ref,
        assign.is_normalized,
    )
    names = list(assign.referent_names or [f"ref{j}" for j in range(assign.n_ref)])
    vectors = [possibility.granular_count_fast(assign, r) for r in range(assign.n_ref)]
    possibility.write_counts_csv(args.out, names, vectors)
    logger.info("stage=count out=%s rows=%d k=%d", args.out, len(vectors), vectors[0].k_max)
    return EXIT_OK


def _fit_row(payload):
    values, tol, max_iter, crisp = payload
    mv = possibility.MembershipVector(np.asarray(values))
    return fuzzy.fit_beta(mv, crisp_ceiling=crisp, tol=tol, max_iter=max_iter)


def cmd_fit(args, config: RunConfig) -> int:
    with open(args.counts, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{args.counts}: empty file") from None
        if len(header) < 2 or header[0] != "id":
            raise ValidationError(f"{args.counts}: expected header 'id,y0,...,yK'")
        raw = []
        for i, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValidationError(f"{args.counts}: line {i}: wrong cell count")
            try:
                raw.append((row[0], [float(v) for v in row[1:]]))
            except ValueError:
                raise ValidationError(f"{args.counts}: line {i}: malformed cell") from None

    usable, dropped = [], 0
    for sample_id, values in raw:
        arr = np.asarray(values)
        if arr.size < 2 or arr.max() <= 0.0:
            logger.info("stage=fit sample=%s dropped reason=empty-support", sample_id)
            dropped += 1
            continue
        if arr.max() < 1.0 - 1.0e-9:
            logger.info("stage=fit sample=%s dropped reason=not-normalized max=%g", sample_id, arr.max())
            dropped += 1
            continue
        usable.append((sample_id, values))
    if not usable:
        raise ValidationError("no usable rows after support checks")

    payloads = [
        (values, config.fit.tol, config.fit.max_iter, config.fit.crisp_precision)
        for _, values in usable
    ]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            fits = list(pool.map(_fit_row, payloads))
    else:
        fits = [_fit_row(p) for p in payloads]
    ids = [sample_id for sample_id, _ in usable]
    fuzzy.write_stats_csv(args.out, ids, fits)
    n_degenerate = sum(1 for f in fits if f.degenerate)
    logger.info(
        "stage=fit in=%d fitted=%d dropped=%d degenerate=%d out=%s",
        len(raw), len(fits), dropped, n_degenerate, args.out,
    )
    return EXIT_OK


def _simulate_params(config: RunConfig) -> model.ModelParams:
    sim = config.simulate
    return model.ModelParams(
        coef=np.asarray(sim.coef, dtype=np.float64),
        dispersion=sim.dispersion,
        precision_shape=sim.precision_shape,
        precision_rate=sim.precision_rate,
        extra_dispersion=sim.extra_dispersion if config.model == "car2" else None,
    )


def cmd_simulate(args, config: RunConfig) -> int:
    sim = config.simulate
    if config.model == "scalar":
        raise ValidationError("simulate supports the cnar, car1, and car2 models")
    coef = np.asarray(sim.coef, dtype=np.float64)
    if coef.size < 1:
        raise ValidationError("simulate.coef must be non-empty")
    rng = np.random.default_rng(config.seed)
    n = sim.n_samples
    extra = rng.standard_normal((n, coef.size - 1)) if coef.size > 1 else np.empty((n, 0))
    matrix = np.column_stack([np.ones(n), extra])
    cov_names = ("intercept",) + tuple(f"x{j+1}" for j in range(coef.size - 1))
    spec = model.RegressionSpec(
        covariates=matrix,
        offsets=np.full(n, sim.offset),
        k_max=np.full(n, sim.k, dtype=np.int64),
        covariate_names=cov_names,
    )
    params = _simulate_params(config)
    data = model.simulate(spec, params, config.seed, config.model)
    ids = [f"s{i:05d}" for i in range(n)]

    with open(args.out_data, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["sample_id", "c", "h", "K"]
        if data.latent_counts is not None:
            header.append("y_latent")
        writer.writerow(header)
        for i, obs in enumerate(data.observations):
            row = [ids[i], repr(obs.location), repr(obs.precision), obs.k_max]
            if data.latent_counts is not None:
                row.append(int(data.latent_counts[i]))
            writer.writerow(row)

    with open(args.out_covariates, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", *cov_names[1:], "offset"])
        for i in range(n):
            writer.writerow(
                [ids[i], *[repr(v) for v in matrix[i, 1:]], repr(float(spec.offsets[i]))]
            )

    sidecar = {
        "model": config.model,
        "seed": config.seed,
        "params": {
            "coef": [float(v) for v in coef],
            "dispersion": sim.dispersion,
            "precision_shape": sim.precision_shape,
            "precision_rate": sim.precision_rate,
            "extra_dispersion": sim.extra_dispersion if config.model == "car2" else None,
        },
        "metadata": _metadata("simulate", config),
    }
    _write_json(args.out_params, sidecar)
    logger.info(
        "stage=simulate model=%s n=%d k=%d seed=%d out=%s",
        config.model, n, sim.k, config.seed, args.out_data,
    )
    return EXIT_OK


def _posterior_from_files(args, config: RunConfig):
    ids, spec, observations = _build_regression_spec(
        args.stats, args.covariates, config.add_intercept
    )
    if config.model == "scalar":
        counts = np.array(
            [
                round(fuzzy.beta_centroid(fuzzy.BetaFuzzy(o.location, o.precision, o.k_max)))
                for o in observations
            ],
            dtype=np.float64,
        )
        data = counts
    else:
        data = observations
    post = model.Posterior(
        spec,
        data,
        config.priors.to_spec(),
        config.model,
        exact_truncation=config.truncation.exact,
        tail_mass=config.truncation.tail_mass,
    )
    return ids, spec, observations, post


def cmd_infer(args, config: RunConfig) -> int:
    ids, spec, observations, post = _posterior_from_files(args, config)
    logger.info(
        "stage=infer model=%s n=%d p=%d chains=%d warmup=%d draws=%d",
        config.model, spec.n_samples, spec.n_covariates,
        config.hmc.n_chains, config.hmc.n_warmup, config.hmc.n_draws,
    )
    draws = inference.sample(
        post.logp_and_grad,
        config.hmc.to_config(),
        post.initial_point(),
        names=post.names,
        constrain=post.constrain,
    )
    inference.write_draws_csv(args.out_draws, draws)
    summary = {}
    for name in draws.names:
        col = draws.column(name)
        q5, q95 = np.quantile(col, [0.05, 0.95])
        summary[name] = {
            "mean": float(col.mean()),
            "sd": float(col.std(ddof=1)),
            "q5": float(q5),
            "q95": float(q95),
        }
    inference.write_diagnostics_json(
        args.out_diagnostics,
        draws,
        metadata={**_metadata("infer", config), "summary": summary},
    )
    table = draws.diagnostics
    print(f"{'parameter':<22}{'mean':>12}{'sd':>12}{'q5':>12}{'q95':>12}{'rhat':>10}{'ess':>10}")
    for j, name in enumerate(draws.names):
        s = summary[name]
        print(
            f"{name:<22}{s['mean']:>12.4f}{s['sd']:>12.4f}{s['q5']:>12.4f}"
            f"{s['q95']:>12.4f}{table.rhat[j]:>10.4f}{table.ess_bulk[j]:>10.0f}"
        )
    if draws.divergence_count:
        print(f"divergent transitions: {draws.divergence_count}")
    logger.info(
        "stage=infer out=%s divergences=%d max_rhat=%.4f",
        args.out_draws, draws.divergence_count, table.max_rhat(),
    )
    return EXIT_OK


def cmd_ppc(args, config: RunConfig) -> int:
    ids, spec, observations, _ = _posterior_from_files(args, config)
    if config.model == "scalar":
        raise ValidationError("ppc supports the cnar, car1, and car2 models")
    draws = inference.read_draws_csv(args.draws)
    expected = model.parameter_names(config.model, spec.covariate_names)
    if list(draws.names) != expected:
        raise ValidationError(
            f"draws columns {list(draws.names)} do not match model '{config.model}' "
            f"parameters {expected}"
        )
    summary = ppc.run_ppc(
        draws,
        spec,
        config.model,
        observations,
        n_reps=config.ppc.n_reps,
        seed=config.seed,
        grid=config.ppc.grid,
    )
    ppc.write_ppc_csv(args.out_csv, summary)
    ppc.write_ppc_json(args.out_json, summary, metadata=_metadata("ppc", config))
    logger.info(
        "stage=ppc model=%s reps=%d u_obs=%.5f tail_mean=%.3f tail_iqr=%.3f",
        config.model, config.ppc.n_reps, summary.u_obs,
        summary.tail_prob_mean, summary.tail_prob_iqr80,
    )
    return EXIT_OK


def cmd_kernel_audit(args, config: RunConfig) -> int:
    kern = kernel_mod.kernel_from_json(args.kernel)
    names = list(kern.names or [f"xi{j}" for j in range(kern.n_outcomes)])
    matrix = kernel_mod.phi_matrix(kern)
    print("phi(y, outcome):")
    print("  y  " + "".join(f"{n:>14}" for n in names))
    for y in range(kern.k_max + 1):
        print(f"{y:>4} " + "".join(f"{matrix[y, j]:>14.6f}" for j in range(kern.n_outcomes)))
    print()
    print(f"{'outcome':<14}{'CAR':>6}  witness (ratio_high vs ratio_low)")
    for j in range(kern.n_outcomes):
        res = kernel_mod.is_car(kern, j, tol=config.car_tol)
        if res.is_car:
            print(f"{names[j]:<14}{'yes':>6}")
        else:
            y_hi, y_lo = res.witness
            r = dict(zip(res.compatibility_set, res.ratios))
            print(
                f"{names[j]:<14}{'no':>6}  (y={y_hi}, y'={y_lo}): "
                f"{r[y_hi]:.6f} vs {r[y_lo]:.6f}"
            )
    return EXIT_OK


def cmd_show_config(args, config: RunConfig) -> int:
    print(config_to_json(config))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grancount",
        description="Granular counting and Bayesian inference for fuzzily reported counts.",
    )
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY.PATH=VALUE",
        dest="overrides",
        help="override a configuration value (repeatable)",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count", help="granular counts from a possibility matrix")
    p.add_argument("possibility", help="possibility matrix CSV")
    p.add_argument("--out", required=True, help="output granular-count CSV")

    p = sub.add_parser("fit", help="fit (c, h) statistics to granular counts")
    p.add_argument("counts", help="granular-count CSV")
    p.add_argument("--out", required=True, help="output statistics CSV")

    p = sub.add_parser("simulate", help="draw a synthetic dataset")
    p.add_argument("--out-data", required=True)
    p.add_argument("--out-covariates", required=True)
    p.add_argument("--out-params", required=True, help="JSON sidecar with ground truth")

    p = sub.add_parser("infer", help="posterior sampling for one model")
    p.add_argument("stats", help="statistics CSV (sample_id,c,h,K,...)")
    p.add_argument("covariates", help="covariates CSV (sample_id,...[,offset])")
    p.add_argument("--out-draws", required=True)
    p.add_argument("--out-diagnostics", required=True)

    p = sub.add_parser("ppc", help="posterior predictive checks")
    p.add_argument("draws", help="posterior draws CSV")
    p.add_argument("stats", help="observed statistics CSV")
    p.add_argument("covariates", help="covariates CSV")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-json", required=True)

    p = sub.add_parser("kernel-audit", help="print the reporting kernel and CAR verdicts")
    p.add_argument("kernel", help="kernel JSON file")

    sub.add_parser("show-config", help="print the effective configuration")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    try:
        config = load_config(args.config, args.overrides)
        if args.command == "count":
            return cmd_count(args)
        if args.command == "fit":
            return cmd_fit(args, config)
        if args.command == "simulate":
            return cmd_simulate(args, config)
        if args.command == "infer":
            return cmd_infer(args, config)
        if args.command == "ppc":
            return cmd_ppc(args, config)
        if args.command == "kernel-audit":
            return cmd_kernel_audit(args, config)
        if args.command == "show-config":
            return cmd_show_config(args, config)
        raise ValidationError(f"unknown command {args.command!r}")
    except ValidationError as exc:
        logger.error("validation error: %s", exc)
        return EXIT_VALIDATION
    except NumericalError as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
