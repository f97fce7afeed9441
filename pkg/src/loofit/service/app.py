"""FastAPI service wrapping the estimation package.

Stateless compute endpoints: every request carries its own data and seed,
every response is deterministic given the request body. The CLI is a thin
client of this app (in process by default, over HTTP against `loofit serve`
otherwise).

Error contract: semantic configuration problems map to 400 with
detail.kind = "config" (pydantic shape errors are 422 as usual), numerical
failures such as a factorization breakdown map to 500 with
detail.kind = "numerical".
"""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..estimators import (
    FitOptions,
    Objective,
    default_methods,
    fit,
    parse_method,
)
from ..experiments import (
    ESTIMATES_HEADER,
    PREDICTIVE_HEADER,
    RUNTIME_HEADER,
    SUMMARY_HEADER,
    TIMINGS_HEADER,
    StudyConfig,
    godambe_table,
    manifest_text,
    predictive_study,
    run_estimation_study,
    runtime_scaling,
)
from ..gmrf import (
    ModelKind,
    ModelSpec,
    dataset_from_dict,
    dataset_to_dict,
    inject_outliers,
    interpret_params,
    latent_design,
    simulate_dataset,
    synthetic_covariates,
)
from ..linalg import NotPositiveDefiniteError
from ..scoring import ScoringRule, divergence_scale_exponent, score_values
from . import schemas


class NumericalFailure(RuntimeError):
    pass


def _rule(model: schemas.RuleModel) -> ScoringRule:
    return ScoringRule.parse(model.text())


def _build_model(req: schemas.ModelRequest) -> ModelSpec:
    lattice = req.lattice.to_core()
    cov = synthetic_covariates(lattice) if req.with_covariates else None
    kind = ModelKind(req.kind)
    if kind is ModelKind.DIRECT:
        return ModelSpec(kind, lattice, covariates=cov)
    obs, test = latent_design(lattice, req.obs_count, req.test_count)
    return ModelSpec(kind, lattice, obs_indices=obs, test_indices=test, covariates=cov)


def create_app() -> FastAPI:
    app = FastAPI(title="loofit", version=__version__)

    @app.exception_handler(NotPositiveDefiniteError)
    async def _npd_handler(request: Request, exc: NotPositiveDefiniteError):
        return JSONResponse(
            status_code=500,
            content={"detail": {"kind": "numerical", "message": str(exc)}},
        )

    @app.exception_handler(np.linalg.LinAlgError)
    async def _linalg_handler(request: Request, exc: np.linalg.LinAlgError):
        return JSONResponse(
            status_code=500,
            content={"detail": {"kind": "numerical", "message": str(exc)}},
        )

    @app.exception_handler(ValueError)
    async def _value_handler(request: Request, exc: ValueError):
        return JSONResponse(
            status_code=400,
            content={"detail": {"kind": "config", "message": str(exc)}},
        )

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.get("/version", response_model=schemas.VersionResponse)
    def version():
        return schemas.VersionResponse(name="loofit", version=__version__)

    @app.post("/scores/evaluate", response_model=schemas.ScoreResponse)
    def scores_evaluate(req: schemas.ScoreRequest):
        rule = _rule(req.rule)
        mu = np.array([i.mu for i in req.items])
        sigma = np.array([i.sigma for i in req.items])
        y = np.array([i.y for i in req.items])
        values = score_values(rule, mu, sigma, y)
        if req.negate:
            values = -values
        return schemas.ScoreResponse(
            values=[float(v) for v in values], rule=rule.name, negated=req.negate
        )

    @app.get("/scores/rules/{rule_text}", response_model=schemas.RuleInfoResponse)
    def rule_info(rule_text: str):
        rule = ScoringRule.parse(rule_text)
        return schemas.RuleInfoResponse(
            rule=rule.name,
            sensitivity_index=rule.sensitivity_index,
            scale_exponent=rule.scale_exponent,
            robust=rule.robust,
            scale_invariant=rule.scale_invariant,
        )

    @app.post("/scores/scale-exponent", response_model=schemas.ScaleExponentResponse)
    def scale_exponent(req: schemas.ScaleExponentRequest):
        exponent = divergence_scale_exponent(_rule(req.rule), req.sigmas, req.d_theta)
        return schemas.ScaleExponentResponse(exponent=exponent)

    @app.post("/datasets/simulate", response_model=schemas.SimulateResponse)
    def simulate(req: schemas.SimulateRequest):
        model = _build_model(req.model)
        theta = req.theta.to_core()
        ds = simulate_dataset(model, theta, req.n_replicates, req.seed)
        if req.outliers is not None and req.outliers.count > 0:
            ds = inject_outliers(ds, req.outliers.count, req.outliers.magnitude, req.seed)
        sd, rng_ = interpret_params(theta)
        return schemas.SimulateResponse(
            dataset=schemas.DatasetPayload(**dataset_to_dict(ds)),
            marginal_sd=sd,
            practical_range=rng_,
        )

    @app.post("/fits", response_model=schemas.FitResponse)
    def fit_endpoint(req: schemas.FitRequest):
        method = parse_method(req.method)
        ds = dataset_from_dict(req.dataset.model_dump())
        if req.init is not None:
            init = req.init.to_core()
        elif ds.theta_true is not None:
            init = ds.theta_true
        else:
            raise ValueError("no initialization: provide init or a dataset with theta_true")
        opts = FitOptions() if req.options is None else FitOptions(
            xtol=req.options.xtol,
            ftol=req.options.ftol,
            step=req.options.step,
            max_evals=req.options.max_evals,
        )
        result = fit(Objective(method, ds.model, ds), init, opts)
        theta = result.theta_hat
        natural = {"tau": theta.tau, "kappa": theta.kappa}
        if theta.sigma_eps is not None:
            natural["sigma_eps"] = theta.sigma_eps
        if theta.beta is not None:
            natural.update({f"beta{j}": b for j, b in enumerate(theta.beta)})
        return schemas.FitResponse(
            method=method.label,
            estimates=result.estimates,
            natural=natural,
            objective_value=result.objective_value,
            n_evaluations=result.n_evaluations,
            converged=result.converged,
            wall_time_s=result.wall_time,
        )

    @app.post("/studies/estimation", response_model=schemas.StudyResponse)
    def estimation_study(req: schemas.StudyRequest):
        config = StudyConfig(
            model_kind=ModelKind(req.model_kind),
            theta_true=req.theta.to_core(),
            lattice=req.lattice.to_core(),
            n_replicates=req.n_replicates,
            n_repetitions=req.n_repetitions,
            outlier_count=req.outlier_count,
            outlier_magnitude=req.outlier_magnitude,
            methods=tuple(req.methods) if req.methods else default_methods(),
            seed=req.seed,
            threads=req.threads,
            obs_count=req.obs_count,
            test_count=req.test_count,
            with_covariates=req.with_covariates,
        )
        result = run_estimation_study(config)
        return schemas.StudyResponse(
            estimates_header=list(ESTIMATES_HEADER),
            estimates=[list(r) for r in result.estimates],
            timings_header=list(TIMINGS_HEADER),
            timings=[list(r) for r in result.timings],
            summary_header=list(SUMMARY_HEADER),
            summary=[list(r) for r in result.summary],
            manifest=manifest_text(result.config),
        )

    @app.post("/studies/predictive", response_model=schemas.PredictiveResponse)
    def predictive(req: schemas.PredictiveRequest):
        config = StudyConfig(
            model_kind=ModelKind(req.model_kind),
            theta_true=req.theta.to_core(),
            lattice=req.lattice.to_core(),
            n_replicates=req.n_replicates,
            n_repetitions=req.n_repetitions,
            outlier_count=req.outlier_count,
            outlier_magnitude=req.outlier_magnitude,
            seed=req.seed,
            threads=req.threads,
            obs_count=req.obs_count,
            test_count=req.test_count,
        )
        result = predictive_study(config)
        return schemas.PredictiveResponse(
            header=list(PREDICTIVE_HEADER),
            rows=[list(r) for r in result["rows"]],
            manifest=manifest_text(result["config"]),
        )

    @app.post("/studies/godambe", response_model=schemas.GodambeResponse)
    def godambe_endpoint(req: schemas.GodambeRequest):
        methods = req.methods or list(default_methods())
        result = godambe_table(
            [t.to_core() for t in req.theta_list],
            methods,
            lattice=req.lattice.to_core(),
            n_sims=req.n_sims,
            n_replicates=req.n_replicates,
            seed=req.seed,
            fd_step=req.fd_step,
        )
        config = {
            "theta_list": [t.model_dump() for t in req.theta_list],
            "methods": methods,
            "n_sims": req.n_sims,
            "n_replicates": req.n_replicates,
            "seed": req.seed,
            "fd_step": req.fd_step,
        }
        return schemas.GodambeResponse(
            header=list(result["header"]),
            rows=[list(r) for r in result["rows"]],
            manifest=manifest_text(config),
        )

    @app.post("/studies/benchmark", response_model=schemas.BenchmarkResponse)
    def benchmark(req: schemas.BenchmarkRequest):
        methods = req.methods or ["loos:root", "ml"]
        result = runtime_scaling(
            req.sizes,
            req.theta.to_core(),
            n_timing_reps=req.n_timing_reps,
            methods=methods,
            mode=req.mode,
            seed=req.seed,
            n_replicates=req.n_replicates,
        )
        config = {
            "sizes": [int(s) for s in req.sizes],
            "theta": req.theta.model_dump(),
            "methods": methods,
            "mode": req.mode,
            "seed": req.seed,
        }
        slopes = {k: float(v) for k, v in result["slopes"].items()}
        extra = {f"slope[{k}]": f"{v:.4f}" for k, v in slopes.items()}
        return schemas.BenchmarkResponse(
            header=list(RUNTIME_HEADER),
            rows=[list(r) for r in result["rows"]],
            slopes=slopes,
            manifest=manifest_text(config, extra),
        )

    return app


app = create_app()
