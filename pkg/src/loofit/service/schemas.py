"""Pydantic request/response models for the loofit service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field

from ..gmrf import LatticeSpec, Theta


class RuleModel(BaseModel):
    kind: str = Field(description="log | crps | scrps | root | rcrps")
    cutoff: Optional[float] = None

    def text(self) -> str:
        if self.cutoff is not None:
            return f"{self.kind}:{self.cutoff:g}"
        return self.kind


class ScoreItem(BaseModel):
    mu: float
    sigma: float
    y: float


class ScoreRequest(BaseModel):
    rule: RuleModel
    items: list[ScoreItem]
    negate: bool = False


class ScoreResponse(BaseModel):
    values: list[float]
    rule: str
    negated: bool


class RuleInfoResponse(BaseModel):
    rule: str
    sensitivity_index: float
    scale_exponent: float
    robust: bool
    scale_invariant: bool


class ScaleExponentRequest(BaseModel):
    rule: RuleModel
    sigmas: list[float] = Field(default=[0.5, 1.0, 2.0, 4.0])
    d_theta: float = 0.01


class ScaleExponentResponse(BaseModel):
    exponent: float


class LatticeModel(BaseModel):
    nx: int = 20
    ny: int = 22
    x_range: tuple[float, float] = (0.0, 10.0)
    y_range: tuple[float, float] = (0.0, 10.0)

    def to_core(self) -> LatticeSpec:
        return LatticeSpec(self.nx, self.ny, tuple(self.x_range), tuple(self.y_range))


class ThetaModel(BaseModel):
    """Natural-scale parameters; converted to log scale internally."""

    tau: float
    kappa: float
    sigma_eps: Optional[float] = None
    beta: Optional[list[float]] = None

    def to_core(self) -> Theta:
        return Theta.from_natural(self.tau, self.kappa, self.sigma_eps, self.beta)


class ModelRequest(BaseModel):
    kind: Literal["direct", "latent", "latent-nonstationary"] = "direct"
    lattice: LatticeModel = Field(default_factory=LatticeModel)
    obs_count: int = 300
    test_count: int = 60
    with_covariates: bool = False


class OutlierPlan(BaseModel):
    count: int = Field(ge=0)
    magnitude: float = Field(gt=0)


class DatasetPayload(BaseModel):
    format: Literal["loofit-dataset"]
    version: int
    model: dict
    theta_true: Optional[dict] = None
    replicates: list[list[float]]
    outlier_log: list[dict] = Field(default_factory=list)


class SimulateRequest(BaseModel):
    model: ModelRequest = Field(default_factory=ModelRequest)
    theta: ThetaModel
    n_replicates: int = 10
    seed: int
    outliers: Optional[OutlierPlan] = None


class SimulateResponse(BaseModel):
    dataset: DatasetPayload
    marginal_sd: float
    practical_range: float


class FitOptionsModel(BaseModel):
    xtol: float = 1e-6
    ftol: float = 1e-6
    step: float = 0.1
    max_evals: Optional[int] = None


class FitRequest(BaseModel):
    dataset: DatasetPayload
    method: str
    init: Optional[ThetaModel] = None
    options: Optional[FitOptionsModel] = None


class FitResponse(BaseModel):
    method: str
    estimates: dict[str, float]
    natural: dict[str, float]
    objective_value: float
    n_evaluations: int
    converged: bool
    wall_time_s: float


class StudyRequest(BaseModel):
    model_kind: Literal["direct", "latent", "latent-nonstationary"] = "direct"
    theta: ThetaModel
    lattice: LatticeModel = Field(default_factory=LatticeModel)
    n_replicates: int = 10
    n_repetitions: int = 100
    outlier_count: int = 0
    outlier_magnitude: float = 5.0
    methods: Optional[list[str]] = None
    seed: int
    threads: int = 1
    obs_count: int = 300
    test_count: int = 60
    with_covariates: bool = False


class StudyResponse(BaseModel):
    estimates_header: list[str]
    estimates: list[list]
    timings_header: list[str]
    timings: list[list]
    summary_header: list[str]
    summary: list[list]
    manifest: str


class GodambeRequest(BaseModel):
    theta_list: list[ThetaModel]
    methods: Optional[list[str]] = None
    lattice: LatticeModel = Field(default_factory=LatticeModel)
    n_sims: int = 1000
    n_replicates: int = 10
    seed: int
    fd_step: float = 1e-4


class GodambeResponse(BaseModel):
    header: list[str]
    rows: list[list]
    manifest: str


class BenchmarkRequest(BaseModel):
    sizes: list[int]
    theta: ThetaModel
    methods: Optional[list[str]] = None
    mode: Literal["eval", "fit"] = "eval"
    n_timing_reps: int = 5
    n_replicates: int = 10
    seed: int


class BenchmarkResponse(BaseModel):
    header: list[str]
    rows: list[list]
    slopes: dict[str, float]
    manifest: str


class PredictiveRequest(BaseModel):
    theta: ThetaModel
    lattice: LatticeModel = Field(default_factory=LatticeModel)
    model_kind: Literal["latent", "latent-nonstationary"] = "latent"
    n_replicates: int = 10
    n_repetitions: int = 100
    outlier_count: int = 0
    outlier_magnitude: float = 5.0
    obs_count: int = 300
    test_count: int = 60
    seed: int
    threads: int = 1


class PredictiveResponse(BaseModel):
    header: list[str]
    rows: list[list]
    manifest: str


class VersionResponse(BaseModel):
    name: str
    version: str
