"""Lattice Gaussian Markov random field models.

Builds the finite-element matrices of a regular rectangular lattice (lumped
mass C and 5-point stiffness G with natural Neumann boundary), assembles
the two-hop sparse precision

    Q = tau^2 (kappa^2 C + G) C^{-1} (kappa^2 C + G)

in its stationary form, or with diag(tau_i), tau_i = tau0 * sqrt(|s_i1|)
floored away from zero, in the non-stationary form. Simulates direct and
noisy (latent) observations with reproducible per-replicate streams and
injects outlier contamination.

Node k of an nx-by-ny lattice sits at column ix = k % nx, row iy = k // nx,
with coordinates (x0 + ix*hx, y0 + iy*hy); nodes include both boundary
lines, so hx = (x1-x0)/(nx-1).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import rng
from .linalg import SparseMatrix, cholesky

# tau(s) = tau0*sqrt(|s1|) vanishes on the s1 = 0 line, which would make Q
# singular there; the sqrt factor is floored at this value to keep Q SPD.
NONSTATIONARY_TAU_FLOOR = 1e-3


@dataclass(frozen=True)
class LatticeSpec:
    nx: int
    ny: int
    x_range: tuple[float, float] = (0.0, 10.0)
    y_range: tuple[float, float] = (0.0, 10.0)

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("lattice needs at least 2 nodes per axis")
        if self.x_range[1] <= self.x_range[0] or self.y_range[1] <= self.y_range[0]:
            raise ValueError("lattice ranges must be increasing intervals")

    @property
    def n(self) -> int:
        return self.nx * self.ny

    @property
    def hx(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / (self.nx - 1)

    @property
    def hy(self) -> float:
        return (self.y_range[1] - self.y_range[0]) / (self.ny - 1)

    def coords(self) -> np.ndarray:
        """(n, 2) node coordinates in index order k = iy*nx + ix."""
        xs = self.x_range[0] + self.hx * np.arange(self.nx)
        ys = self.y_range[0] + self.hy * np.arange(self.ny)
        gx, gy = np.meshgrid(xs, ys)  # row-major: iy varies slowest
        return np.column_stack([gx.ravel(), gy.ravel()])

    def interior_indices(self) -> np.ndarray:
        ix = np.arange(self.n) % self.nx
        iy = np.arange(self.n) // self.nx
        mask = (ix > 0) & (ix < self.nx - 1) & (iy > 0) & (iy < self.ny - 1)
        return np.flatnonzero(mask)


def default_lattice() -> LatticeSpec:
    # 440 nodes over [0,10]^2, the desk-scale stand-in for the 435-node mesh
    return LatticeSpec(20, 22)


@dataclass(frozen=True)
class Theta:
    """Model parameters in log scale (log keeps the optimiser unconstrained).

    For the non-stationary model `log_tau` is the log of the baseline tau0.
    `beta` are regression coefficients for the columns of the model's design
    matrix (include a ones column for an intercept).
    """

    log_tau: float
    log_kappa: float
    log_sigma_eps: float | None = None
    beta: tuple[float, ...] | None = None

    def __post_init__(self):
        vals = [self.log_tau, self.log_kappa]
        if self.log_sigma_eps is not None:
            vals.append(self.log_sigma_eps)
        if self.beta is not None:
            object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
            vals.extend(self.beta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("theta components must be finite")

    @classmethod
    def from_natural(cls, tau: float, kappa: float, sigma_eps: float | None = None,
                     beta=None) -> "Theta":
        if tau <= 0 or kappa <= 0 or (sigma_eps is not None and sigma_eps <= 0):
            raise ValueError("tau, kappa and sigma_eps must be positive")
        return cls(
            math.log(tau),
            math.log(kappa),
            None if sigma_eps is None else math.log(sigma_eps),
            None if beta is None else tuple(beta),
        )

    @property
    def tau(self) -> float:
        return math.exp(self.log_tau)

    @property
    def kappa(self) -> float:
        return math.exp(self.log_kappa)

    @property
    def sigma_eps(self) -> float | None:
        return None if self.log_sigma_eps is None else math.exp(self.log_sigma_eps)


class ModelKind(enum.Enum):
    DIRECT = "direct"
    LATENT = "latent"
    LATENT_NONSTATIONARY = "latent-nonstationary"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    lattice: LatticeSpec
    obs_indices: tuple[int, ...] | None = None
    test_indices: tuple[int, ...] | None = None
    covariates: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind is ModelKind.DIRECT:
            if self.obs_indices is not None:
                raise ValueError("direct models observe every node; no obs_indices")
        else:
            if not self.obs_indices:
                raise ValueError(f"{self.kind.value} model needs obs_indices")
            object.__setattr__(self, "obs_indices", tuple(int(i) for i in self.obs_indices))
            self._check_indices(self.obs_indices, "obs_indices")
        if self.test_indices is not None:
            object.__setattr__(self, "test_indices", tuple(int(i) for i in self.test_indices))
            self._check_indices(self.test_indices, "test_indices")
            if self.obs_indices and set(self.test_indices) & set(self.obs_indices):
                raise ValueError("test_indices overlap obs_indices")
        if self.covariates is not None:
            cov = np.asarray(self.covariates, dtype=float)
            if cov.ndim != 2 or cov.shape[0] != self.lattice.n:
                raise ValueError("covariates must be an (n, p) design matrix")
            object.__setattr__(self, "covariates", cov)

    def _check_indices(self, idx, name):
        if len(set(idx)) != len(idx):
            raise ValueError(f"{name} must be distinct")
        if idx and (min(idx) < 0 or max(idx) >= self.lattice.n):
            raise ValueError(f"{name} out of range")

    @property
    def m(self) -> int:
        """Number of observed components per replicate."""
        if self.kind is ModelKind.DIRECT:
            return self.lattice.n
        return len(self.obs_indices)

    @property
    def has_noise(self) -> bool:
        return self.kind is not ModelKind.DIRECT


@dataclass(frozen=True)
class OutlierRecord:
    replicate: int
    index: int
    original: float


@dataclass
class Dataset:
    model: ModelSpec
    replicates: np.ndarray  # (n_replicates, m)
    outlier_log: list[OutlierRecord] = field(default_factory=list)
    theta_true: Theta | None = None

    def __post_init__(self):
        self.replicates = np.atleast_2d(np.asarray(self.replicates, dtype=float))
        if self.replicates.shape[1] != self.model.m:
            raise ValueError(
                f"replicates have length {self.replicates.shape[1]}, model observes {self.model.m}"
            )
        for rec in self.outlier_log:
            if not (0 <= rec.replicate < self.replicates.shape[0]):
                raise ValueError("outlier record replicate out of range")
            if not (0 <= rec.index < self.model.m):
                raise ValueError("outlier record index out of range")

    @property
    def n_replicates(self) -> int:
        return self.replicates.shape[0]


# ---------------------------------------------------------------------------
# Finite-element matrices and the precision
# ---------------------------------------------------------------------------

def _mass_1d(n, h):
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return sp.diags(w)


def _stiffness_1d(n, h):
    main = np.full(n, 2.0 / h)
    main[0] = main[-1] = 1.0 / h
    off = np.full(n - 1, -1.0 / h)
    return sp.diags([off, main, off], [-1, 0, 1])


def build_fem_matrices(lattice: LatticeSpec) -> tuple[SparseMatrix, SparseMatrix]:
    """Lumped mass C (diagonal, cell areas) and stiffness G of the lattice.

    Tensor construction: C = My (x) Mx and G = Ky (x) Mx + My (x) Kx with
    1D lumped masses M and 1D stiffnesses K, which is the 5-point stencil of
    -Laplace with natural Neumann boundary. G is symmetric PSD with G*1 = 0;
    the diagonal of C partitions the domain area.
    """
    mx = _mass_1d(lattice.nx, lattice.hx)
    my = _mass_1d(lattice.ny, lattice.hy)
    kx = _stiffness_1d(lattice.nx, lattice.hx)
    ky = _stiffness_1d(lattice.ny, lattice.hy)
    c = sp.kron(my, mx, format="csr")
    g = sp.kron(ky, mx, format="csr") + sp.kron(my, kx, format="csr")
    return (
        SparseMatrix.from_scipy(c, symmetric=True),
        SparseMatrix.from_scipy(g, symmetric=True),
    )


def nonstationary_tau(theta: Theta, lattice: LatticeSpec) -> np.ndarray:
    s1 = lattice.coords()[:, 0]
    return theta.tau * np.maximum(np.sqrt(np.abs(s1)), NONSTATIONARY_TAU_FLOOR)


def build_precision_general(tau, kappa: float, c: SparseMatrix,
                            g: SparseMatrix) -> SparseMatrix:
    """Two-hop sparse precision for scalar or per-node tau.

    Assembled as W W^T with W = diag(tau) (kappa^2 C + G) diag(1/sqrt(c)),
    then symmetrised exactly; SPD for every finite positive tau and kappa
    because kappa^2 C + G is SPD and C is positive diagonal.
    """
    if not (math.isfinite(kappa) and np.all(np.isfinite(tau))):
        raise ValueError("non-finite parameters")
    k = kappa**2 * c.to_scipy() + g.to_scipy()
    c_diag = c.diagonal()
    w = k @ sp.diags(1.0 / np.sqrt(c_diag))
    if np.ndim(tau) == 0:
        w = float(tau) * w
    else:
        w = sp.diags(np.asarray(tau, dtype=float)) @ w
    q = (w @ w.T).tocsr()
    q = 0.5 * (q + q.T)
    return SparseMatrix.from_scipy(q, symmetric=True)


def build_precision(theta: Theta, model: ModelSpec, c: SparseMatrix,
                    g: SparseMatrix) -> SparseMatrix:
    """Precision of the model's field at theta (non-stationary kinds get
    the tau(s) diagonal, everything else the scalar tau)."""
    if model.kind is ModelKind.LATENT_NONSTATIONARY:
        return build_precision_general(nonstationary_tau(theta, model.lattice),
                                       theta.kappa, c, g)
    return build_precision_general(theta.tau, theta.kappa, c, g)


def interpret_params(theta: Theta) -> tuple[float, float]:
    """(marginal standard deviation, practical correlation range) of the field.

    Smoothness is fixed at alpha = 2 (nu = 1 in two dimensions), for which
    sigma^2 = 1/(4 pi kappa^2 tau^2) and the practical range is sqrt(8)/kappa.
    """
    sd = 1.0 / (math.sqrt(4.0 * math.pi) * theta.kappa * theta.tau)
    return sd, math.sqrt(8.0) / theta.kappa


def mean_vector(theta: Theta, model: ModelSpec) -> np.ndarray:
    """Field mean: design @ beta when covariates are attached, else zero."""
    n = model.lattice.n
    if model.covariates is None:
        return np.zeros(n)
    if theta.beta is None:
        raise ValueError("model has covariates but theta.beta is unset")
    beta = np.asarray(theta.beta, dtype=float)
    if beta.size != model.covariates.shape[1]:
        raise ValueError(
            f"beta has {beta.size} coefficients, design has {model.covariates.shape[1]} columns"
        )
    return model.covariates @ beta


def synthetic_covariates(lattice: LatticeSpec) -> np.ndarray:
    """Deterministic (n, 3) design [1, smooth wave, half-plane mask].

    Stand-ins for the elevation and land-sea style covariates of a
    regression mean mu = beta0 + beta1 x1 + beta2 x2.
    """
    s = lattice.coords()
    lx = lattice.x_range[1] - lattice.x_range[0]
    ly = lattice.y_range[1] - lattice.y_range[0]
    x1 = np.sin(2.0 * np.pi * (s[:, 0] - lattice.x_range[0]) / lx) * np.cos(
        np.pi * (s[:, 1] - lattice.y_range[0]) / ly
    )
    x2 = (s[:, 0] > 0.5 * (lattice.x_range[0] + lattice.x_range[1])).astype(float)
    return np.column_stack([np.ones(lattice.n), x1, x2])


def latent_design(lattice: LatticeSpec, n_obs: int = 300, n_test: int = 60,
                  design_seed: int = 20240901) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Disjoint training/test node sets drawn uniformly from interior nodes."""
    interior = lattice.interior_indices()
    if n_obs + n_test > interior.size:
        raise ValueError(
            f"lattice interior has {interior.size} nodes, need {n_obs + n_test}"
        )
    perm = rng.stream(design_seed, rng.DESIGN).permutation(interior)
    return tuple(int(i) for i in perm[:n_obs]), tuple(int(i) for i in perm[n_obs:n_obs + n_test])


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def sample_fields(q: SparseMatrix, mu: np.ndarray, n_reps: int, seed) -> np.ndarray:
    """(n_reps, n) field draws x = mu + L^{-T} z with L L^T = Q (dense factor).

    Replicate r consumes stream (seed, FIELD, r) only, so replicates are
    identical no matter how the loop is scheduled.
    """
    factor = cholesky(q.toarray(), overwrite=True)
    n = q.n_rows
    out = np.empty((n_reps, n))
    for r in range(n_reps):
        z = rng.stream(seed, rng.FIELD, r).standard_normal(n)
        out[r] = mu + factor.solve_lower_t(z)
    return out


def sample_direct(q: SparseMatrix, mu: np.ndarray, n_reps: int, seed) -> np.ndarray:
    """Direct observations y = x; returns the (n_reps, n) replicate matrix."""
    return sample_fields(q, mu, n_reps, seed)


def sample_latent(q: SparseMatrix, mu: np.ndarray, obs_indices, sigma_eps: float,
                  n_reps: int, seed) -> np.ndarray:
    """Noisy observations y = x[obs] + sigma_eps * eps, eps ~ N(0, I).

    Noise for replicate r comes from stream (seed, NOISE, r), drawn in
    observation order.
    """
    if sigma_eps <= 0:
        raise ValueError("sigma_eps must be positive")
    obs = np.asarray(obs_indices, dtype=int)
    fields = sample_fields(q, mu, n_reps, seed)
    out = np.empty((n_reps, obs.size))
    for r in range(n_reps):
        eps = rng.stream(seed, rng.NOISE, r).standard_normal(obs.size)
        out[r] = fields[r, obs] + sigma_eps * eps
    return out


def simulate_dataset(model: ModelSpec, theta: Theta, n_replicates: int, seed,
                     matrices=None) -> Dataset:
    """Simulate a full dataset for the model at theta; deterministic in seed."""
    c, g = matrices if matrices is not None else build_fem_matrices(model.lattice)
    q = build_precision(theta, model, c, g)
    mu = mean_vector(theta, model)
    if model.kind is ModelKind.DIRECT:
        reps = sample_direct(q, mu, n_replicates, seed)
    else:
        if theta.sigma_eps is None:
            raise ValueError("latent models need theta.log_sigma_eps")
        reps = sample_latent(q, mu, model.obs_indices, theta.sigma_eps, n_replicates, seed)
    return Dataset(model=model, replicates=reps, theta_true=theta)


def inject_outliers(data: Dataset, n_contaminated_reps: int, magnitude: float,
                    seed) -> Dataset:
    """Replace one value by |y| + magnitude in each of n_contaminated_reps replicates.

    Contaminated replicates are drawn uniformly without replacement, the
    position uniformly per replicate; every change lands in the outlier log.
    """
    if n_contaminated_reps > data.n_replicates:
        raise ValueError("cannot contaminate more replicates than exist")
    if magnitude <= 0:
        raise ValueError("outlier magnitude must be positive")
    reps = data.replicates.copy()
    log = list(data.outlier_log)
    if n_contaminated_reps > 0:
        g = rng.stream(seed, rng.OUTLIER)
        chosen = np.sort(g.choice(data.n_replicates, size=n_contaminated_reps, replace=False))
        for r in chosen:
            i = int(g.integers(data.model.m))
            original = float(reps[r, i])
            reps[r, i] = abs(original) + magnitude
            log.append(OutlierRecord(replicate=int(r), index=i, original=original))
    return Dataset(model=data.model, replicates=reps, outlier_log=log,
                   theta_true=data.theta_true)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def theta_to_dict(theta: Theta | None):
    if theta is None:
        return None
    return {
        "log_tau": theta.log_tau,
        "log_kappa": theta.log_kappa,
        "log_sigma_eps": theta.log_sigma_eps,
        "beta": None if theta.beta is None else list(theta.beta),
    }


def theta_from_dict(d) -> Theta | None:
    if d is None:
        return None
    return Theta(
        log_tau=d["log_tau"],
        log_kappa=d["log_kappa"],
        log_sigma_eps=d.get("log_sigma_eps"),
        beta=None if d.get("beta") is None else tuple(d["beta"]),
    )


def model_to_dict(model: ModelSpec):
    return {
        "kind": model.kind.value,
        "lattice": {
            "nx": model.lattice.nx,
            "ny": model.lattice.ny,
            "x_range": list(model.lattice.x_range),
            "y_range": list(model.lattice.y_range),
        },
        "obs_indices": None if model.obs_indices is None else list(model.obs_indices),
        "test_indices": None if model.test_indices is None else list(model.test_indices),
        "covariates": None if model.covariates is None else model.covariates.tolist(),
    }


def model_from_dict(d) -> ModelSpec:
    lat = d["lattice"]
    return ModelSpec(
        kind=ModelKind(d["kind"]),
        lattice=LatticeSpec(
            nx=lat["nx"],
            ny=lat["ny"],
            x_range=tuple(lat.get("x_range", (0.0, 10.0))),
            y_range=tuple(lat.get("y_range", (0.0, 10.0))),
        ),
        obs_indices=None if d.get("obs_indices") is None else tuple(d["obs_indices"]),
        test_indices=None if d.get("test_indices") is None else tuple(d["test_indices"]),
        covariates=d.get("covariates"),
    )


def dataset_to_dict(ds: Dataset) -> dict:
    return {
        "format": "loofit-dataset",
        "version": 1,
        "model": model_to_dict(ds.model),
        "theta_true": theta_to_dict(ds.theta_true),
        "replicates": ds.replicates.tolist(),
        "outlier_log": [
            {"replicate": r.replicate, "index": r.index, "original": r.original}
            for r in ds.outlier_log
        ],
    }


def dataset_from_dict(d) -> Dataset:
    if d.get("format") != "loofit-dataset":
        raise ValueError("not a loofit dataset payload")
    return Dataset(
        model=model_from_dict(d["model"]),
        replicates=np.asarray(d["replicates"], dtype=float),
        outlier_log=[
            OutlierRecord(int(r["replicate"]), int(r["index"]), float(r["original"]))
            for r in d.get("outlier_log", [])
        ],
        theta_true=theta_from_dict(d.get("theta_true")),
    )


def save_dataset(path, ds: Dataset) -> None:
    with open(path, "w") as fh:
        json.dump(dataset_to_dict(ds), fh, indent=1)
        fh.write("\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        return dataset_from_dict(json.load(fh))


def dataset_csv_rows(ds: Dataset):
    """Rows (replicate, node_index, s1, s2, value, is_outlier) for CSV export."""
    coords = ds.model.lattice.coords()
    if ds.model.kind is ModelKind.DIRECT:
        nodes = np.arange(ds.model.lattice.n)
    else:
        nodes = np.asarray(ds.model.obs_indices, dtype=int)
    flagged = {(r.replicate, r.index) for r in ds.outlier_log}
    for r in range(ds.n_replicates):
        for j, node in enumerate(nodes):
            yield (
                r,
                int(node),
                coords[node, 0],
                coords[node, 1],
                ds.replicates[r, j],
                int((r, j) in flagged),
            )


def write_dataset_csv(path, ds: Dataset) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replicate", "node_index", "s1", "s2", "value", "is_outlier"])
        for row in dataset_csv_rows(ds):
            writer.writerow(row)
