"""
Learnable Gaussian feature embedding.

Feature ``j`` of an input ``x`` is ``sum_i f_ij * G_ij(x)`` with
``G_ij(x) = exp(-1/2 (x - mu_ij)^T Sigma_ij^-1 (x - mu_ij))``. In the
default shared mode every Gaussian carries one position/covariance and a
k-vector of weights; in per-feature mode each (i, j) pair has its own.

Covariances are stored unconstrained: log-scales per axis (diagonal mode)
or a lower-triangular factor with log-parameterized diagonal (dense mode),
so every reachable parameter value gives an SPD matrix.
"""
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from pigs.autodiff import Jet2, Var
from pigs.errors import ConfigurationError, ContractViolationError, InvariantViolationError

logger = logging.getLogger(__name__)

COVARIANCE_MODES = ("diagonal", "dense")
FEATURE_INITS = ("uniform", "normal")

# Mahalanobis^2 beyond which exp(-q/2) < 1e-12
LOCALITY_CUTOFF = 56.0


@dataclass
class GaussianCloud:
    """All Gaussian parameters: positions, covariance factors and feature weights."""
    n: int
    d: int
    k: int
    mu: np.ndarray                       # (n, m, d), m = k in per-feature mode else 1
    feat: np.ndarray                     # (n, k)
    log_sigma: Optional[np.ndarray] = None   # (n, m, d), diagonal mode
    tril: Optional[np.ndarray] = None        # (n, m, d(d+1)/2), dense mode
    covariance: str = "diagonal"
    per_feature: bool = False
    learn_mu: bool = True
    cutoff: Optional[float] = None

    def __post_init__(self):
        if self.covariance not in COVARIANCE_MODES:
            raise ConfigurationError(f"covariance must be one of {COVARIANCE_MODES}, got '{self.covariance}'")
        if self.covariance == "diagonal" and self.log_sigma is None:
            raise ConfigurationError("diagonal cloud needs log_sigma")
        if self.covariance == "dense" and self.tril is None:
            raise ConfigurationError("dense cloud needs a triangular factor")

    @property
    def m(self) -> int:
        return self.k if self.per_feature else 1

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.blocks().values())

    def blocks(self) -> Dict[str, np.ndarray]:
        cov_name = "log_sigma" if self.covariance == "diagonal" else "tril"
        return {"mu": self.mu, cov_name: getattr(self, cov_name), "feat": self.feat}

    def attach(self, views: Mapping[str, np.ndarray]) -> None:
        """Point the parameter arrays at (views of) externally owned storage."""
        for name, view in views.items():
            setattr(self, name, view)

    def bind(self) -> Dict[str, Var]:
        return {name: Var(array) for name, array in self.blocks().items()}

    def factors(self) -> np.ndarray:
        """Lower-triangular covariance factors L with Sigma = L L^T, shape (n, m, d, d)."""
        L = np.zeros((self.n, self.m, self.d, self.d))
        if self.covariance == "diagonal":
            idx = np.arange(self.d)
            L[..., idx, idx] = np.exp(self.log_sigma)
            return L
        rows, cols = np.tril_indices(self.d)
        L[..., rows, cols] = self.tril
        diag = np.arange(self.d)
        L[..., diag, diag] = np.exp(L[..., diag, diag])
        return L

    def covariances(self) -> np.ndarray:
        L = self.factors()
        return L @ np.swapaxes(L, -1, -2)

    def variances(self) -> np.ndarray:
        """Per-axis variances diag(Sigma), shape (n, m, d)."""
        if self.covariance == "diagonal":
            return np.exp(2.0 * self.log_sigma)
        return np.einsum("...ii->...i", self.covariances())

    def centers(self) -> np.ndarray:
        return self.mu.reshape(-1, self.d)


def _tril_index(d: int) -> Dict[Tuple[int, int], int]:
    rows, cols = np.tril_indices(d)
    return {(int(r), int(c)): i for i, (r, c) in enumerate(zip(rows, cols))}


def _check_spd(cloud: GaussianCloud, p: Mapping[str, Var]) -> None:
    if cloud.covariance == "diagonal":
        diag = p["log_sigma"].value
    else:
        diag = p["tril"].value[..., [i for (r, c), i in _tril_index(cloud.d).items() if r == c]]
    with np.errstate(over="ignore", under="ignore"):
        scales = np.exp(diag)
    if not np.all(np.isfinite(scales)) or np.any(scales <= 0.0):
        raise InvariantViolationError("covariance reconstruction is not symmetric positive definite")


def _select(p: Mapping[str, Var], index: Optional[slice]) -> Dict[str, Var]:
    if index is None:
        return dict(p)
    return {name: var[index] for name, var in p.items()}


def _gaussians(cloud: GaussianCloud, xs: Sequence[Jet2], p: Mapping[str, Var]) -> Jet2:
    """G_ij at every input point, shape (B, n, m)."""
    if len(xs) != cloud.d:
        raise ContractViolationError(f"expected {cloud.d} input coordinates, got {len(xs)}")
    _check_spd(cloud, p)
    diffs = [x.reshape(-1, 1, 1) - p["mu"][:, :, j] for j, x in enumerate(xs)]
    if cloud.covariance == "diagonal":
        inv_sigma = (-p["log_sigma"]).exp()
        whitened = [diff * inv_sigma[:, :, j] for j, diff in enumerate(diffs)]
    else:
        # forward substitution against L
        index = _tril_index(cloud.d)
        tril = p["tril"]
        whitened = []
        for j in range(cloud.d):
            acc = diffs[j]
            for l in range(j):
                acc = acc - tril[:, :, index[(j, l)]] * whitened[l]
            whitened.append(acc / tril[:, :, index[(j, j)]].exp())
    q = whitened[0] * whitened[0]
    for w in whitened[1:]:
        q = q + w * w
    g = (q * -0.5).exp()
    if cloud.cutoff is not None:
        g = g * Var((q.value.value <= cloud.cutoff).astype(np.float64))
    return g


def gaussian_eval(cloud: GaussianCloud, i: int, xs: Sequence[Jet2],
                  params: Optional[Mapping[str, Var]] = None) -> Jet2:
    """G_i at the inputs; shape (B,) in shared mode, (B, k) per feature."""
    if not 0 <= i < cloud.n:
        raise ContractViolationError(f"Gaussian index {i} out of range for N={cloud.n}")
    p = _select(params if params is not None else cloud.bind(), slice(i, i + 1))
    p.pop("feat", None)
    g = _gaussians(cloud, xs, p)
    batch = g.shape[0]
    g = g.reshape(batch, cloud.m)
    return g[:, 0] if cloud.m == 1 else g


def fe_forward(cloud: GaussianCloud, xs: Sequence[Jet2],
               params: Optional[Mapping[str, Var]] = None) -> Jet2:
    """Feature vectors for a batch of inputs, shape (B, k)."""
    p = params if params is not None else cloud.bind()
    g = _gaussians(cloud, xs, p)
    batch = g.shape[0]
    if cloud.per_feature:
        return (g * p["feat"]).sum(axis=1)
    return g.reshape(batch, cloud.n) @ p["feat"]


# ---------------------------------------------------------------------------
# Initialization recipes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InitSpec:
    """How to populate a cloud: counts, rescaled domain and initial scales."""
    n: int
    d: int
    k: int
    scale: float
    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    feat_init: str = "normal"
    feat_scale: float = 0.01
    covariance: str = "diagonal"
    per_feature: bool = False
    learn_mu: bool = True
    cutoff: Optional[float] = None
    recipe: str = "custom"

    def with_overrides(self, **overrides) -> "InitSpec":
        clean = {key: value for key, value in overrides.items() if value is not None}
        return replace(self, **clean)


RECIPES: Dict[str, InitSpec] = {
    "allen_cahn": InitSpec(n=4000, d=2, k=1, scale=float(np.sqrt(0.025)), lo=(0.0, 0.0), hi=(2.0, 2.0),
                           feat_init="normal", feat_scale=0.01, recipe="allen_cahn"),
    "helmholtz": InitSpec(n=3000, d=2, k=4, scale=0.1, lo=(0.0, 0.0), hi=(1.0, 1.0),
                          feat_init="uniform", feat_scale=1.0, recipe="helmholtz"),
    "klein_gordon": InitSpec(n=100, d=3, k=4, scale=0.5, lo=(0.0,) * 3, hi=(2.0,) * 3,
                             feat_init="normal", feat_scale=0.01, recipe="klein_gordon"),
    "flow_mixing": InitSpec(n=4000, d=3, k=4, scale=0.1, lo=(0.0,) * 3, hi=(2.0,) * 3,
                            feat_init="normal", feat_scale=0.01, recipe="flow_mixing"),
    "nl_diffusion": InitSpec(n=4000, d=3, k=4, scale=0.1, lo=(0.0,) * 3, hi=(1.0,) * 3,
                             feat_init="normal", feat_scale=0.01, recipe="nl_diffusion"),
    "ode_eq15": InitSpec(n=64, d=1, k=4, scale=0.05, lo=(0.0,), hi=(1.0,),
                         feat_init="uniform", feat_scale=1.0, recipe="ode_eq15"),
    "ode_eq30": InitSpec(n=200, d=1, k=4, scale=0.02, lo=(0.0,), hi=(1.0,),
                         feat_init="uniform", feat_scale=1.0, recipe="ode_eq30"),
}
RECIPES["allen_cahn_inverse"] = replace(RECIPES["allen_cahn"], recipe="allen_cahn_inverse")


def recipe(name: str) -> InitSpec:
    try:
        return RECIPES[name]
    except KeyError:
        raise ConfigurationError(f"unknown initialization recipe '{name}'; known: {sorted(RECIPES)}") from None


def init_cloud(spec: InitSpec, rng: np.random.Generator) -> GaussianCloud:
    """Uniform positions over the rescaled box, constant scales, random weights."""
    if spec.recipe != "custom" and spec.recipe not in RECIPES:
        raise ConfigurationError(f"unknown initialization recipe '{spec.recipe}'")
    if spec.feat_init not in FEATURE_INITS:
        raise ConfigurationError(f"feature init must be one of {FEATURE_INITS}, got '{spec.feat_init}'")
    if len(spec.lo) != spec.d or len(spec.hi) != spec.d:
        raise ConfigurationError("rescaled domain bounds must have one entry per input dimension")
    m = spec.k if spec.per_feature else 1
    mu = rng.uniform(np.asarray(spec.lo), np.asarray(spec.hi), size=(spec.n, m, spec.d))
    if spec.feat_init == "uniform":
        feat = rng.uniform(-spec.feat_scale, spec.feat_scale, size=(spec.n, spec.k))
    else:
        feat = rng.normal(0.0, spec.feat_scale, size=(spec.n, spec.k))
    log_sigma = np.full((spec.n, m, spec.d), np.log(spec.scale))
    cloud = GaussianCloud(n=spec.n, d=spec.d, k=spec.k, mu=mu, feat=feat, log_sigma=log_sigma,
                          per_feature=spec.per_feature, learn_mu=spec.learn_mu, cutoff=spec.cutoff)
    if spec.covariance == "dense":
        cloud = densify(cloud)
    logger.debug("initialized %d Gaussians (d=%d, k=%d, recipe=%s)", spec.n, spec.d, spec.k, spec.recipe)
    return cloud


def densify(cloud: GaussianCloud) -> GaussianCloud:
    """Dense-mode copy whose factor reproduces the diagonal covariances exactly."""
    if cloud.covariance != "diagonal":
        raise ConfigurationError("densify expects a cloud in diagonal mode")
    tril = np.zeros(cloud.log_sigma.shape[:-1] + (cloud.d * (cloud.d + 1) // 2,))
    for (r, c), i in _tril_index(cloud.d).items():
        if r == c:
            tril[..., i] = cloud.log_sigma[..., r]
    return GaussianCloud(n=cloud.n, d=cloud.d, k=cloud.k, mu=cloud.mu.copy(), feat=cloud.feat.copy(),
                         tril=tril, covariance="dense", per_feature=cloud.per_feature,
                         learn_mu=cloud.learn_mu, cutoff=cloud.cutoff)


# ---------------------------------------------------------------------------
# Statistics and snapshots
# ---------------------------------------------------------------------------

@dataclass
class CloudStats:
    nn_distance: np.ndarray   # (n * m,)
    variances: np.ndarray     # (n * m, d)

    @property
    def collapsed(self) -> bool:
        return bool(np.any(self.nn_distance <= 0.0))

    def table(self) -> np.ndarray:
        return np.column_stack([self.nn_distance, self.variances])

    def header(self) -> List[str]:
        return ["nn_distance"] + [f"var_{j}" for j in range(self.variances.shape[1])]


def cloud_stats(cloud: GaussianCloud) -> CloudStats:
    """Nearest-neighbour centre distances and per-axis variances."""
    centers = cloud.centers()
    if centers.shape[0] < 2:
        raise ContractViolationError("cloud statistics need at least two Gaussians")
    distances, _ = cKDTree(centers).query(centers, k=2)
    return CloudStats(nn_distance=distances[:, 1], variances=cloud.variances().reshape(-1, cloud.d))


def write_stats(stats: CloudStats, path: Path) -> None:
    np.savetxt(path, stats.table(), delimiter=",", header=",".join(stats.header()), comments="", fmt="%.17g")


def snapshot_table(cloud: GaussianCloud) -> Tuple[List[str], np.ndarray]:
    """Header and rows of the Gaussian snapshot CSV."""
    d, k = cloud.d, cloud.k
    header = ["id"] + [f"mu_{j}" for j in range(d)] + [f"sigma_{j}" for j in range(d)] + [f"f_{j}" for j in range(k)]
    rows, cols = np.tril_indices(d)
    if cloud.covariance == "dense":
        header += [f"l_{r}_{c}" for r, c in zip(rows, cols)]
    sigma = np.sqrt(cloud.variances())
    L = cloud.factors()
    table = []
    for i in range(cloud.n):
        for j in range(cloud.m):
            if cloud.per_feature:
                weights = np.zeros(k)
                weights[j] = cloud.feat[i, j]
            else:
                weights = cloud.feat[i]
            row = [i * cloud.m + j, *cloud.mu[i, j], *sigma[i, j], *weights]
            if cloud.covariance == "dense":
                row += list(L[i, j][rows, cols])
            table.append(row)
    return header, np.asarray(table, dtype=np.float64)


def write_snapshot(cloud: GaussianCloud, path: Path) -> None:
    header, table = snapshot_table(cloud)
    fmt = ["%d"] + ["%.17g"] * (len(header) - 1)
    np.savetxt(path, table, delimiter=",", header=",".join(header), comments="", fmt=fmt)
