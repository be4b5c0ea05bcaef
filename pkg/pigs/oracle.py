"""
Reference solutions and the relative L2 metric.

Problems with a closed form are evaluated analytically. Allen-Cahn and the
nonlinear diffusion problem get method-of-lines finite-difference solvers;
fields can also be imported from (and exported to) a flat binary format.
"""
import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from pigs.errors import ConfigurationError, SolverInstabilityError, UndefinedMetricError, UnsupportedError
from pigs.pde_zoo import (
    Observations, PdeProblem, allen_cahn_initial, nl_diffusion_initial,
)
from pigs.sampler import grid_axes

logger = logging.getLogger(__name__)

# RK4 stability interval on the negative real axis
RK4_STABILITY = 2.78
# fewest output time levels of the Allen-Cahn reference
AC_MIN_TIME_LEVELS = 200


@dataclass(frozen=True)
class ReferenceField:
    """Values on a tensor-product grid; axis order follows the problem coordinates."""
    axes: Sequence[np.ndarray]
    values: np.ndarray
    provenance: str

    def __post_init__(self):
        shape = tuple(len(a) for a in self.axes)
        if self.values.shape != shape:
            raise ConfigurationError(f"field values of shape {self.values.shape} do not match axes {shape}")

    @property
    def shape(self):
        return self.values.shape

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def subsample(self, resolution) -> "ReferenceField":
        """Thin every axis by an integer stride to at most ``resolution`` points, keeping both ends."""
        if np.isscalar(resolution):
            resolution = [int(resolution)] * len(self.axes)
        index = []
        for axis, target in zip(self.axes, resolution):
            n = len(axis)
            if target >= n:
                index.append(slice(None))
                continue
            if target < 2:
                raise ConfigurationError("subsampled resolution must be at least 2")
            stride = int(np.ceil((n - 1) / (target - 1)))
            while (n - 1) % stride:
                stride += 1
            index.append(slice(None, None, stride))
        axes = [a[i] for a, i in zip(self.axes, index)]
        return ReferenceField(axes, np.ascontiguousarray(self.values[tuple(index)]), self.provenance)

    def interpolate(self, points: np.ndarray) -> np.ndarray:
        """Multilinear interpolation at arbitrary points inside the grid."""
        interp = RegularGridInterpolator(tuple(self.axes), self.values, method="linear")
        return interp(np.atleast_2d(points))

    def slice_at(self, axis: int, index: int) -> np.ndarray:
        return np.take(self.values, index, axis=axis)

    def as_observations(self) -> Observations:
        return Observations(self.points(), self.values.ravel().copy())


def rel_l2(pred: Union[np.ndarray, ReferenceField], ref: Union[np.ndarray, ReferenceField]) -> float:
    """||pred - ref|| / ||ref|| over the grid."""
    p = pred.values if isinstance(pred, ReferenceField) else np.asarray(pred, dtype=np.float64)
    r = ref.values if isinstance(ref, ReferenceField) else np.asarray(ref, dtype=np.float64)
    if p.size != r.size:
        raise ConfigurationError(f"prediction has {p.size} values, reference has {r.size}")
    norm = np.linalg.norm(r.ravel())
    if norm == 0.0:
        raise UndefinedMetricError("relative L2 error against a zero reference is undefined")
    return float(np.linalg.norm(p.ravel() - r.ravel()) / norm)


# ---------------------------------------------------------------------------
# Closed-form fields
# ---------------------------------------------------------------------------

def exact_field(problem: PdeProblem, resolution) -> ReferenceField:
    if not problem.has_exact:
        raise UnsupportedError(f"problem '{problem.name}' has no closed-form solution")
    axes = grid_axes(problem.lo, problem.hi, resolution)
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=-1)
    values = problem.exact_values(points).reshape(mesh[0].shape)
    return ReferenceField(axes, values, "analytic")


# ---------------------------------------------------------------------------
# Allen-Cahn: 4th-order periodic differences, RK4
# ---------------------------------------------------------------------------

def _laplacian_periodic(u: np.ndarray, h: float) -> np.ndarray:
    return (-np.roll(u, -2) + 16.0 * np.roll(u, -1) - 30.0 * u
            + 16.0 * np.roll(u, 1) - np.roll(u, 2)) / (12.0 * h * h)


def solve_allen_cahn_reference(nx: int = 1024, nt: int = 201, diffusion: float = 1e-4,
                               reaction: float = 5.0, growth: float = 5.0,
                               dt: Optional[float] = None) -> ReferenceField:
    """u_t = D u_xx - lambda u^3 + 5u on the periodic interval [-1, 1), t in [0, 1].

    The returned x axis includes x = 1 as a copy of x = -1.
    """
    if nx < 256 or nx & (nx - 1):
        raise ConfigurationError(f"nx must be a power of two >= 256, got {nx}")
    if nt < AC_MIN_TIME_LEVELS:
        raise ConfigurationError(f"nt must be at least {AC_MIN_TIME_LEVELS}, got {nt}")
    h = 2.0 / nx
    x = -1.0 + h * np.arange(nx)
    u = np.asarray(allen_cahn_initial(x), dtype=np.float64)

    spectral_radius = diffusion * 16.0 / (3.0 * h * h) + abs(growth) + 3.0 * abs(reaction) * max(1.0, np.max(u * u))
    dt_max = RK4_STABILITY / spectral_radius
    out_dt = 1.0 / (nt - 1)
    if dt is None:
        substeps = int(np.ceil(out_dt / (0.9 * dt_max)))
    else:
        if dt > dt_max:
            raise ConfigurationError(f"time step {dt:.3e} exceeds the RK4 stability bound {dt_max:.3e}")
        substeps = int(np.ceil(out_dt / dt - 1e-9))
    step = out_dt / substeps
    logger.info("Allen-Cahn reference: nx=%d, dt=%.3e, %d substeps per output", nx, step, substeps)

    def rhs(v):
        return diffusion * _laplacian_periodic(v, h) + growth * v - reaction * v * v * v

    values = np.empty((nx + 1, nt))
    values[:nx, 0] = u
    for n in range(1, nt):
        for _ in range(substeps):
            k1 = rhs(u)
            k2 = rhs(u + 0.5 * step * k1)
            k3 = rhs(u + 0.5 * step * k2)
            k4 = rhs(u + step * k3)
            u = u + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(u)):
            raise SolverInstabilityError(f"Allen-Cahn reference blew up at output step {n}")
        values[:nx, n] = u
    values[nx] = values[0]
    axes = [np.linspace(-1.0, 1.0, nx + 1), np.linspace(0.0, 1.0, nt)]
    return ReferenceField(axes, values, f"fd-solver(allen_cahn, nx={nx}, nt={nt}, dt={step:.6e})")


# ---------------------------------------------------------------------------
# Nonlinear diffusion: u_t = rate/2 Laplacian(u^2), zero-flux walls, forward Euler
# ---------------------------------------------------------------------------

def _laplacian_neumann(v: np.ndarray, hx: float, hy: Optional[float] = None) -> np.ndarray:
    """5-point Laplacian with mirrored ghost nodes (zero normal derivative)."""
    hy = hx if hy is None else hy
    p = np.pad(v, 1, mode="reflect")
    return ((p[2:, 1:-1] + p[:-2, 1:-1] - 2.0 * v) / (hx * hx)
            + (p[1:-1, 2:] + p[1:-1, :-2] - 2.0 * v) / (hy * hy))


def trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def field_mass(u: np.ndarray, hx: float, hy: Optional[float] = None) -> float:
    hy = hx if hy is None else hy
    return float(trapezoid_weights(u.shape[0], hx) @ u @ trapezoid_weights(u.shape[1], hy))


def _vertex_count(n: int, name: str) -> None:
    if n < 5 or (n - 1) & (n - 2):
        raise ConfigurationError(f"{name} must be 2^m + 1 >= 5, got {n}")


def solve_nl_diffusion_reference(nx: int = 65, ny: Optional[int] = None, nt: int = 11,
                                 rate: float = 0.05, safety: float = 0.5) -> ReferenceField:
    """Vertex-centred grid on [-1, 1]^2 (``nx`` by ``ny`` nodes, each 2^m + 1), t in [0, 1]."""
    ny = nx if ny is None else ny
    _vertex_count(nx, "nx")
    _vertex_count(ny, "ny")
    if nt < 2:
        raise ConfigurationError(f"nt must be at least 2, got {nt}")
    if not 0.0 < safety <= 1.0:
        raise ConfigurationError(f"safety factor must lie in (0, 1], got {safety}")
    hx, hy = 2.0 / (nx - 1), 2.0 / (ny - 1)
    x_axis, y_axis = np.linspace(-1.0, 1.0, nx), np.linspace(-1.0, 1.0, ny)
    X, Y = np.meshgrid(x_axis, y_axis, indexing="ij")
    u = np.asarray(nl_diffusion_initial(X, Y), dtype=np.float64)
    u_max, u_min = float(u.max()), float(u.min())
    D = 0.5 * rate

    dt_max = safety / (4.0 * D * u_max * (1.0 / (hx * hx) + 1.0 / (hy * hy)))
    out_dt = 1.0 / (nt - 1)
    substeps = int(np.ceil(out_dt / dt_max))
    step = out_dt / substeps
    logger.info("nonlinear diffusion reference: %dx%d, dt=%.3e, %d substeps per output", nx, ny, step, substeps)

    tol = 1e-12 * max(1.0, u_max)
    values = np.empty((nx, ny, nt))
    values[..., 0] = u
    for n in range(1, nt):
        for _ in range(substeps):
            u = u + step * D * _laplacian_neumann(u * u, hx, hy)
        if not np.all(np.isfinite(u)) or u.max() > u_max + tol or u.min() < u_min - tol:
            raise SolverInstabilityError(f"maximum principle violated at output step {n}")
        values[..., n] = u
    axes = [x_axis, y_axis, np.linspace(0.0, 1.0, nt)]
    return ReferenceField(axes, values, f"fd-solver(nl_diffusion, nx={nx}, ny={ny}, nt={nt}, dt={step:.6e})")


# ---------------------------------------------------------------------------
# Dispatch, import and export
# ---------------------------------------------------------------------------

def build_reference(problem: PdeProblem, resolution: int, nx: Optional[int] = None,
                    nt: Optional[int] = None) -> ReferenceField:
    """Reference field on (at most) ``resolution`` points per axis."""
    if problem.has_exact:
        return exact_field(problem, resolution)
    if problem.reference == "allen_cahn_fd":
        # inverse problems keep the true reaction coefficient out of coeffs
        c = problem.coefficient_values()
        reaction = c.get("reaction", 5.0)
        field = solve_allen_cahn_reference(nx or 1024, nt or 201, c["diffusion"], reaction, c["growth"])
        return field.subsample(resolution)
    if problem.reference == "nl_diffusion_fd":
        field = solve_nl_diffusion_reference(nx or 65, nt=nt or 11, rate=problem.coeffs["rate"])
        return field.subsample(resolution)
    raise UnsupportedError(f"no reference solution available for '{problem.name}'")


_HEADER = struct.Struct("<I")


def save_reference_field(field: ReferenceField, path: Path) -> None:
    """uint32 ndim, uint64 sizes, little-endian float64 row-major values."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(field.values.ndim))
        fh.write(np.asarray(field.values.shape, dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def load_reference_field(path: Path, problem: PdeProblem) -> ReferenceField:
    """Read a binary field and place it on the problem's equispaced grid."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ConfigurationError(f"{path}: truncated reference header")
    (ndim,) = _HEADER.unpack_from(raw)
    if ndim != problem.d:
        raise ConfigurationError(f"{path}: field has {ndim} axes, problem '{problem.name}' has {problem.d}")
    offset = _HEADER.size + 8 * ndim
    if len(raw) < offset:
        raise ConfigurationError(f"{path}: truncated reference header")
    shape = tuple(int(s) for s in np.frombuffer(raw, dtype="<u8", count=ndim, offset=_HEADER.size))
    expected = offset + 8 * int(np.prod(shape))
    if len(raw) != expected:
        raise ConfigurationError(f"{path}: expected {expected} bytes for shape {shape}, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f8", offset=offset).reshape(shape).astype(np.float64)
    axes = grid_axes(problem.lo, problem.hi, list(shape))
    return ReferenceField(axes, values, f"imported-file({Path(path).name})")


def export_field_csv(field: ReferenceField, path: Path, names: Optional[List[str]] = None) -> None:
    names = names or [f"x_{j}" for j in range(len(field.axes))]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names + ["u"])
        for point, value in zip(field.points(), field.values.ravel()):
            writer.writerow([repr(float(c)) for c in point] + [repr(float(value))])
