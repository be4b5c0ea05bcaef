"""
Collocation point sampling.

Batches are a pure function of (seed, stream, iteration): every call builds
its own generator from a ``SeedSequence``, so a run can be replayed or
resumed without carrying RNG state around.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from pigs.errors import ConfigurationError
from pigs.pde_zoo import Constraint, PdeProblem


@dataclass(frozen=True)
class BatchSizes:
    interior: int = 10_000
    boundary: int = 256   # per face
    initial: int = 512
    data: int = 1024

    def __post_init__(self):
        for name in ("interior", "boundary", "initial", "data"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"batch size '{name}' must be positive")

    def for_constraint(self, constraint: Constraint) -> int:
        if constraint.kind in ("initial", "initial_rate"):
            return self.initial
        if constraint.kind == "data":
            return self.data
        return self.boundary


@dataclass
class CollocationBatch:
    interior: np.ndarray                                   # (n_int, d)
    constraints: Dict[str, np.ndarray] = field(default_factory=dict)
    targets: Dict[str, Optional[np.ndarray]] = field(default_factory=dict)
    stream: int = 0
    iteration: int = 0


def batch_rng(seed: int, stream: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, iteration]))


def _open_uniform(rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    """Uniform samples strictly inside (lo, hi) on every axis."""
    x = rng.uniform(lo, hi, size=(n, lo.size))
    return np.clip(x, np.nextafter(lo, hi), np.nextafter(hi, lo))


def _face_points(rng, problem: PdeProblem, constraint: Constraint, n: int) -> np.ndarray:
    lo, hi = np.asarray(problem.lo), np.asarray(problem.hi)
    faces = []
    for side in constraint.sides:
        points = _open_uniform(rng, lo, hi, n)
        points[:, constraint.axis] = hi[constraint.axis] if side else lo[constraint.axis]
        faces.append(points)
    return np.concatenate(faces, axis=0)


def _paired_points(rng, problem: PdeProblem, constraint: Constraint, n: int) -> np.ndarray:
    lo, hi = np.asarray(problem.lo), np.asarray(problem.hi)
    left = _open_uniform(rng, lo, hi, n)
    left[:, constraint.axis] = lo[constraint.axis]
    right = left.copy()
    right[:, constraint.axis] = hi[constraint.axis]
    return np.stack([left, right])


def constraint_points(rng: np.random.Generator, problem: PdeProblem, constraint: Constraint,
                      n: int):
    """(points, targets) for one constraint."""
    if constraint.kind == "data":
        obs = problem.observations
        if obs is None:
            raise ConfigurationError("data constraint without observations")
        pick = rng.choice(obs.points.shape[0], size=min(n, obs.points.shape[0]), replace=False)
        pick.sort()
        return obs.points[pick], obs.values[pick]
    if constraint.paired:
        return _paired_points(rng, problem, constraint, n), None
    points = _face_points(rng, problem, constraint, n)
    targets = None if constraint.target is None else np.asarray(constraint.target(points), dtype=np.float64)
    return points, targets


def sample_batch(problem: PdeProblem, sizes: BatchSizes, seed: int, iteration: int = 0,
                 stream: int = 0) -> CollocationBatch:
    """Interior points over the open domain plus points for every constraint."""
    rng = batch_rng(seed, stream, iteration)
    lo, hi = np.asarray(problem.lo, dtype=np.float64), np.asarray(problem.hi, dtype=np.float64)
    batch = CollocationBatch(interior=_open_uniform(rng, lo, hi, sizes.interior), stream=stream, iteration=iteration)
    for constraint in problem.constraints:
        points, targets = constraint_points(rng, problem, constraint, sizes.for_constraint(constraint))
        batch.constraints[constraint.name] = points
        batch.targets[constraint.name] = targets
    return batch


def grid_axes(lo: Sequence[float], hi: Sequence[float], resolution) -> List[np.ndarray]:
    if np.isscalar(resolution):
        resolution = [int(resolution)] * len(lo)
    if len(resolution) != len(lo):
        raise ConfigurationError("one resolution per axis required")
    if any(r < 2 for r in resolution):
        raise ConfigurationError(f"grid resolution must be at least 2 per axis, got {list(resolution)}")
    return [np.linspace(a, b, r) for a, b, r in zip(lo, hi, resolution)]


def eval_grid(problem: PdeProblem, resolution) -> np.ndarray:
    """Equispaced tensor-product grid including endpoints, shape (prod(res), d), C order."""
    axes = grid_axes(problem.lo, problem.hi, resolution)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)
