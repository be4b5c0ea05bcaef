"""
PDE problem definitions.

Each problem bundles its physical domain, the interior residual built from a
predicted ``Jet2``, the boundary/initial constraints, the equation constants
and, where one exists, a closed-form solution. Coordinates are ordered
``(x[, y][, t])`` with time last.

Exact solutions are written with the type-dispatching functions of
``pigs.autodiff`` so the same code evaluates plain arrays and jets (the
latter give analytic derivatives for residual checks).
"""
import inspect
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from pigs.autodiff import Jet2, Var, cos, exp, seed_inputs, sin, sqrt, tanh, value_of
from pigs.errors import ConfigurationError, ContractViolationError, UnsupportedError
from pigs.model import VALUES_ONLY, DerivativeRequest, PigModel

logger = logging.getLogger(__name__)

Scalar = Union[float, Var]

V_T_MAX = 0.385
# below this radius the swirl rate uses its series about r = 0
SWIRL_LIMIT_RADIUS = 1e-3

CONSTRAINT_KINDS = (
    "dirichlet", "initial", "initial_rate", "periodic_value", "periodic_derivative", "neumann", "data",
)


# ---------------------------------------------------------------------------
# Residual operators
# ---------------------------------------------------------------------------

def residual_allen_cahn(u, u_t, u_xx, diffusion: Scalar = 1e-4, reaction: Scalar = 5.0,
                        growth: Scalar = 5.0):
    """u_t - D u_xx + lambda u^3 - 5u."""
    return u_t - diffusion * u_xx + reaction * (u * u * u) - growth * u


def helmholtz_forcing(x, y, k: float = 1.0, a1: float = 4.0, a2: float = 1.0):
    s = np.sin(a1 * np.pi * np.asarray(x)) * np.sin(a2 * np.pi * np.asarray(y))
    return (k ** 2 - (a1 * np.pi) ** 2 - (a2 * np.pi) ** 2) * s


def residual_helmholtz(u, u_xx, u_yy, x, y, k: float = 1.0, a1: float = 4.0, a2: float = 1.0):
    """Laplacian(u) + k^2 u - q."""
    return u_xx + u_yy + (k ** 2) * u - helmholtz_forcing(x, y, k, a1, a2)


def klein_gordon_exact(x, y, t):
    return (x + y) * cos(t * 2.0) + x * y * sin(t * 2.0)


def klein_gordon_forcing(x, y, t):
    # u_tt = -4u and the Laplacian vanishes for the manufactured solution
    u = klein_gordon_exact(np.asarray(x), np.asarray(y), np.asarray(t))
    return -4.0 * u + u * u


def residual_klein_gordon(u, u_tt, u_xx, u_yy, x, y, t):
    """u_tt - Laplacian(u) + u^2 - f."""
    return u_tt - (u_xx + u_yy) + u * u - klein_gordon_forcing(x, y, t)


def _swirl_series(r2):
    # tanh(r) sech^2(r) / r expanded in r^2
    return (1.0 - r2 * (4.0 / 3.0 - r2 * (17.0 / 15.0 - r2 * (248.0 / 315.0)))) / V_T_MAX


def swirl_rate(x, y):
    """w = v_t / (r v_t,max) with v_t = sech^2(r) tanh(r)."""
    if isinstance(x, (Jet2, Var)) or isinstance(y, (Jet2, Var)):
        r2 = x * x + y * y
        near = (value_of(r2) < SWIRL_LIMIT_RADIUS ** 2).astype(np.float64)
        # points near the axis take r = 1 in the closed form and the series instead
        r = sqrt(r2 + near)
        th = tanh(r)
        return th * (1.0 - th * th) / (r * V_T_MAX) * (1.0 - near) + _swirl_series(r2) * near
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r = np.hypot(x, y)
    th = np.tanh(r)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = th * (1.0 - th * th) / (r * V_T_MAX)
    return np.where(r < SWIRL_LIMIT_RADIUS, _swirl_series(x * x + y * y), w)


def advection_field(x, y) -> Tuple[np.ndarray, np.ndarray]:
    """(a, b) = (-w y, w x); tangential to circles around the origin."""
    w = swirl_rate(x, y)
    return -w * np.asarray(y), w * np.asarray(x)


def flow_mixing_exact(x, y, t):
    w = swirl_rate(x, y)
    return -tanh(y * 0.5 * cos(w * t) - x * 0.5 * sin(w * t))


def residual_flow_mixing(u_t, u_x, u_y, x, y):
    """u_t + a u_x + b u_y."""
    a, b = advection_field(x, y)
    return u_t + a * u_x + b * u_y


def residual_nl_diffusion(u, u_t, u_x, u_y, u_xx, u_yy, rate: float = 0.05):
    """u_t - rate (|grad u|^2 + u Laplacian(u)), i.e. u_t - rate/2 Laplacian(u^2)."""
    return u_t - rate * (u_x * u_x + u_y * u_y + u * (u_xx + u_yy))


NL_DIFFUSION_BUMPS = (
    # (amplitude, centre x, centre y, width)
    (0.25, 0.2, 0.3, 1.0 / np.sqrt(10.0)),
    (0.4, -0.1, -0.5, 1.0 / np.sqrt(15.0)),
    (0.3, -0.5, 0.0, 1.0 / np.sqrt(20.0)),
)


def nl_diffusion_initial(x, y):
    """Three Gaussian peaks."""
    total = 0.0
    for amp, a, b, width in NL_DIFFUSION_BUMPS:
        dx, dy = x - a, y - b
        total = total + amp * exp((dx * dx + dy * dy) * (-1.0 / width ** 2))
    return total


def allen_cahn_initial(x):
    return x * x * cos(x * np.pi)


ODE_MU = 4.0


def ode_eq15_exact(x, mu: float = ODE_MU):
    return -sin((x - 100.0) * (2.0 * mu * np.pi))


def ode_eq30_exact(x):
    left, right = (22.0 - x) * 0.5, (x - 20.0) * 0.5
    return left * left * sin(x * (2.0 * np.pi)) + right * right * sin(x * (16.0 * np.pi))


def ode_forcing(x, variant: str, mu: float = ODE_MU) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if variant == "eq15":
        return 4.0 * mu ** 2 * np.pi ** 2 * np.sin(2.0 * mu * np.pi * (x - 100.0))
    if variant == "eq30":
        pi = np.pi
        return (-2.0 * pi * (22.0 - x) * np.cos(2.0 * pi * x) + 0.5 * np.sin(2.0 * pi * x)
                - pi ** 2 * (22.0 - x) ** 2 * np.sin(2.0 * pi * x)
                + 16.0 * pi * (x - 20.0) * np.cos(16.0 * pi * x) + 0.5 * np.sin(16.0 * pi * x)
                - 64.0 * pi ** 2 * (x - 20.0) ** 2 * np.sin(16.0 * pi * x))
    raise ConfigurationError(f"unknown ODE variant '{variant}'")


def residual_ode_appendix(u, u_xx, x, variant: str = "eq15", mu: float = ODE_MU):
    """u_xx minus the forcing of the chosen variant."""
    return u_xx - ode_forcing(x, variant, mu)


# ---------------------------------------------------------------------------
# Problems and constraints
# ---------------------------------------------------------------------------

Target = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Constraint:
    """One boundary, initial or data term of the loss.

    ``axis`` is the coordinate held fixed (faces, initial slice) or matched
    (periodic pairs); ``sides`` selects the lo (0) and/or hi (1) face.
    """
    name: str
    kind: str
    axis: int = 0
    sides: Tuple[int, ...] = (0, 1)
    target: Optional[Target] = None
    derivative_axis: Optional[int] = None

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise ConfigurationError(f"constraint kind must be one of {CONSTRAINT_KINDS}, got '{self.kind}'")

    @property
    def paired(self) -> bool:
        return self.kind.startswith("periodic")

    @property
    def request(self) -> DerivativeRequest:
        if self.kind in ("initial_rate", "periodic_derivative", "neumann"):
            axis = self.axis if self.derivative_axis is None else self.derivative_axis
            return DerivativeRequest((axis,), second=())
        return VALUES_ONLY


@dataclass(frozen=True)
class Observations:
    """Measured solution values used by inverse problems."""
    points: np.ndarray   # (M, d)
    values: np.ndarray   # (M,)

    def __post_init__(self):
        if self.points.ndim != 2 or self.values.shape != (self.points.shape[0],):
            raise ConfigurationError("observations need points (M, d) and values (M,)")


InteriorFn = Callable[[Jet2, np.ndarray, Mapping[str, Scalar]], Var]


@dataclass(frozen=True)
class PdeProblem:
    name: str
    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    request: DerivativeRequest
    interior: InteriorFn
    constraints: Tuple[Constraint, ...]
    coeffs: Mapping[str, float] = field(default_factory=dict)
    learnable: Mapping[str, float] = field(default_factory=dict)
    exact: Optional[Callable] = None
    time_axis: Optional[int] = None
    recipe: str = "custom"
    reference: str = "exact"
    observations: Optional[Observations] = None

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def has_exact(self) -> bool:
        return self.exact is not None

    def constraint(self, name: str) -> Constraint:
        for c in self.constraints:
            if c.name == name:
                return c
        raise ContractViolationError(f"problem '{self.name}' has no constraint '{name}'")

    def coefficient_values(self, overrides: Optional[Mapping[str, Scalar]] = None) -> Dict[str, Scalar]:
        values: Dict[str, Scalar] = dict(self.coeffs)
        values.update(overrides or {})
        return values

    def residual(self, u: Jet2, x: np.ndarray, coeffs: Optional[Mapping[str, Scalar]] = None) -> Var:
        return self.interior(u, np.asarray(x), self.coefficient_values(coeffs))

    def exact_values(self, x: np.ndarray) -> np.ndarray:
        if self.exact is None:
            raise UnsupportedError(f"problem '{self.name}' has no closed-form solution")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.broadcast_to(value_of(self.exact(*x.T)), (x.shape[0],)).astype(np.float64)

    def exact_jet(self, x: np.ndarray, request: Optional[DerivativeRequest] = None) -> Jet2:
        """Closed-form solution with analytic input derivatives."""
        if self.exact is None:
            raise UnsupportedError(f"problem '{self.name}' has no closed-form solution")
        request = request or self.request
        xs = seed_inputs(np.atleast_2d(x), request.directions, request.pairs, request.second)
        return self.exact(*xs)


def _exact_target(problem_exact: Callable) -> Target:
    return lambda x: np.asarray(value_of(problem_exact(*np.asarray(x).T)), dtype=np.float64)


def _faces(name: str, kind: str, axes: Sequence[int], target: Optional[Target] = None) -> List[Constraint]:
    return [Constraint(f"{name}_{axis}", kind, axis=axis, target=target) for axis in axes]


# interior residual adapters: pick derivative slots out of the predicted jet

def _allen_cahn_interior(u: Jet2, x, c) -> Var:
    return residual_allen_cahn(u.value, u.dx(1), u.dxx(0), c["diffusion"], c["reaction"], c["growth"])


def _helmholtz_interior(u: Jet2, x, c) -> Var:
    return residual_helmholtz(u.value, u.dxx(0), u.dxx(1), x[:, 0], x[:, 1], c["k"], c["a1"], c["a2"])


def _klein_gordon_interior(u: Jet2, x, c) -> Var:
    return residual_klein_gordon(u.value, u.dxx(2), u.dxx(0), u.dxx(1), x[:, 0], x[:, 1], x[:, 2])


def _flow_mixing_interior(u: Jet2, x, c) -> Var:
    return residual_flow_mixing(u.dx(2), u.dx(0), u.dx(1), x[:, 0], x[:, 1])


def _nl_diffusion_interior(u: Jet2, x, c) -> Var:
    return residual_nl_diffusion(u.value, u.dx(2), u.dx(0), u.dx(1), u.dxx(0), u.dxx(1), c["rate"])


def _ode_interior(variant: str):
    def interior(u: Jet2, x, c) -> Var:
        return residual_ode_appendix(u.value, u.dxx(0), x[:, 0], variant, c.get("mu", ODE_MU))
    return interior


def allen_cahn(diffusion: float = 1e-4, reaction: float = 5.0, growth: float = 5.0) -> PdeProblem:
    initial = lambda x: np.asarray(allen_cahn_initial(np.asarray(x)[:, 0]))
    return PdeProblem(
        name="allen_cahn", lo=(-1.0, 0.0), hi=(1.0, 1.0),
        request=DerivativeRequest((0, 1), second=(0,)),
        interior=_allen_cahn_interior,
        constraints=(
            Constraint("initial", "initial", axis=1, sides=(0,), target=initial),
            Constraint("periodic_value", "periodic_value", axis=0),
            Constraint("periodic_derivative", "periodic_derivative", axis=0),
        ),
        coeffs={"diffusion": diffusion, "reaction": reaction, "growth": growth},
        time_axis=1, recipe="allen_cahn", reference="allen_cahn_fd",
    )


def helmholtz(k: float = 1.0, a1: float = 4.0, a2: float = 1.0) -> PdeProblem:
    exact = lambda x, y: sin(x * (a1 * np.pi)) * sin(y * (a2 * np.pi))
    return PdeProblem(
        name="helmholtz", lo=(-1.0, -1.0), hi=(1.0, 1.0),
        request=DerivativeRequest((0, 1)),
        interior=_helmholtz_interior,
        constraints=tuple(_faces("boundary", "dirichlet", (0, 1), _exact_target(exact))),
        coeffs={"k": k, "a1": a1, "a2": a2},
        exact=exact, recipe="helmholtz",
    )


def klein_gordon() -> PdeProblem:
    rate = lambda x: 2.0 * np.asarray(x)[:, 0] * np.asarray(x)[:, 1]
    return PdeProblem(
        name="klein_gordon", lo=(-1.0, -1.0, 0.0), hi=(1.0, 1.0, 10.0),
        request=DerivativeRequest((0, 1, 2)),
        interior=_klein_gordon_interior,
        constraints=tuple(_faces("boundary", "dirichlet", (0, 1), _exact_target(klein_gordon_exact))) + (
            Constraint("initial", "initial", axis=2, sides=(0,), target=_exact_target(klein_gordon_exact)),
            Constraint("initial_rate", "initial_rate", axis=2, sides=(0,), target=rate),
        ),
        exact=klein_gordon_exact, time_axis=2, recipe="klein_gordon",
    )


def flow_mixing() -> PdeProblem:
    return PdeProblem(
        name="flow_mixing", lo=(-4.0, -4.0, 0.0), hi=(4.0, 4.0, 4.0),
        request=DerivativeRequest((0, 1, 2), second=()),
        interior=_flow_mixing_interior,
        constraints=tuple(_faces("boundary", "dirichlet", (0, 1), _exact_target(flow_mixing_exact))) + (
            Constraint("initial", "initial", axis=2, sides=(0,), target=_exact_target(flow_mixing_exact)),
        ),
        exact=flow_mixing_exact, time_axis=2, recipe="flow_mixing",
    )


def nl_diffusion(rate: float = 0.05) -> PdeProblem:
    initial = lambda x: np.asarray(nl_diffusion_initial(np.asarray(x)[:, 0], np.asarray(x)[:, 1]))
    return PdeProblem(
        name="nl_diffusion", lo=(-1.0, -1.0, 0.0), hi=(1.0, 1.0, 1.0),
        request=DerivativeRequest((0, 1, 2), second=(0, 1)),
        interior=_nl_diffusion_interior,
        constraints=(Constraint("initial", "initial", axis=2, sides=(0,), target=initial),)
        + tuple(_faces("neumann", "neumann", (0, 1))),
        coeffs={"rate": rate},
        time_axis=2, recipe="nl_diffusion", reference="nl_diffusion_fd",
    )


def ode_eq15(mu: float = ODE_MU) -> PdeProblem:
    exact = lambda x: ode_eq15_exact(x, mu)
    return PdeProblem(
        name="ode_eq15", lo=(100.0,), hi=(101.0,),
        request=DerivativeRequest((0,)),
        interior=_ode_interior("eq15"),
        constraints=tuple(_faces("boundary", "dirichlet", (0,), lambda x: np.zeros(len(x)))),
        coeffs={"mu": mu}, exact=exact, recipe="ode_eq15",
    )


def ode_eq30() -> PdeProblem:
    return PdeProblem(
        name="ode_eq30", lo=(20.0,), hi=(22.0,),
        request=DerivativeRequest((0,)),
        interior=_ode_interior("eq30"),
        constraints=tuple(_faces("boundary", "dirichlet", (0,), lambda x: np.zeros(len(x)))),
        exact=ode_eq30_exact, recipe="ode_eq30",
    )


def inverse_coefficient_hook(problem: PdeProblem, learnable: Mapping[str, float],
                             observations: Optional[Observations]) -> PdeProblem:
    """Turn named equation constants into trainable slots fitted against observations."""
    if problem.name != "allen_cahn":
        raise ConfigurationError(f"coefficient inversion is only defined for allen_cahn, got '{problem.name}'")
    if observations is None:
        raise ConfigurationError("inverse problem needs observations")
    unknown = set(learnable) - set(problem.coeffs)
    if unknown:
        raise ConfigurationError(f"unknown coefficients {sorted(unknown)} for '{problem.name}'")
    if observations.points.shape[1] != problem.d:
        raise ConfigurationError(f"observations have {observations.points.shape[1]} coordinates, expected {problem.d}")
    coeffs = {k: v for k, v in problem.coeffs.items() if k not in learnable}
    data = Constraint("data", "data", axis=0, sides=())
    return replace(problem, name=f"{problem.name}_inverse", coeffs=coeffs, learnable=dict(learnable),
                   constraints=problem.constraints + (data,), observations=observations,
                   recipe="allen_cahn_inverse")


def allen_cahn_inverse(reaction_init: float = 0.0, observations: Optional[Observations] = None,
                       diffusion: float = 1e-4, growth: float = 5.0) -> PdeProblem:
    return inverse_coefficient_hook(allen_cahn(diffusion=diffusion, growth=growth), {"reaction": reaction_init}, observations)


PROBLEMS: Dict[str, Callable[..., PdeProblem]] = {
    "allen_cahn": allen_cahn,
    "allen_cahn_inverse": allen_cahn_inverse,
    "helmholtz": helmholtz,
    "klein_gordon": klein_gordon,
    "flow_mixing": flow_mixing,
    "nl_diffusion": nl_diffusion,
    "ode_eq15": ode_eq15,
    "ode_eq30": ode_eq30,
}


def get_problem(name: str, **args) -> PdeProblem:
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ConfigurationError(f"unknown problem '{name}'; known: {sorted(PROBLEMS)}") from None
    try:
        inspect.signature(factory).bind(**args)
    except TypeError as exc:
        raise ConfigurationError(f"invalid arguments for problem '{name}': {exc}") from None
    return factory(**args)


# ---------------------------------------------------------------------------
# Constraint evaluation
# ---------------------------------------------------------------------------

def constraint_residual(constraint: Constraint, model: PigModel, points: np.ndarray,
                        targets: Optional[np.ndarray] = None,
                        params: Optional[Mapping[str, Var]] = None) -> Var:
    """Residual array of one constraint at its collocation points.

    Periodic constraints take ``points`` of shape (2, n, d): lo-side and
    hi-side partners.
    """
    request = constraint.request
    if constraint.paired:
        points = np.asarray(points)
        if points.ndim != 3 or points.shape[0] != 2:
            raise ContractViolationError("periodic constraints need paired points of shape (2, n, d)")
        n = points.shape[1]
        u = model.predict(points.reshape(2 * n, -1), request, params)
        component = u.value if constraint.kind == "periodic_value" else u.dx(constraint.axis)
        return component[:n] - component[n:]
    u = model.predict(points, request, params)
    if constraint.kind in ("initial_rate", "neumann"):
        axis = constraint.axis if constraint.derivative_axis is None else constraint.derivative_axis
        component = u.dx(axis)
    else:
        component = u.value
    if targets is None:
        return component
    return component - targets


def boundary_ops(problem: PdeProblem, model: PigModel, points: Mapping[str, np.ndarray],
                 targets: Optional[Mapping[str, np.ndarray]] = None,
                 params: Optional[Mapping[str, Var]] = None) -> Dict[str, Var]:
    """Residuals of every constraint present in ``points``, keyed by constraint name."""
    targets = targets or {}
    return {c.name: constraint_residual(c, model, points[c.name], targets.get(c.name), params)
            for c in problem.constraints if c.name in points}
