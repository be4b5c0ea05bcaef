"""
PIG predictor: rescale -> Gaussian embedding -> refinement network.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from pigs.autodiff import Jet2, ParamVector, Tape, Var, backward, seed_inputs
from pigs.embedding import GaussianCloud, densify, fe_forward
from pigs.errors import ConfigurationError, TrainingDivergedError
from pigs.net import RefineNet, net_forward
from pigs.optim import AdamState, adam_step

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Rescale:
    """Per-axis affine map from the physical box onto the Gaussian input box."""
    lo_phys: Tuple[float, ...]
    hi_phys: Tuple[float, ...]
    lo: Tuple[float, ...]
    hi: Tuple[float, ...]

    def __post_init__(self):
        if not (len(self.lo_phys) == len(self.hi_phys) == len(self.lo) == len(self.hi)):
            raise ConfigurationError("rescale bounds must share one dimension")
        if any(h <= l for l, h in zip(self.lo_phys, self.hi_phys)) or any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ConfigurationError("rescale bounds must satisfy lo < hi on every axis")

    @classmethod
    def identity(cls, lo: Sequence[float], hi: Sequence[float]) -> "Rescale":
        return cls(tuple(lo), tuple(hi), tuple(lo), tuple(hi))

    @property
    def scale(self) -> np.ndarray:
        return (np.asarray(self.hi) - np.asarray(self.lo)) / (np.asarray(self.hi_phys) - np.asarray(self.lo_phys))

    @property
    def shift(self) -> np.ndarray:
        return np.asarray(self.lo) - self.scale * np.asarray(self.lo_phys)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) * self.scale + self.shift

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y) - self.shift) / self.scale


@dataclass(frozen=True)
class DerivativeRequest:
    """Input directions to differentiate along; ``second=None`` keeps all second derivatives."""
    directions: Tuple[int, ...] = ()
    second: Optional[Tuple[int, ...]] = None
    pairs: Tuple[Tuple[int, int], ...] = ()

    def union(self, other: "DerivativeRequest") -> "DerivativeRequest":
        directions = tuple(sorted(set(self.directions) | set(other.directions)))
        if self.second is None or other.second is None:
            second = None
        else:
            second = tuple(sorted(set(self.second) | set(other.second)))
        pairs = tuple(sorted(set(self.pairs) | set(other.pairs)))
        return DerivativeRequest(directions, second, pairs)


VALUES_ONLY = DerivativeRequest()


class PigModel:
    """Cloud + network + input rescaling, with all parameters in one ParamVector.

    Extra learnable scalars (inverse-problem coefficients) live in blocks named
    ``coeff.<name>``.
    """

    def __init__(self, cloud: GaussianCloud, net: RefineNet, rescale: Rescale,
                 coeffs: Optional[Mapping[str, float]] = None):
        if len(rescale.lo) != cloud.d:
            raise ConfigurationError(f"rescale has {len(rescale.lo)} axes, cloud expects {cloud.d}")
        if net.in_dim != cloud.k:
            raise ConfigurationError(f"network input {net.in_dim} does not match feature dimension {cloud.k}")
        self.cloud = cloud
        self.net = net
        self.rescale = rescale
        blocks: Dict[str, np.ndarray] = {}
        blocks.update({f"cloud.{name}": a for name, a in cloud.blocks().items()})
        blocks.update({f"net.{name}": a for name, a in net.blocks().items()})
        for name, value in (coeffs or {}).items():
            blocks[f"coeff.{name}"] = np.atleast_1d(np.asarray(value, dtype=np.float64))
        self.params = ParamVector.from_blocks(blocks)
        cloud.attach({name: self.params.view(f"cloud.{name}") for name in cloud.blocks()})
        net.attach({name: self.params.view(f"net.{name}") for name in net.blocks()})

    @property
    def d(self) -> int:
        return self.cloud.d

    @property
    def coeff_names(self):
        return [name[len("coeff."):] for name in self.params.layout.names if name.startswith("coeff.")]

    def coeff(self, name: str) -> float:
        return float(self.params.view(f"coeff.{name}")[0])

    @property
    def frozen_blocks(self) -> Tuple[str, ...]:
        return () if self.cloud.learn_mu else ("cloud.mu",)

    def trainable_mask(self) -> np.ndarray:
        return ~self.params.mask(self.frozen_blocks)

    def mask_grad(self, grad: np.ndarray) -> np.ndarray:
        """Zero adjoints of frozen blocks."""
        if not self.frozen_blocks:
            return grad
        return np.where(self.trainable_mask(), grad, 0.0)

    def set_params(self, data: np.ndarray) -> None:
        self.params.data[:] = data

    def bind(self, tape: Optional[Tape] = None) -> Dict[str, Var]:
        return self.params.bind(tape)

    @staticmethod
    def _sub(bound: Mapping[str, Var], prefix: str) -> Dict[str, Var]:
        return {name[len(prefix):]: var for name, var in bound.items() if name.startswith(prefix)}

    def coeff_vars(self, bound: Mapping[str, Var]) -> Dict[str, Var]:
        return {name: var[0] for name, var in self._sub(bound, "coeff.").items()}

    def rescaled_inputs(self, x: np.ndarray, request: DerivativeRequest):
        """Physical-coordinate jets mapped onto the Gaussian input box."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        xs = seed_inputs(x, request.directions, request.pairs, request.second)
        scale, shift = self.rescale.scale, self.rescale.shift
        return [jet * float(scale[j]) + float(shift[j]) for j, jet in enumerate(xs)]

    def predict(self, x: np.ndarray, request: DerivativeRequest = VALUES_ONLY,
                params: Optional[Mapping[str, Var]] = None) -> Jet2:
        """u and the requested derivatives (w.r.t. physical coordinates) at a batch of points."""
        bound = params if params is not None else self.bind()
        xr = self.rescaled_inputs(x, request)
        features = fe_forward(self.cloud, xr, self._sub(bound, "cloud."))
        out = net_forward(self.net, features, self._sub(bound, "net."))
        return out[:, 0]

    def predict_values(self, x: np.ndarray, chunk_size: int = 4096) -> np.ndarray:
        """Plain predictions without derivatives or tape, evaluated in chunks."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty(x.shape[0])
        bound = self.bind()
        for start in range(0, x.shape[0], chunk_size):
            stop = min(start + chunk_size, x.shape[0])
            out[start:stop] = self.predict(x[start:stop], VALUES_ONLY, bound).value.value
        return out

    def densified(self) -> "PigModel":
        """New model with dense covariances reproducing the current diagonal ones."""
        coeffs = {name: self.coeff(name) for name in self.coeff_names}
        net = RefineNet(**{**self.net.__dict__, **{k: np.array(v) for k, v in self.net.blocks().items()}})
        return PigModel(densify(self.cloud), net, self.rescale, coeffs)


# ---------------------------------------------------------------------------
# Supervised regression harness
# ---------------------------------------------------------------------------

@dataclass
class FitConfig:
    iterations: int = 5000
    lr: float = 1e-2
    n_samples: int = 2048
    resolution: int = 64
    seed: int = 0
    divergence: float = 1e6


def _domain_grid(rescale: Rescale, resolution: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, resolution) for lo, hi in zip(rescale.lo_phys, rescale.hi_phys)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def regress_fit(model: PigModel, target: Callable[[np.ndarray], np.ndarray],
                config: Optional[FitConfig] = None) -> float:
    """Least-squares fit of ``target`` with Adam; returns the held-out relative L2 error.

    For an identically zero target the absolute RMS error is returned instead.
    """
    config = config or FitConfig()
    rng = np.random.default_rng(config.seed)
    lo, hi = np.asarray(model.rescale.lo_phys), np.asarray(model.rescale.hi_phys)
    x = rng.uniform(lo, hi, size=(config.n_samples, model.d))
    y = np.asarray(target(x), dtype=np.float64)
    state = AdamState.zeros(len(model.params))

    def loss_fn(bound):
        residual = model.predict(x, VALUES_ONLY, bound).value - y
        return (residual * residual).mean()

    for iteration in range(config.iterations):
        tape = Tape()
        root = loss_fn(model.bind(tape))
        loss = float(root.value)
        if not np.isfinite(loss) or loss > config.divergence:
            raise TrainingDivergedError(iteration, loss, model.params.data.copy())
        grad = model.mask_grad(backward(tape, root))
        model.set_params(adam_step(state, model.params.data, grad, config.lr))
        if iteration % 1000 == 0:
            logger.debug("fit iteration %d loss %.3e", iteration, loss)

    grid = _domain_grid(model.rescale, config.resolution)
    pred = model.predict_values(grid)
    ref = np.asarray(target(grid), dtype=np.float64)
    ref_norm = np.linalg.norm(ref)
    if ref_norm == 0.0:
        return float(np.sqrt(np.mean((pred - ref) ** 2)))
    return float(np.linalg.norm(pred - ref) / ref_norm)
