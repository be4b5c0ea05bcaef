"""
Loss assembly and the training loop.

The loss is the interior residual MSE (optionally causally weighted over
time bins) plus a weighted MSE per boundary/initial/data constraint.
Training runs a list of optimizer phases; a phase may switch the cloud to
dense covariances before it starts.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from pigs.autodiff import Tape, Var, backward
from pigs.config import BalanceConfig, ModelConfig, PhaseConfig, RunConfig
from pigs.embedding import init_cloud, recipe
from pigs.errors import ConfigurationError, NumericOverflowError, TrainingDivergedError
from pigs.model import PigModel, Rescale
from pigs.net import net_init
from pigs.oracle import ReferenceField, rel_l2
from pigs.optim import AdamState, LbfgsState, adam_step, exponential_decay, lbfgs_step
from pigs.pde_zoo import PdeProblem, boundary_ops
from pigs.sampler import BatchSizes, CollocationBatch, sample_batch

logger = logging.getLogger(__name__)

# RNG streams derived from the run seed
INIT_STREAM = 0
SAMPLE_STREAM = 1


# ---------------------------------------------------------------------------
# Model construction
# ---------------------------------------------------------------------------

def build_model(problem: PdeProblem, cfg: ModelConfig, seed: int) -> PigModel:
    """Initialize cloud and network from the problem's recipe plus config overrides."""
    spec = recipe(cfg.recipe or problem.recipe)
    if spec.d != problem.d:
        raise ConfigurationError(f"recipe '{spec.recipe}' is {spec.d}-dimensional, problem '{problem.name}' is {problem.d}")
    spec = spec.with_overrides(
        n=cfg.n_gaussians, k=cfg.feature_dim, scale=cfg.sigma_init, feat_init=cfg.feat_init,
        feat_scale=cfg.feat_scale, cutoff=cfg.cutoff,
    )
    spec = spec.with_overrides(covariance=cfg.covariance, per_feature=cfg.per_feature, learn_mu=cfg.learn_mu)
    rng = np.random.default_rng(np.random.SeedSequence([seed, INIT_STREAM]))
    cloud = init_cloud(spec, rng)
    net = net_init(spec.k, cfg.hidden, 1, rng, bypass=not cfg.use_mlp)
    rescale = Rescale(tuple(problem.lo), tuple(problem.hi), spec.lo, spec.hi)
    return PigModel(cloud, net, rescale, coeffs=problem.learnable)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    interior: float
    constraints: Dict[str, float]
    weights: Dict[str, float]
    causal_min: float
    causal_mean: float
    total: float


@dataclass
class LossTerms:
    loss: Var
    terms: Dict[str, Var]
    report: LossReport


@dataclass(frozen=True)
class CausalSettings:
    bins: int
    epsilon: float


def causal_weights(bin_losses: np.ndarray, epsilon: float) -> np.ndarray:
    """w_m = exp(-eps * sum_{j<m} L_j)."""
    if epsilon <= 0:
        raise ConfigurationError(f"causal epsilon must be positive, got {epsilon}")
    losses = np.asarray(bin_losses, dtype=np.float64)
    prior = np.concatenate([[0.0], np.cumsum(losses)[:-1]])
    return np.exp(-epsilon * prior)


def _causal_interior(r2: Var, t: np.ndarray, t0: float, t1: float, settings: CausalSettings):
    bins = settings.bins
    index = np.clip(((t - t0) / (t1 - t0) * bins).astype(int), 0, bins - 1)
    counts = np.bincount(index, minlength=bins)
    averaging = np.zeros((bins, t.size))
    averaging[index, np.arange(t.size)] = 1.0 / counts[index]
    bin_losses = (Var(averaging) @ r2.reshape(t.size, 1)).reshape(bins)
    w = causal_weights(bin_losses.value, settings.epsilon)
    return (bin_losses * w).sum() * (1.0 / bins), w


def assemble_loss(model: PigModel, problem: PdeProblem, batch: CollocationBatch,
                  weights: Mapping[str, float], causal: Optional[CausalSettings] = None,
                  params: Optional[Mapping[str, Var]] = None) -> LossTerms:
    """Weighted residual loss; lives on ``params``' tape when they are watched."""
    bound = params if params is not None else model.bind()
    coeffs = model.coeff_vars(bound)
    u = model.predict(batch.interior, problem.request, bound)
    r = problem.residual(u, batch.interior, coeffs)
    r2 = r * r
    w = np.ones(1)
    if causal is not None and problem.time_axis is not None:
        axis = problem.time_axis
        interior, w = _causal_interior(r2, batch.interior[:, axis], problem.lo[axis], problem.hi[axis], causal)
    else:
        interior = r2.mean()

    terms: Dict[str, Var] = {"interior": interior}
    total = interior
    used: Dict[str, float] = {}
    for name, residual in boundary_ops(problem, model, batch.constraints, batch.targets, bound).items():
        mse = (residual * residual).mean()
        terms[name] = mse
        used[name] = float(weights.get(name, 1.0))
        total = total + used[name] * mse

    report = LossReport(
        interior=float(interior.value),
        constraints={name: float(terms[name].value) for name in used},
        weights=used,
        causal_min=float(w.min()),
        causal_mean=float(w.mean()),
        total=float(total.value),
    )
    return LossTerms(total, terms, report)


def balance_weights(interior_norm: float, boundary_norms: Mapping[str, float],
                    current: Mapping[str, float], cfg: Optional[BalanceConfig] = None) -> Dict[str, float]:
    """lambda_b <- EMA of ||grad L_int|| / ||grad L_b||, clipped; zero norms leave lambda_b as is."""
    cfg = cfg or BalanceConfig()
    updated = dict(current)
    for name, norm in boundary_norms.items():
        if norm == 0.0 or not np.isfinite(norm):
            continue
        ratio = interior_norm / norm
        old = current.get(name, cfg.initial)
        updated[name] = float(np.clip(cfg.alpha * old + (1.0 - cfg.alpha) * ratio, cfg.min_weight, cfg.max_weight))
    return updated


def _term_norms(model: PigModel, tape: Tape, terms: Mapping[str, Var]) -> Dict[str, float]:
    return {name: float(np.linalg.norm(model.mask_grad(backward(tape, term)))) for name, term in terms.items()}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainRecord:
    iteration: int
    phase: int
    report: LossReport
    rel_l2: Optional[float]
    epsilon: float
    coeffs: Dict[str, float]
    elapsed: float


@dataclass
class TrainState:
    model: PigModel
    weights: Dict[str, float]
    epsilon: float
    iteration: int = 0
    phase: int = 0
    low_weight_streak: int = 0
    adam: Optional[AdamState] = None
    lbfgs: Optional[LbfgsState] = None
    history: List[TrainRecord] = field(default_factory=list)
    last_good: Optional[np.ndarray] = None

    @property
    def best_rel_l2(self) -> Optional[float]:
        values = [r.rel_l2 for r in self.history if r.rel_l2 is not None]
        return min(values) if values else None

    @property
    def final_rel_l2(self) -> Optional[float]:
        return self.history[-1].rel_l2 if self.history else None


RecordHook = Callable[[TrainRecord], None]
SnapshotHook = Callable[[int, PigModel], None]


class Trainer:
    """Runs the configured phases over one model/problem pair."""

    def __init__(self, model: PigModel, problem: PdeProblem, config: RunConfig,
                 reference: Optional[ReferenceField] = None,
                 on_record: Optional[RecordHook] = None, on_snapshot: Optional[SnapshotHook] = None):
        self.problem = problem
        self.config = config
        self.reference = reference
        self.eval_points = reference.points() if reference is not None else None
        self.on_record = on_record
        self.on_snapshot = on_snapshot
        self.sizes = BatchSizes(config.sampler.interior, config.sampler.boundary,
                                config.sampler.initial, config.sampler.data)
        weights = {c.name: config.balance.initial for c in problem.constraints}
        self.state = TrainState(model=model, weights=weights, epsilon=config.causal.epsilon,
                                last_good=model.params.data.copy())
        self.started = time.perf_counter()
        # fixed batch of the running L-BFGS phase, None under Adam
        self.phase_batch: Optional[CollocationBatch] = None

    @property
    def model(self) -> PigModel:
        return self.state.model

    def causal(self) -> Optional[CausalSettings]:
        if not self.config.causal.enabled or self.problem.time_axis is None:
            return None
        return CausalSettings(self.config.causal.bins, self.state.epsilon)

    def batch(self, iteration: int) -> CollocationBatch:
        it = iteration if self.config.sampler.resample else 0
        return sample_batch(self.problem, self.sizes, self.config.run.seed, it, SAMPLE_STREAM)

    # evaluation

    def evaluate(self) -> Optional[float]:
        if self.reference is None:
            return None
        pred = self.model.predict_values(self.eval_points, self.config.eval.chunk_size)
        return rel_l2(pred, self.reference)

    def record(self) -> TrainRecord:
        state = self.state
        batch = self.phase_batch if self.phase_batch is not None else self.batch(state.iteration)
        terms = assemble_loss(self.model, self.problem, batch, state.weights, self.causal())
        rec = TrainRecord(
            iteration=state.iteration, phase=state.phase, report=terms.report, rel_l2=self.evaluate(),
            epsilon=state.epsilon, coeffs={name: self.model.coeff(name) for name in self.model.coeff_names},
            elapsed=time.perf_counter() - self.started,
        )
        state.history.append(rec)
        logger.info("iteration %d: loss %.4e, rel. L2 %s", rec.iteration, rec.report.total,
                    "n/a" if rec.rel_l2 is None else f"{rec.rel_l2:.4e}")
        if self.on_record is not None:
            self.on_record(rec)
        return rec

    # steps

    def _diverged(self, loss: float) -> bool:
        return not np.isfinite(loss) or loss > self.config.trainer.divergence

    def _anneal(self, causal_min: float) -> None:
        cfg = self.config.causal
        if self.causal() is None:
            return
        state = self.state
        state.low_weight_streak = state.low_weight_streak + 1 if causal_min < cfg.threshold else 0
        if state.low_weight_streak >= cfg.patience and state.epsilon > cfg.min_epsilon:
            state.epsilon = max(state.epsilon * 0.5, cfg.min_epsilon)
            state.low_weight_streak = 0
            logger.info("causal epsilon annealed to %.4g at iteration %d", state.epsilon, state.iteration)

    def adam_iteration(self, phase: PhaseConfig, step: int) -> None:
        state, model = self.state, self.model
        tape = Tape()
        try:
            terms = assemble_loss(model, self.problem, self.batch(state.iteration), state.weights,
                                  self.causal(), model.bind(tape))
        except NumericOverflowError:
            raise TrainingDivergedError(state.iteration, float("nan"), state.last_good) from None
        loss = terms.report.total
        if self._diverged(loss):
            raise TrainingDivergedError(state.iteration, loss, state.last_good)
        grad = model.mask_grad(backward(tape, terms.loss))
        if self.config.balance.enabled and state.iteration % self.config.balance.every == 0:
            norms = _term_norms(model, tape, terms.terms)
            interior = norms.pop("interior")
            state.weights = balance_weights(interior, norms, state.weights, self.config.balance)
            logger.debug("loss weights at iteration %d: %s", state.iteration, state.weights)
        state.last_good = model.params.data.copy()
        lr = exponential_decay(phase.lr, step, phase.decay_rate, phase.decay_steps)
        model.set_params(adam_step(state.adam, model.params.data, grad, lr))
        self._anneal(terms.report.causal_min)

    def lbfgs_closure(self, batch: CollocationBatch):
        model, state = self.model, self.state
        causal = self.causal()

        def closure(p: np.ndarray):
            saved = model.params.data.copy()
            model.set_params(p)
            try:
                tape = Tape()
                terms = assemble_loss(model, self.problem, batch, state.weights, causal, model.bind(tape))
                return terms.report.total, model.mask_grad(backward(tape, terms.loss))
            except NumericOverflowError:
                return float("inf"), np.zeros_like(p)
            finally:
                model.set_params(saved)

        return closure

    def lbfgs_iteration(self, closure) -> None:
        state, model = self.state, self.model
        state.last_good = model.params.data.copy()
        new = lbfgs_step(state.lbfgs, model.params.data, closure, self.config.trainer.lbfgs_fallback_lr)
        if self._diverged(state.lbfgs.loss):
            raise TrainingDivergedError(state.iteration, state.lbfgs.loss, state.last_good)
        model.set_params(new)

    # phases

    def start_phase(self, index: int, phase: PhaseConfig) -> None:
        state = self.state
        state.phase = index
        if phase.densify and self.model.cloud.covariance == "diagonal":
            state.model = self.model.densified()
            state.last_good = self.model.params.data.copy()
            logger.info("switched to dense covariances before phase %d", index)
        size = len(self.model.params)
        if phase.optimizer == "adam":
            if state.adam is None or state.adam.m.size != size:
                state.adam = AdamState.zeros(size)
        else:
            state.lbfgs = LbfgsState(history=phase.history)
        logger.info("phase %d: %s for %d iterations", index, phase.optimizer, phase.iterations)

    def run(self) -> TrainState:
        state = self.state
        ev = self.config.eval
        self.record()
        for index, phase in enumerate(self.config.phase):
            self.start_phase(index, phase)
            closure = None
            self.phase_batch = None
            if phase.optimizer == "lbfgs":
                # full-batch deterministic loss for the line search
                self.phase_batch = self.batch(state.iteration)
                closure = self.lbfgs_closure(self.phase_batch)
            for step in range(phase.iterations):
                if closure is None:
                    self.adam_iteration(phase, step)
                else:
                    self.lbfgs_iteration(closure)
                state.iteration += 1
                if state.iteration % ev.every == 0:
                    self.record()
                if ev.snapshot_every and state.iteration % ev.snapshot_every == 0 and self.on_snapshot:
                    self.on_snapshot(state.iteration, self.model)
            logger.info("phase %d finished at iteration %d", index, state.iteration)
        if state.history[-1].iteration != state.iteration:
            self.record()
        return state


def train(model: PigModel, problem: PdeProblem, config: RunConfig,
          reference: Optional[ReferenceField] = None,
          on_record: Optional[RecordHook] = None, on_snapshot: Optional[SnapshotHook] = None) -> TrainState:
    return Trainer(model, problem, config, reference, on_record, on_snapshot).run()
