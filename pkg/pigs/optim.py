"""
First- and quasi-second-order optimizers over flat parameter arrays.
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Optional, Tuple

import numpy as np

from pigs.errors import ContractViolationError

logger = logging.getLogger(__name__)

# f(p) -> (loss, gradient)
Closure = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def exponential_decay(lr: float, step: int, rate: float = 0.9, steps: int = 2000) -> float:
    """lr * rate ** (step / steps); continuous, not staircase."""
    if steps <= 0:
        return lr
    return lr * rate ** (step / steps)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size))


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """Bias-corrected Adam update; moments are updated in place, new params returned."""
    if params.shape != grad.shape or state.m.shape != grad.shape:
        raise ContractViolationError("Adam state, parameters and gradient must share one layout")
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# L-BFGS
# ---------------------------------------------------------------------------

@dataclass
class LbfgsState:
    history: int = 50
    s: Deque[np.ndarray] = field(default_factory=deque)
    y: Deque[np.ndarray] = field(default_factory=deque)
    loss: Optional[float] = None
    grad: Optional[np.ndarray] = None
    iteration: int = 0
    fallbacks: int = 0

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        """Store a curvature pair; pairs with s^T y <= 0 are discarded."""
        if float(s @ y) <= 0.0:
            return False
        self.s.append(s)
        self.y.append(y)
        while len(self.s) > self.history:
            self.s.popleft()
            self.y.popleft()
        return True


def two_loop(state: LbfgsState, grad: np.ndarray) -> np.ndarray:
    """Search direction -H g from the stored curvature pairs."""
    q = grad.copy()
    alphas = []
    for s, y in zip(reversed(state.s), reversed(state.y)):
        rho = 1.0 / float(y @ s)
        alpha = rho * float(s @ q)
        q -= alpha * y
        alphas.append((rho, alpha))
    if state.s:
        s, y = state.s[-1], state.y[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y), (rho, alpha) in zip(zip(state.s, state.y), reversed(alphas)):
        beta = rho * float(y @ q)
        q += (alpha - beta) * s
    return -q


def _cubic_min(a: float, fa: float, ga: float, b: float, fb: float, gb: float) -> float:
    """Minimizer of the cubic interpolating (a, fa, ga) and (b, fb, gb), clamped into [a, b]."""
    lo, hi = min(a, b), max(a, b)
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0.0:
        return 0.5 * (lo + hi)
    d2 = np.sign(b - a) * np.sqrt(disc)
    t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2)
    if not np.isfinite(t):
        return 0.5 * (lo + hi)
    # stay away from the bracket ends
    margin = 0.1 * (hi - lo)
    return float(min(max(t, lo + margin), hi - margin))


def strong_wolfe(closure: Closure, x: np.ndarray, f0: float, g0: np.ndarray, d: np.ndarray,
                 step: float = 1.0, c1: float = 1e-4, c2: float = 0.9,
                 max_iter: int = 25) -> Optional[Tuple[float, float, np.ndarray]]:
    """Bracketing + zoom line search; returns (step, f, g) or None on failure."""
    dg0 = float(g0 @ d)
    if dg0 >= 0.0:
        return None
    prev_step, prev_f, prev_dg = 0.0, f0, dg0
    evals = 0

    def zoom(lo, f_lo, dg_lo, hi, f_hi, dg_hi):
        nonlocal evals
        while evals < max_iter:
            trial = _cubic_min(lo, f_lo, dg_lo, hi, f_hi, dg_hi)
            f, g = closure(x + trial * d)
            evals += 1
            dg = float(g @ d)
            if not np.isfinite(f) or f > f0 + c1 * trial * dg0 or f >= f_lo:
                hi, f_hi, dg_hi = trial, f, dg
            else:
                if abs(dg) <= -c2 * dg0:
                    return trial, f, g
                if dg * (hi - lo) >= 0.0:
                    hi, f_hi, dg_hi = lo, f_lo, dg_lo
                lo, f_lo, dg_lo = trial, f, dg
            if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
                break
        return None

    while evals < max_iter:
        f, g = closure(x + step * d)
        evals += 1
        dg = float(g @ d) if np.isfinite(f) else np.inf
        if not np.isfinite(f) or f > f0 + c1 * step * dg0 or (evals > 1 and f >= prev_f):
            if not np.isfinite(f):
                step = 0.5 * (prev_step + step)
                continue
            return zoom(prev_step, prev_f, prev_dg, step, f, dg)
        if abs(dg) <= -c2 * dg0:
            return step, f, g
        if dg >= 0.0:
            return zoom(step, f, dg, prev_step, prev_f, prev_dg)
        prev_step, prev_f, prev_dg = step, f, dg
        step *= 2.0
    return None


def lbfgs_step(state: LbfgsState, params: np.ndarray, closure: Closure,
               fallback_lr: float = 1e-3) -> np.ndarray:
    """One L-BFGS iteration with a strong-Wolfe line search.

    The closure must be deterministic (fixed batch). If the line search fails,
    a plain gradient step of size ``fallback_lr`` is taken and logged.
    """
    if state.grad is None:
        state.loss, state.grad = closure(params)
    grad = state.grad
    direction = two_loop(state, grad)
    if state.s:
        step = 1.0
    else:
        # steepest descent with a unit-length first trial
        step = min(1.0, 1.0 / max(float(np.abs(grad).sum()), 1e-300))
    result = strong_wolfe(closure, params, state.loss, grad, direction, step=step)
    state.iteration += 1
    if result is None:
        state.fallbacks += 1
        logger.warning("L-BFGS line search failed at iteration %d; taking a gradient step", state.iteration)
        new_params = params - fallback_lr * grad
        new_loss, new_grad = closure(new_params)
    else:
        step, new_loss, new_grad = result
        new_params = params + step * direction
    state.push(new_params - params, new_grad - grad)
    state.loss, state.grad = new_loss, new_grad
    return new_params
