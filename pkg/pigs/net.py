"""
Single-hidden-layer tanh network mapping embedded features to the solution.
"""
from dataclasses import dataclass
from typing import Dict, Mapping, Optional

import numpy as np

from pigs.autodiff import Jet2, Var
from pigs.errors import ConfigurationError


@dataclass
class RefineNet:
    """affine -> tanh -> affine; ``bypass`` turns the network into the identity."""
    in_dim: int
    hidden: int
    out_dim: int
    w1: np.ndarray   # (hidden, in_dim)
    b1: np.ndarray   # (hidden,)
    w2: np.ndarray   # (out_dim, hidden)
    b2: np.ndarray   # (out_dim,)
    activation: str = "tanh"
    bypass: bool = False

    def blocks(self) -> Dict[str, np.ndarray]:
        if self.bypass:
            return {}
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def attach(self, views: Mapping[str, np.ndarray]) -> None:
        for name, view in views.items():
            setattr(self, name, view)

    def bind(self) -> Dict[str, Var]:
        return {name: Var(array) for name, array in self.blocks().items()}

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.blocks().values())


def _glorot_normal(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_out, fan_in))


def net_init(k: int, hidden: int, out_dim: int, rng: np.random.Generator, bypass: bool = False) -> RefineNet:
    """Glorot-normal weights, zero biases."""
    if hidden < 1:
        raise ConfigurationError(f"hidden width must be at least 1, got {hidden}")
    if bypass and k != out_dim:
        raise ConfigurationError(f"bypassing the network needs feature dimension {out_dim}, got {k}")
    w1 = _glorot_normal(rng, hidden, k)
    w2 = _glorot_normal(rng, out_dim, hidden)
    return RefineNet(in_dim=k, hidden=hidden, out_dim=out_dim, w1=w1, b1=np.zeros(hidden),
                     w2=w2, b2=np.zeros(out_dim), bypass=bypass)


def net_forward(net: RefineNet, features: Jet2, params: Optional[Mapping[str, Var]] = None) -> Jet2:
    """Map features of shape (B, k) to outputs of shape (B, out_dim)."""
    if features.shape[-1] != net.in_dim:
        raise ConfigurationError(f"expected {net.in_dim} features, got {features.shape[-1]}")
    if net.bypass:
        return features
    p = params if params is not None else net.bind()
    hidden = (features @ p["w1"].T + p["b1"]).tanh()
    return hidden @ p["w2"].T + p["b2"]
