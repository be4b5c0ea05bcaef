"""
Versioned binary checkpoints.

Layout: magic, uint32 version, uint64 header length, sorted-keys JSON
header, float64 little-endian parameters, then the Adam moments (m, v)
when present. Writing the same state twice gives identical bytes.
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from pigs.autodiff import Layout
from pigs.embedding import GaussianCloud
from pigs.errors import CheckpointError, CheckpointVersionError, ConfigurationError, CorruptCheckpointError
from pigs.model import PigModel, Rescale
from pigs.net import RefineNet
from pigs.optim import AdamState

MAGIC = b"PIGCKPT\0"
FORMAT_VERSION = 1
_VERSION = struct.Struct("<I")
_LENGTH = struct.Struct("<Q")


@dataclass
class Checkpoint:
    model: PigModel
    problem: str
    iteration: int = 0
    seed: int = 0
    weights: Dict[str, float] = field(default_factory=dict)
    epsilon: float = 1.0
    optimizer: str = "adam"
    adam: Optional[AdamState] = None
    problem_args: Dict[str, float] = field(default_factory=dict)


def model_descriptor(model: PigModel) -> Dict[str, Any]:
    cloud, net, rescale = model.cloud, model.net, model.rescale
    return {
        "cloud": {
            "n": cloud.n, "d": cloud.d, "k": cloud.k, "covariance": cloud.covariance,
            "per_feature": cloud.per_feature, "learn_mu": cloud.learn_mu, "cutoff": cloud.cutoff,
        },
        "net": {"hidden": net.hidden, "out_dim": net.out_dim, "activation": net.activation, "bypass": net.bypass},
        "rescale": {"lo_phys": list(rescale.lo_phys), "hi_phys": list(rescale.hi_phys),
                    "lo": list(rescale.lo), "hi": list(rescale.hi)},
    }


def model_from_descriptor(desc: Dict[str, Any], layout: Layout, data: np.ndarray) -> PigModel:
    """Rebuild a model skeleton from the header and load ``data`` into it."""
    c, n_, r = desc["cloud"], desc["net"], desc["rescale"]
    n, d, k = int(c["n"]), int(c["d"]), int(c["k"])
    m = k if c["per_feature"] else 1
    cov_shape = (n, m, d) if c["covariance"] == "diagonal" else (n, m, d * (d + 1) // 2)
    cloud = GaussianCloud(
        n=n, d=d, k=k, mu=np.zeros((n, m, d)), feat=np.zeros((n, k)),
        log_sigma=np.zeros(cov_shape) if c["covariance"] == "diagonal" else None,
        tril=np.zeros(cov_shape) if c["covariance"] == "dense" else None,
        covariance=c["covariance"], per_feature=bool(c["per_feature"]), learn_mu=bool(c["learn_mu"]),
        cutoff=c["cutoff"],
    )
    hidden, out_dim = int(n_["hidden"]), int(n_["out_dim"])
    net = RefineNet(in_dim=k, hidden=hidden, out_dim=out_dim, w1=np.zeros((hidden, k)), b1=np.zeros(hidden),
                    w2=np.zeros((out_dim, hidden)), b2=np.zeros(out_dim), activation=n_["activation"],
                    bypass=bool(n_["bypass"]))
    rescale = Rescale(tuple(r["lo_phys"]), tuple(r["hi_phys"]), tuple(r["lo"]), tuple(r["hi"]))
    coeffs = {name[len("coeff."):]: 0.0 for name in layout.names if name.startswith("coeff.")}
    try:
        model = PigModel(cloud, net, rescale, coeffs)
    except ConfigurationError as exc:
        raise CorruptCheckpointError(f"inconsistent model structure: {exc}") from None
    if model.params.layout != layout:
        raise CorruptCheckpointError("parameter layout does not match the model structure")
    model.set_params(data)
    return model


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    params = ckpt.model.params
    header = {
        "adam_step": ckpt.adam.step if ckpt.adam is not None else None,
        "epsilon": ckpt.epsilon,
        "iteration": ckpt.iteration,
        "layout": params.layout.to_descriptor(),
        "model": model_descriptor(ckpt.model),
        "moments": ckpt.adam is not None,
        "optimizer": ckpt.optimizer,
        "problem": ckpt.problem,
        "problem_args": dict(sorted(ckpt.problem_args.items())),
        # samplers are stateless: (seed, iteration) reproduces the next batch
        "rng": {"seed": ckpt.seed, "iteration": ckpt.iteration},
        "seed": ckpt.seed,
        "weights": dict(sorted(ckpt.weights.items())),
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, _VERSION.pack(FORMAT_VERSION), _LENGTH.pack(len(text)), text,
             params.data.astype("<f8").tobytes()]
    if ckpt.adam is not None:
        parts += [ckpt.adam.m.astype("<f8").tobytes(), ckpt.adam.v.astype("<f8").tobytes()]
    return b"".join(parts)


def checkpoint_from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < len(MAGIC) + _VERSION.size + _LENGTH.size:
        raise CorruptCheckpointError("checkpoint is truncated")
    if raw[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file (bad magic bytes)")
    offset = len(MAGIC)
    (version,) = _VERSION.unpack_from(raw, offset)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(version, FORMAT_VERSION)
    offset += _VERSION.size
    (length,) = _LENGTH.unpack_from(raw, offset)
    offset += _LENGTH.size
    if len(raw) < offset + length:
        raise CorruptCheckpointError("checkpoint header is truncated")
    try:
        header = json.loads(raw[offset:offset + length].decode("utf-8"))
        layout = Layout.from_descriptor(header["layout"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"malformed checkpoint header: {exc}") from None
    offset += length
    arrays = 3 if header.get("moments") else 1
    expected = offset + 8 * layout.size * arrays
    if len(raw) != expected:
        raise CorruptCheckpointError(f"expected {expected} bytes, found {len(raw)}")

    def read(i: int) -> np.ndarray:
        start = offset + 8 * layout.size * i
        return np.frombuffer(raw, dtype="<f8", count=layout.size, offset=start).astype(np.float64)

    model = model_from_descriptor(header["model"], layout, read(0))
    adam = None
    if header.get("moments"):
        adam = AdamState(m=read(1), v=read(2), step=int(header["adam_step"]))
    return Checkpoint(model=model, problem=header["problem"], iteration=int(header["iteration"]),
                      seed=int(header["seed"]), weights=dict(header["weights"]), epsilon=float(header["epsilon"]),
                      optimizer=header["optimizer"], adam=adam,
                      problem_args={k: float(v) for k, v in header.get("problem_args", {}).items()})


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    try:
        Path(path).write_bytes(checkpoint_bytes(ckpt))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from None


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return checkpoint_from_bytes(raw)
