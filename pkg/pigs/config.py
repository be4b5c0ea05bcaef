"""
Run configuration.

Configs are flat text files, one ``section.key = value`` per line, with
integer segments for list sections (``phase.0.optimizer = adam``). The
parsed tree is validated by pydantic models; unknown keys are rejected.
"""
import ast
import hashlib
import os
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from pigs.errors import ConfigurationError

load_dotenv()

PRESET_PACKAGE = "pigs.presets"


def output_root() -> Path:
    return Path(os.getenv("PIGS_OUTPUT_DIR", "runs"))


def database_url() -> Optional[str]:
    return os.getenv("PIGS_DATABASE_URL") or None


def log_level() -> str:
    return os.getenv("PIGS_LOG_LEVEL", "INFO").upper()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RunSection(_Section):
    """Problem selection and the master seed."""
    problem: str = "helmholtz"
    seed: int = Field(0, ge=0)


class ModelConfig(_Section):
    """Cloud/network shape. Unset fields fall back to the problem's recipe."""
    recipe: Optional[str] = None
    n_gaussians: Optional[int] = Field(None, ge=1)
    feature_dim: Optional[int] = Field(None, ge=1)
    hidden: int = Field(16, ge=1)
    covariance: Literal["diagonal", "dense"] = "diagonal"
    per_feature: bool = False
    learn_mu: bool = True
    use_mlp: bool = True
    sigma_init: Optional[float] = Field(None, gt=0)
    feat_init: Optional[Literal["uniform", "normal"]] = None
    feat_scale: Optional[float] = Field(None, gt=0)
    cutoff: Optional[float] = Field(None, gt=0)


class SamplerConfig(_Section):
    interior: int = Field(10_000, ge=1)
    boundary: int = Field(256, ge=1)
    initial: int = Field(512, ge=1)
    data: int = Field(1024, ge=1)
    resample: bool = True


class PhaseConfig(_Section):
    """One optimizer phase; ``densify`` switches to dense covariances before it starts."""
    optimizer: Literal["adam", "lbfgs"] = "adam"
    iterations: int = Field(1000, ge=0)
    lr: float = Field(1e-3, gt=0)
    decay_rate: float = Field(0.9, gt=0, le=1)
    decay_steps: int = Field(2000, ge=0)
    densify: bool = False
    history: int = Field(50, ge=1)


class CausalConfig(_Section):
    enabled: bool = False
    bins: int = Field(32, ge=1)
    epsilon: float = Field(1.0, gt=0)
    threshold: float = Field(0.99, gt=0, le=1)
    patience: int = Field(1000, ge=1)
    min_epsilon: float = Field(1e-3, gt=0)


class BalanceConfig(_Section):
    enabled: bool = False
    every: int = Field(100, ge=1)
    alpha: float = Field(0.9, ge=0, lt=1)
    min_weight: float = Field(1e-2, gt=0)
    max_weight: float = Field(1e4, gt=0)
    initial: float = Field(1.0, gt=0)


class TrainerConfig(_Section):
    divergence: float = Field(1e6, gt=0)
    lbfgs_fallback_lr: float = Field(1e-3, gt=0)


class EvalConfig(_Section):
    every: int = Field(100, ge=1)
    resolution: int = Field(64, ge=2)
    chunk_size: int = Field(4096, ge=1)
    snapshot_every: int = Field(1000, ge=0)
    reference_nx: Optional[int] = Field(None, ge=5)
    reference_nt: Optional[int] = Field(None, ge=2)
    reference_file: Optional[str] = None


class OutputConfig(_Section):
    dir: Optional[str] = None
    checkpoint: bool = True
    stats: bool = True


class RunConfig(_Section):
    run: RunSection = Field(default_factory=RunSection)
    problem: Dict[str, float] = Field(default_factory=dict)
    model: ModelConfig = Field(default_factory=ModelConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    phase: List[PhaseConfig] = Field(default_factory=lambda: [PhaseConfig()])
    causal: CausalConfig = Field(default_factory=CausalConfig)
    balance: BalanceConfig = Field(default_factory=BalanceConfig)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @property
    def total_iterations(self) -> int:
        return sum(p.iterations for p in self.phase)


# ---------------------------------------------------------------------------
# Flat text format
# ---------------------------------------------------------------------------

def _parse_value(raw: str) -> Any:
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def _insert(tree: Dict[str, Any], parts: List[str], value: Any, key: str) -> None:
    node: Any = tree
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(node, list):
            if not part.isdigit():
                raise ConfigurationError(f"{key}: expected a list index, got '{part}'")
            index = int(part)
            while len(node) <= index:
                node.append({})
            if last:
                node[index] = value
            else:
                node = node[index]
            continue
        if last:
            if part in node:
                raise ConfigurationError(f"{key}: duplicate key")
            node[part] = value
            continue
        nxt = parts[i + 1]
        if part not in node:
            node[part] = [] if nxt.isdigit() else {}
        node = node[part]
        if not isinstance(node, (dict, list)):
            raise ConfigurationError(f"{key}: '{part}' is a value, not a section")


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    tree: Dict[str, Any] = {}
    lines: Dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{number}: expected 'section.key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        parts = key.split(".")
        if len(parts) < 2 or not all(parts):
            raise ConfigurationError(f"{source}:{number}: {key}: keys must be of the form section.key")
        try:
            _insert(tree, parts, _parse_value(value), key)
        except ConfigurationError as exc:
            raise ConfigurationError(f"{source}:{number}: {exc}") from None
        lines[key] = number
    return validate_tree(tree, lines, source)


def _line_for(loc: Tuple, lines: Dict[str, int]) -> int:
    parts = [str(p) for p in loc]
    while parts:
        key = ".".join(parts)
        if key in lines:
            return lines[key]
        # a whole section failed; point at its first key
        matches = [n for k, n in lines.items() if k.startswith(key + ".")]
        if matches:
            return min(matches)
        parts.pop()
    return 0


def validate_tree(tree: Dict[str, Any], lines: Optional[Dict[str, int]] = None,
                  source: str = "<config>") -> RunConfig:
    lines = lines or {}
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as exc:
        messages = []
        for err in exc.errors():
            key = ".".join(str(p) for p in err["loc"])
            messages.append(f"{source}:{_line_for(err['loc'], lines)}: {key}: {err['msg']}")
        raise ConfigurationError("\n".join(messages)) from None


def load_config(path: Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


def _format_value(value: Any) -> str:
    if isinstance(value, str):
        return value
    return repr(value)


def _flatten(prefix: str, value: Any, out: List[str]) -> None:
    if isinstance(value, dict):
        for key in sorted(value):
            _flatten(f"{prefix}.{key}" if prefix else key, value[key], out)
    elif isinstance(value, list) and value and all(isinstance(v, dict) for v in value):
        for i, item in enumerate(value):
            _flatten(f"{prefix}.{i}", item, out)
    elif value is not None:
        out.append(f"{prefix} = {_format_value(value)}")


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text: every field, sorted keys, unset optionals omitted."""
    out: List[str] = []
    _flatten("", cfg.model_dump(mode="python"), out)
    return "\n".join(out) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()


def apply_overrides(cfg: RunConfig, overrides: Iterable[str]) -> RunConfig:
    """Re-parse the canonical text with ``key=value`` assignments replaced or added."""
    overrides = list(overrides)
    if not overrides:
        return cfg
    assigned: Dict[str, str] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override '{item}' must be KEY=VALUE")
        key, value = (part.strip() for part in item.split("=", 1))
        assigned[key] = value
    kept = [line for line in serialize_config(cfg).splitlines()
            if line.split("=", 1)[0].strip() not in assigned]
    # a bare list override replaces every element key below it
    kept = [line for line in kept
            if not any(line.startswith(k + ".") for k in assigned)]
    kept += [f"{k} = {v}" for k, v in assigned.items()]
    return parse_config_text("\n".join(kept), "<overrides>")


def list_presets() -> List[str]:
    root = resources.files(PRESET_PACKAGE)
    return sorted(p.name[:-len(".cfg")] for p in root.iterdir() if p.name.endswith(".cfg"))


def load_preset(name: str) -> RunConfig:
    path = resources.files(PRESET_PACKAGE) / f"{name}.cfg"
    if not path.is_file():
        raise ConfigurationError(f"unknown preset '{name}'; known: {list_presets()}")
    return parse_config_text(path.read_text(), f"preset:{name}")
