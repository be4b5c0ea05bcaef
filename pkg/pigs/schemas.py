"""
Data models for run summaries and the results API.
"""
from typing import Dict, List, Optional

from pydantic import BaseModel


class RunSummary(BaseModel):
    """Flat summary written to result.json at the end of a run."""
    run_id: str
    problem: str
    seed: int
    config_hash: str
    output_dir: str
    iterations: int
    final_rel_l2: Optional[float] = None
    best_rel_l2: Optional[float] = None
    final_loss: Optional[float] = None
    coeffs: Dict[str, float] = {}
    status: str = "completed"  # 'completed' or 'diverged'
    created_at: str


class RunInfo(BaseModel):
    """Row of the run listing."""
    run_id: str
    problem: str
    seed: int
    final_rel_l2: Optional[float] = None
    status: str
    created_at: str


class ProblemInfo(BaseModel):
    name: str
    dimension: int
    lo: List[float]
    hi: List[float]
    time_dependent: bool
    has_exact: bool
    constraints: List[str]
    coefficients: Dict[str, float]
