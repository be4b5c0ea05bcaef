"""
Read-only HTTP view of problems, presets and recorded runs.
"""
from typing import List

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware

from pigs import __version__
from pigs.config import list_presets
from pigs.pde_zoo import PROBLEMS, get_problem
from pigs.registry import get_registry
from pigs.schemas import ProblemInfo, RunInfo, RunSummary


def problem_info(name: str) -> ProblemInfo:
    if name == "allen_cahn_inverse":
        # needs observations to build; describe the forward problem plus the data term
        base = get_problem("allen_cahn")
        constraints = [c.name for c in base.constraints] + ["data"]
        coefficients = {k: v for k, v in base.coeffs.items() if k != "reaction"}
    else:
        base = get_problem(name)
        constraints = [c.name for c in base.constraints]
        coefficients = dict(base.coeffs)
    return ProblemInfo(
        name=name, dimension=base.d, lo=list(base.lo), hi=list(base.hi),
        time_dependent=base.time_axis is not None, has_exact=base.has_exact,
        constraints=constraints, coefficients=coefficients,
    )


def create_app(registry=None) -> FastAPI:
    registry = registry if registry is not None else get_registry()
    app = FastAPI(
        title="PIGS results",
        description="Physics-informed Gaussian solver: problems, presets and recorded runs",
        version=__version__,
    )
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["GET"],
        allow_headers=["*"],
    )

    @app.get("/")
    async def root():
        """Service description."""
        return {
            "message": "Physics-informed Gaussian solver results API",
            "version": __version__,
            "endpoints": {
                "problems": "GET /problems",
                "presets": "GET /presets",
                "list_runs": "GET /runs",
                "run": "GET /runs/{run_id}",
            },
        }

    @app.get("/problems", response_model=List[ProblemInfo])
    async def problems():
        return [problem_info(name) for name in sorted(PROBLEMS)]

    @app.get("/presets", response_model=List[str])
    async def presets():
        return list_presets()

    @app.get("/runs", response_model=List[RunInfo])
    async def list_runs():
        return registry.list_runs()

    @app.get("/runs/{run_id}", response_model=RunSummary)
    async def get_run(run_id: str):
        summary = registry.get_run(run_id)
        if summary is None:
            raise HTTPException(status_code=404, detail="Run not found")
        return summary

    return app
