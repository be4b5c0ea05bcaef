"""
Run registry: where completed runs are recorded and looked up.

The default registry scans ``result.json`` files below the output root; when
``PIGS_DATABASE_URL`` is set runs are kept in a SQL table instead.
"""
import json
import logging
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from pigs.config import database_url, output_root
from pigs.database import Run, make_session_factory
from pigs.errors import ConfigurationError
from pigs.schemas import RunInfo, RunSummary

logger = logging.getLogger(__name__)

RESULT_FILE = "result.json"


def _info(summary: RunSummary) -> RunInfo:
    return RunInfo(run_id=summary.run_id, problem=summary.problem, seed=summary.seed,
                   final_rel_l2=summary.final_rel_l2, status=summary.status, created_at=summary.created_at)


def _read_summary(path: Path) -> Optional[RunSummary]:
    try:
        return RunSummary.model_validate(json.loads(path.read_text()))
    except (OSError, ValueError, ValidationError) as exc:
        logger.warning("skipping unreadable run summary %s: %s", path, exc)
        return None


class RunRegistry:
    """Runs found under an output directory."""

    def __init__(self, root: Optional[Path] = None):
        self.root = Path(root) if root is not None else output_root()

    def record(self, summary: RunSummary) -> None:
        """Write the run's result.json unless it already holds this summary."""
        if not summary.output_dir:
            raise ConfigurationError(f"run {summary.run_id} has no output directory")
        directory = Path(summary.output_dir)
        path = directory / RESULT_FILE
        if path.is_file() and _read_summary(path) == summary:
            return
        directory.mkdir(parents=True, exist_ok=True)
        path.write_text(summary.model_dump_json(indent=2))
        if directory.resolve().parent != self.root.resolve():
            logger.warning("run %s is stored outside %s and will not be listed", summary.run_id, self.root)

    def _summaries(self) -> List[RunSummary]:
        if not self.root.is_dir():
            return []
        found = [_read_summary(path) for path in sorted(self.root.glob(f"*/{RESULT_FILE}"))]
        return [s for s in found if s is not None]

    def list_runs(self) -> List[RunInfo]:
        return sorted((_info(s) for s in self._summaries()), key=lambda r: (r.created_at, r.run_id))

    def get_run(self, run_id: str) -> Optional[RunSummary]:
        for summary in self._summaries():
            if summary.run_id == run_id:
                return summary
        return None


class RunRegistryDB:
    """Runs stored in a SQL database."""

    def __init__(self, url: str):
        self.session_factory = make_session_factory(url)

    def record(self, summary: RunSummary) -> None:
        with self.session_factory() as db:
            db.merge(Run(**summary.model_dump()))
            db.commit()

    def list_runs(self) -> List[RunInfo]:
        with self.session_factory() as db:
            rows = db.query(Run).order_by(Run.created_at, Run.run_id).all()
            return [RunInfo(run_id=r.run_id, problem=r.problem, seed=r.seed, final_rel_l2=r.final_rel_l2,
                            status=r.status, created_at=r.created_at) for r in rows]

    def get_run(self, run_id: str) -> Optional[RunSummary]:
        with self.session_factory() as db:
            row = db.query(Run).filter(Run.run_id == run_id).first()
            if row is None:
                return None
            return RunSummary(
                run_id=row.run_id, problem=row.problem, seed=row.seed, config_hash=row.config_hash,
                output_dir=row.output_dir, iterations=row.iterations, final_rel_l2=row.final_rel_l2,
                best_rel_l2=row.best_rel_l2, final_loss=row.final_loss, coeffs=row.coeffs or {},
                status=row.status, created_at=row.created_at,
            )


def get_registry(root: Optional[Path] = None):
    """Database-backed registry when configured, otherwise the directory scan."""
    url = database_url()
    if url:
        try:
            return RunRegistryDB(url)
        except Exception as exc:
            logger.warning("run database unavailable (%s); falling back to %s", exc, root or output_root())
    return RunRegistry(root)
