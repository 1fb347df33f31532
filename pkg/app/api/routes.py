import logging
import shutil
import uuid
from pathlib import Path
from typing import Dict, List, Optional

from fastapi import APIRouter, BackgroundTasks, HTTPException
from fastapi.responses import FileResponse
from pydantic import BaseModel, Field

from app.config import COVARIATES, DATA_DIR, OUTPUT_DIR, load_config
from app.errors import EXIT_NUMERICAL, SocialDiffError
from app.io.bundle import load_bundle, write_bundle
from app.pipeline import MANIFEST, run_all
from app.simulation.simulator import ScenarioSpec, simulate

logger = logging.getLogger(__name__)

router = APIRouter()

# In-memory job registry (a single-process service; no persistence)
job_status: Dict[str, dict] = {}


class SimulateRequest(BaseModel):
    seed: int = 0
    n_categories: int = Field(10, ge=1)
    n_days: int = Field(200, ge=14)
    n_weeks: int = Field(20, ge=1)
    n_customers: int = Field(400, ge=1)
    social_source: str = "local-adopters"
    obs_noise: float = Field(0.01, ge=0)


class SimulateResponse(BaseModel):
    data_dir: str
    files: List[str]


class RunRequest(BaseModel):
    data_dir: Optional[str] = None
    seed: Optional[int] = None
    overrides: List[str] = Field(default_factory=list)


class RunResponse(BaseModel):
    job_id: str
    status: str


def _http_error(error: SocialDiffError) -> HTTPException:
    status = 422 if error.exit_code == EXIT_NUMERICAL else 400
    return HTTPException(status_code=status, detail=str(error))


@router.post("/simulate", response_model=SimulateResponse)
async def simulate_bundle(request: SimulateRequest):
    """Write a synthetic bundle into the data directory."""
    if request.social_source not in COVARIATES:
        raise HTTPException(status_code=400, detail=f"unknown social source {request.social_source!r}")
    try:
        spec = ScenarioSpec.default(
            n_categories=request.n_categories,
            n_days=request.n_days,
            n_weeks=request.n_weeks,
            n_customers=request.n_customers,
            social_source=request.social_source,
            obs_noise=request.obs_noise,
            seed=request.seed,
        )
        paths = write_bundle(simulate(spec).bundle, DATA_DIR)
    except SocialDiffError as e:
        raise _http_error(e)
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return SimulateResponse(data_dir=str(DATA_DIR), files=[p.name for p in paths])


def process_run(job_id: str, data_dir: Path, seed: Optional[int], overrides: List[str]):
    """Background task running the full pipeline."""
    job_status[job_id] = {"status": "processing"}
    try:
        config = load_config(overrides=overrides, seed=seed)
        bundle = load_bundle(data_dir, monotonize=config.monotonize_inputs)
        run = run_all(bundle, config, OUTPUT_DIR / job_id)
        job_status[job_id] = {
            "status": "completed",
            "selected": run.selected,
            "comparison": run.comparison,
            "artifacts": sorted(run.artifacts),
        }
    except SocialDiffError as e:
        logger.error("job %s failed: %s", job_id, e)
        job_status[job_id] = {"status": "failed", "error": str(e), "exit_code": e.exit_code}
    except Exception as e:
        logger.exception("job %s crashed", job_id)
        job_status[job_id] = {"status": "failed", "error": str(e), "exit_code": None}


@router.post("/run-all", response_model=RunResponse)
async def run_pipeline(request: RunRequest, background_tasks: BackgroundTasks):
    """Start a pipeline run in the background."""
    data_dir = Path(request.data_dir) if request.data_dir else DATA_DIR
    if not data_dir.is_dir():
        raise HTTPException(status_code=404, detail=f"data directory not found: {data_dir}")

    job_id = f"run_{uuid.uuid4().hex[:8]}"
    job_status[job_id] = {"status": "queued"}
    background_tasks.add_task(process_run, job_id, data_dir, request.seed, request.overrides)
    return RunResponse(job_id=job_id, status="queued")


@router.get("/status/{job_id}")
async def get_job_status(job_id: str):
    """Check the status of a pipeline run."""
    if job_id not in job_status:
        raise HTTPException(status_code=404, detail="Job not found")
    return {"job_id": job_id, **job_status[job_id]}


@router.get("/results")
async def get_results():
    """List report files of every finished run."""
    results = []
    for manifest in sorted(OUTPUT_DIR.glob(f"*/{MANIFEST}")):
        for f in sorted(manifest.parent.glob("*.*")):
            results.append({"run": manifest.parent.name, "filename": f.name, "size": f.stat().st_size})
    return {"count": len(results), "files": results}


@router.get("/reports/{run_id}/{name}")
async def get_report(run_id: str, name: str):
    """Serve one report file."""
    path = (OUTPUT_DIR / run_id / name).resolve()
    if OUTPUT_DIR.resolve() not in path.parents or not path.is_file():
        raise HTTPException(status_code=404, detail="Report not found")
    media_type = "application/json" if path.suffix == ".json" else "text/csv"
    return FileResponse(path=str(path), media_type=media_type, filename=name)


@router.delete("/clear")
async def clear_data():
    """Remove every run directory and forget all jobs."""
    if OUTPUT_DIR.exists():
        for entry in OUTPUT_DIR.iterdir():
            if entry.is_dir():
                shutil.rmtree(entry)
            else:
                entry.unlink()
    job_status.clear()
    return {"status": "cleared"}
