from fastapi import FastAPI, HTTPException, status
from fastapi.middleware.cors import CORSMiddleware
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional
import logging
import os

import uvicorn
from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

import terrain
from models import EvalReport, MetricsRecord, TerrainKind, TerrainSpec
from trainer import LATEST_FILE, METRICS_FILE, load_metrics

load_dotenv()
logger = logging.getLogger(__name__)

# Initialize FastAPI app
app = FastAPI(
    title="Fall Recovery Results API",
    description="Read-only access to training runs, learning curves, evaluation reports and terrain previews",
    version="1.0.0",
    docs_url="/docs",
    redoc_url="/redoc",
)

# Add CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


class RunSummary(BaseModel):
    run_id: str
    mode: Optional[str] = None
    iterations: int
    config_hash: Optional[str] = None
    latest_checkpoint: Optional[str] = None


class CurvePoint(BaseModel):
    iteration: int
    mean: float
    std: float


class CurvesResponse(BaseModel):
    run_id: str
    mode: str
    total_reward: List[CurvePoint]
    target_posture_reward: List[CurvePoint]


class TerrainPreview(BaseModel):
    kind: TerrainKind
    difficulty: float
    seed: int
    rows: int
    columns: int
    cell_size: float
    min_height: float
    max_height: float
    features: Dict[str, List[float]]


def run_root() -> Path:
    return Path(os.getenv("AFR_RUN_ROOT", "runs"))


def _run_dir(run_id: str) -> Path:
    root = run_root().resolve()
    path = (root / run_id).resolve()
    if path.parent != root or not path.is_dir():
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=f"Run {run_id} not found")
    return path


def _metrics(run_id: str) -> List[MetricsRecord]:
    path = _run_dir(run_id)
    try:
        return load_metrics(str(path))
    except FileNotFoundError:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=f"Run {run_id} has no metrics")


@app.get("/")
def read_root():
    """Root endpoint with API information"""
    return {
        "service": "Fall Recovery Results API",
        "version": "1.0.0",
        "status": "running",
        "endpoints": {
            "runs": "/api/v1/runs",
            "metrics": "/api/v1/runs/{run_id}/metrics",
            "curves": "/api/v1/runs/{run_id}/curves",
            "report": "/api/v1/runs/{run_id}/report",
            "terrain_preview": "/api/v1/terrain/preview",
            "docs": "/docs",
        },
    }


@app.get("/health")
def health_check():
    """Health check endpoint"""
    return {"status": "healthy", "timestamp": datetime.now(timezone.utc).isoformat()}


@app.get("/api/v1/runs", response_model=List[RunSummary])
async def list_runs():
    """List run directories under the run root"""
    root = run_root()
    if not root.is_dir():
        return []

    runs = []
    for path in sorted(p for p in root.iterdir() if p.is_dir()):
        records = []
        if (path / METRICS_FILE).is_file():
            try:
                records = load_metrics(str(path))
            except (ValueError, ValidationError):
                logger.warning("Skipping unreadable metrics in %s", path)
        latest = path / LATEST_FILE
        runs.append(
            RunSummary(
                run_id=path.name,
                mode=records[-1].mode.value if records else None,
                iterations=len(records),
                config_hash=records[-1].config_hash if records else None,
                latest_checkpoint=latest.read_text().strip() if latest.is_file() else None,
            )
        )
    return runs


@app.get("/api/v1/runs/{run_id}/metrics", response_model=List[MetricsRecord])
async def get_metrics(run_id: str):
    """All metrics records of a run, in iteration order"""
    return _metrics(run_id)


@app.get("/api/v1/runs/{run_id}/curves", response_model=CurvesResponse)
async def get_curves(run_id: str):
    """Total reward and target posture reward per iteration (mean and std across envs)"""
    records = _metrics(run_id)
    if not records:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=f"Run {run_id} has no metrics")
    return CurvesResponse(
        run_id=run_id,
        mode=records[0].mode.label,
        total_reward=[CurvePoint(iteration=r.iteration, mean=r.total_reward_mean, std=r.total_reward_std) for r in records],
        target_posture_reward=[
            CurvePoint(iteration=r.iteration, mean=r.target_posture_mean, std=r.target_posture_std) for r in records
        ],
    )


@app.get("/api/v1/runs/{run_id}/report", response_model=EvalReport)
async def get_report(run_id: str):
    """Stored evaluation report of a run"""
    path = _run_dir(run_id) / "report.json"
    if not path.is_file():
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=f"Run {run_id} has no evaluation report")
    return EvalReport.model_validate_json(path.read_text())


@app.post("/api/v1/terrain/preview", response_model=TerrainPreview)
async def preview_terrain(spec: TerrainSpec):
    """
    Generate a terrain tile and summarize it

    - **kind**: terrain kind
    - **difficulty**: clamped to [0, 1]
    - **seed**: generator seed

    Returns the grid shape, height range and the hazard parameters that were rendered.
    """
    try:
        field = terrain.generate(spec)
    except ValueError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))

    return TerrainPreview(
        kind=spec.kind,
        difficulty=spec.difficulty,
        seed=spec.seed,
        rows=field.depth_cells,
        columns=field.width_cells,
        cell_size=field.cell_size,
        min_height=float(field.heights.min()),
        max_height=float(field.heights.max()),
        features=field.features,
    )


if __name__ == "__main__":
    # Run the server
    uvicorn.run("main:app", host="0.0.0.0", port=8000, reload=True, log_level="info")
