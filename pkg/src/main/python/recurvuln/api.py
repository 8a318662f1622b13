import logging
import os
from typing import List, Optional

from fastapi import Depends, FastAPI, HTTPException, status
from pydantic import BaseModel, Field, field_validator

from .code_context import build_index
from .config import API_CONFIG, LOG_FORMAT, LOG_LEVEL, VKB_DIR, load_config
from .detector import detect
from .errors import ConfigError, InvalidPatternError, RecordNotFoundError, RecordParseError
from .ledger import RunLedger
from .vkb import VkbStore

# Configure logging
logging.basicConfig(level=LOG_LEVEL, format=LOG_FORMAT)
logger = logging.getLogger(__name__)

app = FastAPI(**API_CONFIG)

_ledger: Optional[RunLedger] = None


def get_ledger() -> RunLedger:
    global _ledger
    if _ledger is None:
        _ledger = RunLedger()
    return _ledger


def get_store() -> VkbStore:
    return VkbStore(os.getenv("VKB_DIR", VKB_DIR))


class ScanRequest(BaseModel):
    repo: str
    theta: Optional[float] = Field(None, gt=0.0, le=1.0)
    window: Optional[int] = Field(None, ge=1)
    cve: List[str] = Field(default_factory=list)

    @field_validator("repo")
    @classmethod
    def validate_repo(cls, v):
        if not v or not v.strip():
            raise ValueError("Repository path cannot be empty")
        return v.strip()


@app.get("/health", status_code=status.HTTP_200_OK)
def health_check(ledger: RunLedger = Depends(get_ledger)):
    """Liveness plus ledger connectivity"""
    try:
        ledger.ping()
        return {"status": "healthy", "ledger": "connected", "version": API_CONFIG["version"]}
    except Exception as e:
        logger.error(f"Health check failed: {str(e)}")
        raise HTTPException(
            status_code=status.HTTP_503_SERVICE_UNAVAILABLE,
            detail=f"Service unhealthy: {str(e)}"
        )


@app.get("/vkb", status_code=status.HTTP_200_OK)
def list_vkb_records(store: VkbStore = Depends(get_store)):
    return {"records": store.list_records()}


@app.get("/vkb/{cve_id}", status_code=status.HTTP_200_OK)
def get_vkb_record(cve_id: str, store: VkbStore = Depends(get_store)):
    try:
        return store.load(cve_id).model_dump(mode="json")
    except RecordNotFoundError as e:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=str(e))
    except RecordParseError as e:
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail=f"Error reading record: {str(e)}"
        )


@app.post("/scan", status_code=status.HTTP_200_OK)
def scan_repository(request: ScanRequest, store: VkbStore = Depends(get_store)):
    """Run both detectors over a repository on the server's filesystem."""
    try:
        config = load_config(overrides={"detector.theta": request.theta, "detector.window_w": request.window})
        records = store.load_all(request.cve or None)
        index = build_index(request.repo, "target")
        findings = detect(index, records, config.detector, cve_ids=request.cve or None)
        logger.info(f"Scan of {request.repo}: {len(findings)} findings")
        return {"repo": request.repo, "findings": [f.model_dump(mode="json") for f in findings]}
    except RecordNotFoundError as e:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=str(e))
    except (ConfigError, InvalidPatternError, FileNotFoundError, NotADirectoryError) as e:
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(e))
    except Exception as e:
        logger.error(f"Scan of {request.repo} failed: {str(e)}")
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail=f"Error scanning repository: {str(e)}"
        )


@app.get("/runs", status_code=status.HTTP_200_OK)
def list_runs(ledger: RunLedger = Depends(get_ledger)):
    return {"runs": ledger.list_runs()}


@app.get("/runs/{run_id}", status_code=status.HTTP_200_OK)
def get_run(run_id: int, ledger: RunLedger = Depends(get_ledger)):
    run = ledger.get_run(run_id)
    if run is None:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail=f"Run with id {run_id} not found"
        )
    return run


def run_app(host: Optional[str] = None, port: Optional[int] = None):
    """Entry point for serving the API with uvicorn"""
    import uvicorn

    # Use environment variable for host, default to 0.0.0.0 for containers
    host = host or os.getenv("HOST", "0.0.0.0")  # nosec B104
    port = port or int(os.getenv("PORT", "8080"))

    uvicorn.run("recurvuln.api:app", host=host, port=port, log_level=LOG_LEVEL.lower())


if __name__ == "__main__":
    run_app()
