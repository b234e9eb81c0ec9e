# main.py
import asyncio
import logging
import os
from typing import Literal, Optional

import uvicorn
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from app.config import MAX_CONCURRENT_REQUESTS, MODEL_DIR, REQUEST_TIMEOUT_SECONDS
from app.errors import ArtifactIOError, SchemaError, UntrainedModel, ValidationError
from app.pipeline import ModelBundle, detect_trace
from app.schemas import TraceRecord, VerdictRecord, trace_from_record

logger = logging.getLogger(__name__)

VERSION = "1.0.0"

app = FastAPI(
    title="FBS Detection Service",
    description="Fake base station and multi-step attack verdicts for NAS/RRC packet traces.",
    version=VERSION
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

semaphore = asyncio.Semaphore(MAX_CONCURRENT_REQUESTS)


class DetectRequest(BaseModel):
    trace: TraceRecord
    task: Literal["fbs", "msa"] = "fbs"
    fuse: bool = True
    tau: float = Field(default=0.5, ge=0.0, le=1.0)


_bundle: Optional[ModelBundle] = None


def get_bundle() -> ModelBundle:
    """Get or load the model bundle from FBSD_MODEL_DIR."""
    global _bundle
    if _bundle is None:
        _bundle = ModelBundle.load(os.getenv("FBSD_MODEL_DIR", MODEL_DIR))
    return _bundle


def reset_bundle() -> None:
    global _bundle
    _bundle = None


@app.get("/")
async def root():
    return {
        "message": "FBS Detection Service",
        "version": VERSION,
        "endpoints": {
            "/detect": "POST one trace record, get its verdict",
            "/health": "Service and model status",
        },
    }


@app.post("/detect", response_model=VerdictRecord)
async def detect(request: DetectRequest):
    """Verdict for one trace; same code path as the streaming CLI."""
    async with semaphore:
        try:
            try:
                bundle = get_bundle()
            except ArtifactIOError as e:
                raise HTTPException(status_code=503, detail=f"Models not available: {e}")
            trace = trace_from_record(request.trace)
            return await asyncio.wait_for(
                asyncio.to_thread(detect_trace, bundle, trace, request.task, request.fuse, request.tau),
                timeout=REQUEST_TIMEOUT_SECONDS,
            )
        except HTTPException:
            raise
        except UntrainedModel as e:
            raise HTTPException(status_code=503, detail=str(e))
        except (ValidationError, SchemaError) as e:
            raise HTTPException(status_code=422, detail=f"{type(e).__name__}: {e}")
        except asyncio.TimeoutError:
            raise HTTPException(status_code=504, detail="Detection timed out")
        except Exception as e:
            logger.exception("❌ Detection failed")
            raise HTTPException(status_code=500, detail=f"Detection failed: {str(e)}")


@app.get("/health")
async def health_check():
    """Health check endpoint."""
    loaded = _bundle is not None
    return {
        "status": "healthy",
        "version": VERSION,
        "models_loaded": loaded,
        "tasks": {task: [layer.value for layer in _bundle.layers_for(task)] for task in ("fbs", "msa")} if loaded else {},
    }


if __name__ == "__main__":
    port = int(os.getenv("PORT", 8500))
    uvicorn.run(app, host="0.0.0.0", port=port)
