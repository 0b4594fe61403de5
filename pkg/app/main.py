"""
BNER EBP service
FastAPI application exposing REML fitting and empirical best prediction.
"""

import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from app import __version__
from app.config import settings
from app.errors import BnerError
from app.middleware import MonitoringMiddleware
from app.models import ErrorResponse
from app.routes import router


logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Application lifespan events."""
    # Startup
    logger.info(f"Starting BNER EBP service {__version__}")
    logger.info(f"Max upload size: {settings.max_upload_mb} MB")
    yield
    # Shutdown
    logger.info("Shutting down...")


app = FastAPI(
    title="BNER EBP service",
    description="Empirical best prediction of bivariate small-area parameters",
    version=__version__,
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=[o.strip() for o in settings.allowed_origins.split(",") if o.strip()],
    allow_methods=["GET", "POST"],
    allow_headers=["*"],
)
app.add_middleware(MonitoringMiddleware)

app.include_router(router)


@app.exception_handler(BnerError)
async def library_error_handler(request: Request, exc: BnerError):
    """Model, data and prediction failures are client errors."""
    logger.warning(f"[REJECTED] {request.url.path}: {type(exc).__name__}: {exc}")
    body = ErrorResponse(detail=str(exc), error_type=type(exc).__name__)
    return JSONResponse(status_code=400, content=body.model_dump())


@app.get("/health")
async def health_check():
    """Health check endpoint."""
    return {"status": "healthy", "version": __version__}
