"""
API routes for fitting and prediction.
"""

import logging
import math
import os
import tempfile
from typing import Optional

from fastapi import APIRouter, File, Form, HTTPException, UploadFile
from starlette.concurrency import run_in_threadpool

from app.config import settings
from app.ebp import predict_domains
from app.errors import BnerError
from app.loaders import load_aux_csv, load_unit_csv
from app.models import (
    ErrorResponse,
    EstimateRow,
    FitResponse,
    McOptions,
    ParameterRow,
    PredictResponse,
    TargetInfo,
    TargetsResponse,
)
from app.reml import fit_reml, parameter_table
from app.targets import BUILTIN_ORDER, TARGETS, parse_targets
from app.transforms import TRANSFORMS, get_transform


router = APIRouter()
logger = logging.getLogger(__name__)

ERROR_RESPONSES = {
    400: {"model": ErrorResponse},
    413: {"model": ErrorResponse},
    500: {"model": ErrorResponse},
}


async def _save_upload(upload: UploadFile, directory: str, name: str) -> str:
    """Store an uploaded CSV under ``directory`` and return its path."""
    content = await upload.read()
    limit = settings.max_upload_mb * 1024 * 1024
    if len(content) > limit:
        raise HTTPException(
            status_code=413,
            detail=f"{upload.filename or name} exceeds the {settings.max_upload_mb} MB upload limit",
        )
    path = os.path.join(directory, name)
    with open(path, "wb") as f:
        f.write(content)
    return path


def _finite(value) -> Optional[float]:
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def _json_safe(row: ParameterRow) -> ParameterRow:
    """NaN standard errors (singular information, zero variance) become null."""
    fields = ("std_error", "z_value", "p_value", "lower_95", "upper_95")
    return row.model_copy(update={f: _finite(getattr(row, f)) for f in fields})


@router.get(
    "/targets",
    response_model=TargetsResponse,
    summary="List built-in targets and transforms",
)
async def get_targets():
    """Targets that /predict can estimate and the transforms it accepts."""
    return TargetsResponse(
        targets=[
            TargetInfo(name=name, kind=TARGETS[name].kind, description=TARGETS[name].description)
            for name in BUILTIN_ORDER
        ],
        transforms=sorted(TRANSFORMS),
    )


@router.post(
    "/fit",
    response_model=FitResponse,
    summary="Fit the model by REML",
    responses=ERROR_RESPONSES,
)
async def fit(
    data: UploadFile = File(..., description="unit-level sample CSV"),
    transform: str = Form("log"),
):
    """
    Fit the bivariate nested error model to an uploaded unit sample and
    return the parameter table.
    """
    with tempfile.TemporaryDirectory() as tmp:
        data_path = await _save_upload(data, tmp, "data.csv")
        try:
            sample = load_unit_csv(data_path, get_transform(transform))
            fitted = await run_in_threadpool(fit_reml, sample)
        except BnerError:
            raise
        except Exception as e:
            logger.exception("[FIT] unexpected failure")
            raise HTTPException(status_code=500, detail=f"Unexpected error: {str(e)}")

    logger.info(f"[FIT] converged={fitted.converged} iterations={fitted.iterations}")
    return FitResponse(
        converged=fitted.converged,
        iterations=fitted.iterations,
        reml_loglik=fitted.reml_loglik,
        boundary=list(fitted.boundary),
        parameters=[_json_safe(row) for row in parameter_table(fitted)],
    )


@router.post(
    "/predict",
    response_model=PredictResponse,
    summary="Direct and EBP estimates per domain",
    responses=ERROR_RESPONSES,
)
async def predict(
    data: UploadFile = File(..., description="unit-level sample CSV"),
    aux: UploadFile = File(..., description="counts CSV (domain_id, pattern_id, N_dt)"),
    patterns: UploadFile = File(..., description="pattern dictionary CSV"),
    transform: str = Form("log"),
    L: int = Form(200, ge=1, le=10_000),
    seed: int = Form(0, ge=0),
    targets: str = Form(",".join(BUILTIN_ORDER)),
):
    """
    Fit the model, then predict every domain listed in the counts file,
    sampled or not. Undefined values (direct estimates of unsampled
    domains, variances from fewer than two units) come back as null.
    """
    with tempfile.TemporaryDirectory() as tmp:
        data_path = await _save_upload(data, tmp, "data.csv")
        aux_path = await _save_upload(aux, tmp, "aux.csv")
        patterns_path = await _save_upload(patterns, tmp, "patterns.csv")
        try:
            g = get_transform(transform)
            requested = parse_targets(targets)
            sample = load_unit_csv(data_path, g)
            counts = load_aux_csv(aux_path, patterns_path, sample)
            fitted = await run_in_threadpool(fit_reml, sample)
            mc = McOptions(L=L, seed=seed)
            estimates = await run_in_threadpool(predict_domains, fitted, sample, counts, g, mc, requested)
        except BnerError:
            raise
        except Exception as e:
            logger.exception("[PREDICT] unexpected failure")
            raise HTTPException(status_code=500, detail=f"Unexpected error: {str(e)}")

    frame = estimates.to_frame()
    value_columns = [c for c in frame.columns if c not in ("domain_id", "n_d", "N_d")]
    domains = [
        EstimateRow(
            domain_id=row["domain_id"],
            n_d=int(row["n_d"]),
            N_d=int(row["N_d"]),
            values={c: _finite(row[c]) for c in value_columns},
        )
        for row in frame.to_dict(orient="records")
    ]
    return PredictResponse(transform=transform, L=L, seed=seed, domains=domains)
