"""
Middleware for request logging and timing.
"""

import logging
import time
import uuid

from fastapi import Request
from starlette.middleware.base import BaseHTTPMiddleware

logger = logging.getLogger(__name__)

QUIET_PATHS = ("/health",)


class MonitoringMiddleware(BaseHTTPMiddleware):
    """
    Log every request with its upload size, status and duration.

    Fits and predictions run for seconds, so the duration is the number an
    operator watches. The request id is also set on ``request.state`` for
    route-level log lines.
    """

    async def dispatch(self, request: Request, call_next):
        if request.url.path in QUIET_PATHS:
            return await call_next(request)

        request_id = uuid.uuid4().hex[:12]
        request.state.request_id = request_id
        client_ip = request.client.host if request.client else "unknown"
        size = request.headers.get("content-length", "0")
        logger.info(f"[REQUEST] {request_id} {request.method} {request.url.path} from {client_ip} ({size} bytes)")

        start = time.perf_counter()
        response = await call_next(request)
        duration = time.perf_counter() - start

        level = logging.WARNING if response.status_code >= 500 else logging.INFO
        logger.log(
            level,
            f"[RESPONSE] {request_id} {request.method} {request.url.path} "
            f"status={response.status_code} duration={duration:.2f}s",
        )
        response.headers["X-Request-Duration"] = f"{duration:.3f}"
        response.headers["X-Request-ID"] = request_id
        return response
