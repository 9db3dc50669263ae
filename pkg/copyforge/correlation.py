"""Request correlation ID middleware for the generation service."""

import time
import uuid

from fastapi import Request, Response
from starlette.middleware.base import BaseHTTPMiddleware, RequestResponseEndpoint

from copyforge.config import settings
from copyforge.logger import logger

HEADER = "X-Request-ID"


class CorrelationIDMiddleware(BaseHTTPMiddleware):
    """
    Tag every request with a correlation ID.

    An incoming ``X-Request-ID`` is reused, otherwise a UUID is generated. The
    ID is stored on ``request.state``, echoed in the response header and
    prefixed to request start/finish log lines.
    """

    async def dispatch(self, request: Request, call_next: RequestResponseEndpoint) -> Response:
        if not settings.ENABLE_CORRELATION_IDS:
            return await call_next(request)

        correlation_id = request.headers.get(HEADER) or str(uuid.uuid4())
        request.state.correlation_id = correlation_id
        started = time.perf_counter()
        logger.info(f"[{correlation_id}] Request started: {request.method} {request.url.path}")

        try:
            response: Response = await call_next(request)
        except Exception as e:
            logger.error(f"[{correlation_id}] Request failed with {type(e).__name__}: {e}")
            raise

        response.headers[HEADER] = correlation_id
        elapsed_ms = (time.perf_counter() - started) * 1000.0
        logger.info(
            f"[{correlation_id}] Request completed: {request.method} {request.url.path} "
            f"- {response.status_code} in {elapsed_ms:.1f} ms"
        )
        return response


def get_correlation_id(request: Request) -> str:
    state = getattr(request, "state", None)
    return getattr(state, "correlation_id", "unknown")
