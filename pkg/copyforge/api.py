"""HTTP generation service over a trained checkpoint directory."""

from contextlib import asynccontextmanager
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any, AsyncGenerator, Dict, Optional, Union

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from starlette.concurrency import run_in_threadpool
from starlette.status import (
    HTTP_422_UNPROCESSABLE_ENTITY,
    HTTP_500_INTERNAL_SERVER_ERROR,
    HTTP_503_SERVICE_UNAVAILABLE,
)

from copyforge.config import RunConfig, settings
from copyforge.correlation import CorrelationIDMiddleware, get_correlation_id
from copyforge.decode import generate_one
from copyforge.exceptions import (
    CheckpointFormatError,
    ConfigError,
    ContractError,
    CopyForgeError,
    CorpusParseError,
    ModelUnavailableError,
    SlotIndexError,
)
from copyforge.logger import logger
from copyforge.models import ErrorResponse, GenerateRequest, GenerateResponse, HealthCheckResponse
from copyforge.network import ModelParameters
from copyforge.trainer import load_trained
from copyforge.vocab import Vocabulary

_CLIENT_ERRORS = (ContractError, ConfigError, CorpusParseError, SlotIndexError)


@dataclass
class LoadedModel:
    params: ModelParameters
    vocab: Vocabulary
    run_config: RunConfig
    directory: Path


def _status_for(exc: CopyForgeError) -> int:
    if isinstance(exc, ModelUnavailableError):
        return HTTP_503_SERVICE_UNAVAILABLE
    if isinstance(exc, _CLIENT_ERRORS):
        return HTTP_422_UNPROCESSABLE_ENTITY
    return HTTP_500_INTERNAL_SERVER_ERROR


def create_app(checkpoint_dir: Optional[Union[str, Path]] = None) -> FastAPI:
    """Application factory; the model is loaded once when the app starts."""
    directory = checkpoint_dir if checkpoint_dir is not None else settings.CHECKPOINT_DIR
    started = datetime.now(timezone.utc)

    @asynccontextmanager
    async def lifespan(app: FastAPI) -> AsyncGenerator[None, None]:
        app.state.model = None
        if directory is None:
            logger.warning("No checkpoint directory configured; /generate will return 503")
        else:
            try:
                params, vocab, run_config = load_trained(Path(directory))
                app.state.model = LoadedModel(params, vocab, run_config, Path(directory))
                logger.info(f"Loaded model from {directory} (vocab {vocab.size})")
            except (CheckpointFormatError, ConfigError, OSError) as e:
                logger.error(f"Failed to load model from {directory}: {e}")
        yield
        logger.info("Generation service shutdown complete")

    app = FastAPI(
        title=settings.API_TITLE,
        description="Pointer-generator decoding with per-token copy probabilities",
        version=settings.API_VERSION,
        lifespan=lifespan,
    )
    app.add_middleware(CorrelationIDMiddleware)

    @app.exception_handler(CopyForgeError)
    async def copyforge_exception_handler(request: Request, exc: CopyForgeError) -> JSONResponse:
        """Map engine errors to structured error bodies."""
        correlation_id = get_correlation_id(request)
        status = _status_for(exc)
        log = logger.warning if status < HTTP_500_INTERNAL_SERVER_ERROR else logger.error
        log(f"[{correlation_id}] {exc.__class__.__name__} in {request.url.path}: {exc.message}")
        return JSONResponse(
            status_code=status,
            content=ErrorResponse(
                error=exc.__class__.__name__,
                message=exc.message,
                details=exc.details,
                path=str(request.url.path),
                request_id=correlation_id,
            ).model_dump(),
        )

    @app.exception_handler(RequestValidationError)
    async def validation_exception_handler(request: Request, exc: RequestValidationError) -> JSONResponse:
        correlation_id = get_correlation_id(request)
        logger.warning(f"[{correlation_id}] Validation error in {request.url.path}: {exc.errors()}")
        errors = [
            {"field": ".".join(str(loc) for loc in err["loc"]), "constraint": f"{err['type']}: {err['msg']}"}
            for err in exc.errors()
        ]
        return JSONResponse(
            status_code=HTTP_422_UNPROCESSABLE_ENTITY,
            content=ErrorResponse(
                error="RequestValidationError",
                message="Input validation failed",
                details={"validation_errors": errors},
                path=str(request.url.path),
                request_id=correlation_id,
            ).model_dump(),
        )

    @app.post("/generate", response_model=GenerateResponse)
    async def generate(body: GenerateRequest, request: Request) -> GenerateResponse:
        """Decode one source text."""
        model: Optional[LoadedModel] = request.app.state.model
        if model is None:
            raise ModelUnavailableError(checkpoint_dir=str(directory) if directory else None)
        overrides: Dict[str, Any] = {}
        if body.beam_size is not None:
            overrides["beam_size"] = body.beam_size
        if body.max_len is not None:
            overrides["max_len"] = body.max_len
        decode_config = model.run_config.decode.model_copy(update=overrides)
        record = await run_in_threadpool(
            generate_one, model.params, model.vocab, body.src, "", model.run_config.model, decode_config
        )
        return GenerateResponse(hyp=record.hyp, avg_p_copy=record.avg_p_copy, p_copy_trace=record.p_copy_trace)

    @app.get("/health", response_model=HealthCheckResponse)
    async def health_check(request: Request) -> HealthCheckResponse:
        model: Optional[LoadedModel] = request.app.state.model
        uptime = timedelta(seconds=(datetime.now(timezone.utc) - started).total_seconds())
        return HealthCheckResponse(
            status="healthy" if model is not None else "unhealthy",
            checkpoint=str(model.directory) if model else None,
            vocab_size=model.vocab.size if model else None,
            timestamp=datetime.now(timezone.utc),
            uptime=str(uptime),
        )

    return app
