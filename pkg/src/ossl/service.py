"""HTTP wrapper around the command handlers.

One POST endpoint per command plus a health probe.  Library errors map onto
status codes by kind: bad config is the caller's request (422), bad data is
a missing or corrupt artifact (400), and a numerics blowup is our problem
(500).  The CLI talks to this service when given --server.
"""

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from . import __version__
from .errors import ConfigError, DataError, NumericsError, OsslError
from .harness import (handle_ablate, handle_adapt, handle_evaluate,
                      handle_gen_data, handle_sweep, handle_train_source)
from .schemas import (AblateRequest, AdaptRequest, AdaptResponse, EvaluateRequest,
                      EvaluateResponse, GenDataRequest, GenDataResponse,
                      HealthResponse, SweepRequest, TableResponse,
                      TrainSourceRequest, TrainSourceResponse)

_STATUS_BY_KIND = ((ConfigError, 422), (DataError, 400), (NumericsError, 500))


def create_app() -> FastAPI:
    app = FastAPI(title="ossl", version=__version__)

    @app.exception_handler(OsslError)
    async def _ossl_error(request, exc: OsslError):
        status = 500
        for kind, code in _STATUS_BY_KIND:
            if isinstance(exc, kind):
                status = code
                break
        return JSONResponse(status_code=status,
                            content={"error": type(exc).__name__, "detail": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/gen-data", response_model=GenDataResponse)
    def gen_data(req: GenDataRequest) -> GenDataResponse:
        return handle_gen_data(req)

    @app.post("/train-source", response_model=TrainSourceResponse)
    def train_source(req: TrainSourceRequest) -> TrainSourceResponse:
        return handle_train_source(req)

    @app.post("/adapt", response_model=AdaptResponse)
    def adapt(req: AdaptRequest) -> AdaptResponse:
        return handle_adapt(req)

    @app.post("/evaluate", response_model=EvaluateResponse)
    def evaluate(req: EvaluateRequest) -> EvaluateResponse:
        return handle_evaluate(req)

    @app.post("/sweep", response_model=TableResponse)
    def sweep(req: SweepRequest) -> TableResponse:
        return handle_sweep(req)

    @app.post("/ablate", response_model=TableResponse)
    def ablate(req: AblateRequest) -> TableResponse:
        return handle_ablate(req)

    return app


app = create_app()
