"""HTTP control plane: thin FastAPI handlers over a Coordinator.

Handlers only enqueue submissions and read published snapshots; all round
state is owned by the coordinator's own thread. Update bodies are raw FAUF
bytes, everything else is JSON.
"""

from __future__ import annotations

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from .coordinator import Coordinator
from .errors import (
    DuplicateUpdate,
    NotYetPublished,
    RoundClosed,
    ValidationFailed,
    WrongMode,
)

FAUF_MEDIA_TYPE = "application/octet-stream"


def create_app(coordinator: Coordinator) -> FastAPI:
    app = FastAPI(title="fedagg", docs_url=None, redoc_url=None)
    app.state.coordinator = coordinator

    @app.get("/v1/round")
    def round_info():
        return coordinator.round_info()

    @app.get("/v1/model/{round_no}")
    def get_model(round_no: int):
        try:
            data = coordinator.model_bytes(round_no)
        except NotYetPublished:
            return JSONResponse({"error": "NotYetPublished", "round": round_no}, status_code=404)
        return Response(content=data, media_type=FAUF_MEDIA_TYPE)

    @app.post("/v1/updates/{round_no}", status_code=201)
    async def post_update(round_no: int, request: Request):
        body = await request.body()
        try:
            coordinator.submit(round_no, body)
        except WrongMode as e:
            return JSONResponse({"error": "WrongMode", "detail": str(e)}, status_code=409)
        except DuplicateUpdate as e:
            return JSONResponse({"error": "DuplicateUpdate", "detail": str(e)}, status_code=409)
        except RoundClosed as e:
            return JSONResponse({"error": "RoundClosed", "detail": str(e)}, status_code=409)
        except ValidationFailed as e:
            return JSONResponse({"error": "ValidationFailed", "detail": str(e)}, status_code=422)
        return {"status": "accepted", "round": round_no}

    @app.get("/v1/health")
    def health():
        return coordinator.health()

    @app.get("/v1/metrics/{round_no}")
    def metrics(round_no: int):
        try:
            return coordinator.metrics(round_no)
        except NotYetPublished:
            return JSONResponse({"error": "NotYetPublished", "round": round_no}, status_code=404)

    return app
