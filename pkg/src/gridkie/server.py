"""Minimal JSON-over-HTTP inference service over a fixed checkpoint.

Error contract: 400 for a body that is not valid JSON, 422 for a document
that violates the input invariants, 500 with a diagnostic for anything that
breaks during inference.  The model is immutable, so concurrent requests
need no locking; per-request numerical scratch is thread-local.
"""

from __future__ import annotations

import logging

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from starlette.concurrency import run_in_threadpool

from .data import DatasetError, document_from_record
from .gridder import GridOverflowError
from .pipeline import Predictor

logger = logging.getLogger(__name__)


def create_app(predictor: Predictor) -> FastAPI:
    app = FastAPI(title="gridkie", docs_url=None, redoc_url=None)
    cfg = predictor.model.config

    @app.get("/healthz")
    def healthz() -> dict:
        return {
            "status": "ok",
            "num_classes": cfg.num_classes,
            "classes": predictor.classes.names,
            "vocab_size": cfg.vocab_size,
            "embedding_dim": cfg.embedding_dim,
            "parameters": predictor.model.param_count(),
            "grid": {"rows": predictor.grid_shape.rows,
                     "cols": predictor.grid_shape.cols},
        }

    @app.post("/infer")
    async def infer(request: Request):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"error": "request body is not valid JSON"},
                                status_code=400)
        if not isinstance(body, dict):
            return JSONResponse({"error": "request body must be a document object"},
                                status_code=400)
        try:
            doc = document_from_record(body, predictor.classes, where="request")
            if not doc.tokens:
                raise DatasetError("request: document has no tokens")
        except (DatasetError, ValueError) as exc:
            return JSONResponse({"error": str(exc)}, status_code=422)
        try:
            payload = await run_in_threadpool(predictor.infer_payload, doc)
        except GridOverflowError as exc:
            return JSONResponse({"error": str(exc)}, status_code=422)
        except Exception as exc:  # surface the failure class to the caller
            logger.exception("inference failed for document %r", doc.id)
            return JSONResponse({"error": f"{type(exc).__name__}: {exc}"},
                                status_code=500)
        return payload

    return app
