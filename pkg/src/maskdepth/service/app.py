"""FastAPI application exposing the workflows.

Error contract: failures return a JSON body ``{"kind", "message"}`` where
kind is one of

- ``usage`` (HTTP 400): the request contradicts the interface contract,
- ``io`` (HTTP 404): a referenced file is missing or unreadable,
- ``verification`` (HTTP 409): a correctness check failed (gradient suite
  over tolerance, training diverged).

Clients map these back to process exit codes.
"""

from __future__ import annotations

import functools

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import __version__, workflows
from ..netpbm import FormatError
from ..trainer import TrainingDiverged
from . import schemas


def _error(status: int, kind: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status,
                        content={"kind": kind, "message": message})


def _guard(fn):
    """Translate workflow exceptions into the JSON error contract."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except workflows.UsageError as e:
            return _error(400, "usage", str(e))
        except (workflows.VerificationFailure, TrainingDiverged) as e:
            return _error(409, "verification", str(e))
        except (FileNotFoundError, IsADirectoryError, NotADirectoryError,
                PermissionError, FormatError) as e:
            return _error(404, "io", str(e))
        except (ValueError, OSError) as e:
            return _error(400, "usage", str(e))

    return wrapper


def create_app() -> FastAPI:
    app = FastAPI(title="maskdepth", version=__version__)

    @app.get("/v1/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/v1/gen-data", response_model=schemas.GenDataResponse)
    @_guard
    def gen_data(req: schemas.GenDataRequest):
        out = workflows.gen_data(req.out_dir, req.count, seed=req.seed,
                                 height=req.height, width=req.width,
                                 objects=req.objects)
        return schemas.GenDataResponse(**out)

    @app.post("/v1/train", response_model=schemas.TrainResponse)
    @_guard
    def train(req: schemas.TrainRequest):
        overrides = workflows.parse_overrides(req.overrides)
        out = workflows.train(req.data_dir, req.out_dir,
                              config_path=req.config_path, preset=req.preset,
                              overrides=overrides,
                              resume_from=req.resume_from)
        return schemas.TrainResponse(**out)

    @app.post("/v1/eval", response_model=schemas.EvalResponse)
    @_guard
    def eval_(req: schemas.EvalRequest):
        out = workflows.evaluate(req.data_dir, checkpoint_path=req.checkpoint,
                                 split=req.split, oracle=req.oracle,
                                 report_path=req.report_path)
        return schemas.EvalResponse(**out)

    @app.post("/v1/infer", response_model=schemas.InferResponse)
    @_guard
    def infer(req: schemas.InferRequest):
        out = workflows.infer(req.checkpoint, req.sample_dir, req.out_dir,
                              keep_prob=req.keep_prob, seed=req.seed)
        return schemas.InferResponse(**out)

    @app.post("/v1/gradcheck", response_model=schemas.GradcheckResponse)
    @_guard
    def gradcheck(req: schemas.GradcheckRequest):
        out = workflows.run_gradcheck(scope=req.scope, seed=req.seed)
        return schemas.GradcheckResponse(**out)

    return app
