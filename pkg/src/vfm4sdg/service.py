"""HTTP service exposing the pipeline for long-running, multi-client use.

Tensor inputs are referenced by path (the service is a local controller
over dumped feature files); annotation and detection payloads may be
passed inline as JSON or by path. Responses are exactly the CLI's JSON
reports. Structured package errors map to HTTP 400 with their module and
kind preserved.
"""

from __future__ import annotations

from typing import Optional, Union

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import pipeline
from .errors import VfmError


class DistillLossRequest(BaseModel):
    student_paths: list[str]
    teacher_path: str
    levels: Optional[list[int]] = None
    beta: float = 1.0
    lambda_: float = Field(default=1.0, alias="lambda")
    det_loss: Optional[float] = None
    lambda_sweep: Optional[list[float]] = None

    model_config = {"populate_by_name": True}


class BuildPrototypesRequest(BaseModel):
    features_dir: str
    annotations_path: str
    out_path: str
    threads: int = 1


class EnhanceQueriesRequest(BaseModel):
    queries_path: str
    bank_path: str
    teacher_path: str
    out_path: str
    heads: int = 8
    seed: int = 0
    params_dir: Optional[str] = None
    save_params_dir: Optional[str] = None


class EvalMapRequest(BaseModel):
    detections: Union[str, list]
    ground_truth: Union[str, dict]
    iou_threshold: float = 0.5


class AnalyzeErrorsRequest(BaseModel):
    detections: Union[str, list]
    ground_truth: Union[str, dict]
    score_threshold: float = 0.5
    iou_threshold: float = 0.5
    domains: Optional[list[str]] = None


class GradcheckRequest(BaseModel):
    seed: int = 0
    instances: int = 20


def create_app() -> FastAPI:
    app = FastAPI(title="vfm4sdg", version="0.1.0")

    @app.exception_handler(VfmError)
    async def vfm_error_handler(request: Request, exc: VfmError):
        return JSONResponse(
            status_code=400,
            content={"error": exc.cli_line(), "module": exc.module, "kind": exc.kind},
        )

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.post("/distill-loss")
    def distill_loss(req: DistillLossRequest) -> dict:
        return pipeline.distill_loss_report(
            student_paths=req.student_paths,
            teacher_path=req.teacher_path,
            levels=req.levels,
            beta=req.beta,
            lambda_=req.lambda_,
            det_loss=req.det_loss,
            lambda_sweep=req.lambda_sweep,
        )

    @app.post("/build-prototypes")
    def build_prototypes(req: BuildPrototypesRequest) -> dict:
        return pipeline.build_prototypes_report(
            features_dir=req.features_dir,
            annotations_path=req.annotations_path,
            out_path=req.out_path,
            threads=req.threads,
        )

    @app.post("/enhance-queries")
    def enhance_queries(req: EnhanceQueriesRequest) -> dict:
        return pipeline.enhance_queries_report(
            queries_path=req.queries_path,
            bank_path=req.bank_path,
            teacher_path=req.teacher_path,
            out_path=req.out_path,
            heads=req.heads,
            seed=req.seed,
            params_dir=req.params_dir,
            save_params_dir=req.save_params_dir,
        )

    @app.post("/eval-map")
    def eval_map(req: EvalMapRequest) -> dict:
        return pipeline.eval_map_report(
            detections_path=req.detections,
            ground_truth_path=req.ground_truth,
            iou_threshold=req.iou_threshold,
        )

    @app.post("/analyze-errors")
    def analyze_errors(req: AnalyzeErrorsRequest) -> dict:
        return pipeline.analyze_errors_report(
            detections_path=req.detections,
            ground_truth_path=req.ground_truth,
            score_threshold=req.score_threshold,
            iou_threshold=req.iou_threshold,
            domains=req.domains,
        )

    @app.post("/gradcheck")
    def gradcheck(req: GradcheckRequest) -> dict:
        return pipeline.gradcheck_report(seed=req.seed, instances=req.instances)

    return app


app = create_app()
