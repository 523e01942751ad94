"""FastAPI service exposing the toolkit's operations.

The endpoints are thin translations between the pydantic schemas and the
ops layer; domain errors (bad paths, invalid parameters) surface as HTTP
400 with the message, schema violations as FastAPI's native 422.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__, ops
from .schemas import (
    BenchRequest,
    BenchResponse,
    DemoRequest,
    DemoResponse,
    EvalRequest,
    EvalResponse,
    GradcheckRequest,
    GradcheckResponse,
    HealthResponse,
    StatsRequest,
    StatsResponse,
)

_DOMAIN_ERRORS = (ValueError, FileNotFoundError, NotADirectoryError, KeyError)


def create_app() -> FastAPI:
    app = FastAPI(title="hiocc", version=__version__)

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/stats", response_model=StatsResponse)
    def stats(req: StatsRequest) -> StatsResponse:
        try:
            result = ops.stats_run(
                req.data_dir,
                levels=req.levels,
                dims=req.dims,
                voxel_size=req.voxel_size,
                remap_path=req.remap_path,
                workers=req.workers,
            )
        except _DOMAIN_ERRORS as e:
            raise HTTPException(status_code=400, detail=str(e))
        return StatsResponse(
            status="partial" if result.failures else "ok",
            num_frames=result.num_frames,
            rows=result.rows,
            failures=result.failures,
            csv_text=result.csv_text,
        )

    @app.post("/eval", response_model=EvalResponse)
    def evaluate(req: EvalRequest) -> EvalResponse:
        try:
            result = ops.eval_run(
                req.pred_dir,
                req.gt_dir,
                dims=req.dims,
                voxel_size=req.voxel_size,
                num_classes=req.num_classes,
                remap_path=req.remap_path,
                use_remap=req.use_remap,
                class_names=req.class_names,
                workers=req.workers,
            )
        except _DOMAIN_ERRORS as e:
            raise HTTPException(status_code=400, detail=str(e))
        return EvalResponse(
            status="partial" if result.skipped else "ok",
            metrics=result.metrics,
            table=result.table,
            frames_evaluated=result.frames_evaluated,
            skipped=result.skipped,
        )

    @app.post("/gradcheck", response_model=GradcheckResponse)
    def gradcheck(req: GradcheckRequest) -> GradcheckResponse:
        try:
            result = ops.gradcheck_run(
                seed=req.seed, trials=req.trials, corrupt=req.corrupt
            )
        except _DOMAIN_ERRORS as e:
            raise HTTPException(status_code=400, detail=str(e))
        return GradcheckResponse(
            status="ok" if result["all_passed"] else "partial",
            all_passed=result["all_passed"],
            rows=result["rows"],
        )

    @app.post("/demo", response_model=DemoResponse)
    def demo(req: DemoRequest) -> DemoResponse:
        try:
            summary = ops.demo_run(
                req.config,
                req.out_dir,
                seed=req.seed,
                k=req.k,
                rule=req.rule,
            )
        except _DOMAIN_ERRORS as e:
            raise HTTPException(status_code=400, detail=str(e))
        return DemoResponse(status="ok", summary=summary)

    @app.post("/bench", response_model=BenchResponse)
    def bench(req: BenchRequest) -> BenchResponse:
        try:
            report = ops.bench_run(
                req.k,
                dims=req.dims,
                channels=req.channels,
                num_classes=req.num_classes,
            )
        except _DOMAIN_ERRORS as e:
            raise HTTPException(status_code=400, detail=str(e))
        return BenchResponse(status="ok", report=report)

    return app
