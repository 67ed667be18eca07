"""HTTP service exposing the probe, selection, and statistics engines.

Stateless request/response wrappers around the core package: nothing is
stored server-side, and every response is deterministic given the
request (seeds included in the payloads).
"""

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response

from gradprobe._version import __version__
from gradprobe import runops
from gradprobe.probe import CLASSIFICATION, REGRESSION, ProbeBatch, ProbeInputError, probe
from gradprobe.selection import (
    SelectionConfig,
    SelectionConfigError,
    TrajectoryError,
    TrajectorySeries,
)
from gradprobe.service.schemas import (
    CorrelateRequest,
    HealthResponse,
    ProbeArraysRequest,
    ProbeResponse,
    RankRequest,
    ScatterRequest,
    SelectRequest,
    SelectionOptions,
    SeriesRow,
    SweepRequest,
    TraceProbeResponse,
)
from gradprobe.stats import (
    CollinearityError,
    DegenerateSampleError,
    PairedSample,
    UnstableBootstrapError,
    correlation_report,
    ols_with_covariate,
    rank_models,
)
from gradprobe.traceio import ScatterOptions, SeriesTable, TraceFormatError, emit_scatter, trace_from_bytes

_VALIDATION_ERRORS = (
    ProbeInputError,
    SelectionConfigError,
    TrajectoryError,
    ValueError,
)
_DEGENERATE_ERRORS = (DegenerateSampleError, UnstableBootstrapError, CollinearityError)


def _reraise_http(exc: Exception):
    if isinstance(exc, TraceFormatError):
        raise HTTPException(status_code=400, detail=f"[{exc.code}] {exc}") from exc
    if isinstance(exc, _DEGENERATE_ERRORS):
        raise HTTPException(status_code=422, detail=f"degenerate statistics: {exc}") from exc
    if isinstance(exc, _VALIDATION_ERRORS):
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    raise exc


def _batch_from_request(req: ProbeArraysRequest) -> ProbeBatch:
    if req.mode == CLASSIFICATION:
        if req.labels is None:
            raise ProbeInputError("classification mode requires labels")
        return ProbeBatch.classification(
            features=np.asarray(req.features, dtype=np.float64),
            head_weights=np.asarray(req.head_weights, dtype=np.float64),
            labels=np.asarray(req.labels, dtype=np.int64),
        )
    if req.mode == REGRESSION:
        if req.targets is None:
            raise ProbeInputError("regression mode requires targets")
        return ProbeBatch.regression(
            features=np.asarray(req.features, dtype=np.float64),
            head_weights=np.asarray(req.head_weights, dtype=np.float64),
            targets=np.asarray(req.targets, dtype=np.float64),
        )
    raise ProbeInputError(f"unknown mode {req.mode!r}")


def _probe_payload(batch: ProbeBatch, eps_z: float, eps_w: float) -> dict:
    result = probe(batch, eps_z=eps_z, eps_w=eps_w)
    doc = result.as_dict()
    doc.pop("eps_z")
    doc.pop("eps_w")
    doc.update(
        mode=batch.mode,
        n_outputs=batch.n_outputs,
        feature_dim=batch.feature_dim,
        batch_size=batch.batch_size,
    )
    return doc


def _table_from_rows(rows: list) -> SeriesTable:
    return SeriesTable(
        steps=[r.step for r in rows],
        scores=[r.score for r in rows],
        metrics=[r.metric for r in rows],
        aux_losses=[r.aux_loss for r in rows],
    )


def _config_from_options(options: SelectionOptions) -> SelectionConfig:
    return SelectionConfig(
        ema_span=options.ema_span,
        ema_beta=options.ema_beta,
        tail_size=options.tail_size,
        tail_fraction=options.tail_fraction,
        quantile=options.quantile,
        patience=options.patience,
        max_lag=options.max_lag,
        repeats=options.repeats,
    )


def create_app() -> FastAPI:
    app = FastAPI(
        title="gradprobe service",
        description="Head-gradient probes, checkpoint selection, and "
        "correlation analysis over HTTP.",
        version=__version__,
    )

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse()

    @app.post("/probe", response_model=ProbeResponse)
    def probe_arrays(req: ProbeArraysRequest) -> ProbeResponse:
        try:
            batch = _batch_from_request(req)
            return ProbeResponse(**_probe_payload(batch, req.eps_z, req.eps_w))
        except Exception as exc:
            _reraise_http(exc)

    @app.post("/probe/trace", response_model=TraceProbeResponse)
    async def probe_trace(
        request: Request,
        score: str = "fro",
        eps_z: float = 1e-12,
        eps_w: float = 1e-12,
    ) -> TraceProbeResponse:
        """Probe one binary trace posted as the raw request body."""
        del score  # single-trace probing returns every readout
        body = await request.body()
        try:
            trace = trace_from_bytes(body)
            payload = _probe_payload(trace.batch, eps_z, eps_w)
            return TraceProbeResponse(
                step=trace.step, metric=trace.metric, aux_loss=trace.aux_loss, **payload
            )
        except Exception as exc:
            _reraise_http(exc)

    @app.post("/select")
    def select(req: SelectRequest) -> dict:
        try:
            table = _table_from_rows(req.rows)
            config = _config_from_options(req.options)
            return runops.selection_report(
                table, config, higher_is_better=req.higher_is_better, run_id=req.run_id
            )
        except Exception as exc:
            _reraise_http(exc)

    @app.post("/sweep")
    def sweep(req: SweepRequest) -> dict:
        try:
            table = _table_from_rows(req.rows)
            grid = [tuple(cell) for cell in req.grid] if req.grid else None
            return runops.sweep_report(
                table, grid=grid, higher_is_better=req.higher_is_better
            ).as_dict()
        except Exception as exc:
            _reraise_http(exc)

    @app.post("/correlate")
    def correlate(req: CorrelateRequest) -> dict:
        try:
            sample = PairedSample(
                np.asarray(req.x, dtype=np.float64), np.asarray(req.y, dtype=np.float64)
            )
            report = correlation_report(sample, n_resamples=req.n_resamples, seed=req.seed)
            doc = {"correlation": report.as_dict(), "regression": None}
            if req.steps is not None:
                steps = np.asarray(req.steps, dtype=np.float64)
                if steps.size != sample.n:
                    raise ProbeInputError("steps length must match x and y")
                if sample.n >= 4 and np.ptp(steps) > 0:
                    doc["regression"] = ols_with_covariate(sample.y, sample.x, steps).as_dict()
            return doc
        except Exception as exc:
            _reraise_http(exc)

    @app.post("/rank")
    def rank(req: RankRequest) -> dict:
        try:
            entries = [(e.name, e.score, e.metric) for e in req.entries]
            return rank_models(entries).as_dict()
        except Exception as exc:
            _reraise_http(exc)

    @app.post("/scatter")
    def scatter(req: ScatterRequest) -> Response:
        try:
            sample = PairedSample(
                np.asarray(req.x, dtype=np.float64), np.asarray(req.y, dtype=np.float64)
            )
            options = ScatterOptions(
                log10_x=req.log10_x,
                x_label=req.x_label,
                y_label=req.y_label,
                title=req.title,
                lower_is_better_x=req.lower_is_better_x,
                lower_is_better_y=req.lower_is_better_y,
            )
            svg = emit_scatter(sample, options)
            return Response(content=svg, media_type="image/svg+xml")
        except Exception as exc:
            _reraise_http(exc)

    return app


app = create_app()
