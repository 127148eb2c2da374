"""HTTP API over the training, probing and evaluation routines.

Every endpoint takes the same flat ``key = value`` configuration text the CLI
reads from disk, so a config file means the same thing locally and remotely.
Requests run synchronously; one training run is single-threaded by design.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__
from .data_io import synth_dataset, write_split
from .errors import NumericError, ScvaeError
from .evaluation import EvalMetrics, export_latents, write_metrics
from .fisher import FisherReport, layer_fisher, recurrence_check
from .harness import (
    RunConfig,
    RunLog,
    evaluate,
    load_dataset,
    load_trained,
    parse_config,
    probe_batch,
    run_depth_sweep,
    run_table1,
    train,
)
from .model import PRESET_LABELS, PRESETS, preset

log = logging.getLogger(__name__)

app = FastAPI(title="scvae", version=__version__)


class ConfigRequest(BaseModel):
    config: str = Field(description="flat 'key = value' run configuration")


class CheckpointRequest(ConfigRequest):
    checkpoint: str


class ExportRequest(CheckpointRequest):
    out: str


class SynthRequest(ConfigRequest):
    out_dir: str


class Metrics(BaseModel):
    nll: float
    accuracy: float
    n_importance_samples: int
    classifier_epochs: int
    path: str | None = None


class Epoch(BaseModel):
    epoch: int
    train_elbo: float
    val_elbo: float
    wall_time: float


class LayerOut(BaseModel):
    side: str
    layer: int
    fisher: float
    grad_sq_norm: float
    param_count: int
    zero_gradient: bool


class PairOut(BaseModel):
    network: str
    layer: int
    next_layer: int
    measured: float
    predicted: float
    literal: float


class Recurrence(BaseModel):
    pairs: list[PairOut]
    skipped: list[tuple[int, int]]
    encoder_decay_rate: float | None
    decoder_decay_rate: float | None


class Fisher(BaseModel):
    run_id: str
    epoch: int
    layers: list[LayerOut]
    encoder_mean: float
    decoder_mean: float
    overall_mean: float
    recurrence: Recurrence | None = None
    path: str | None = None


class TrainResponse(BaseModel):
    run_id: str
    epochs: list[Epoch]
    best_epoch: int | None
    fisher_csv: str | None
    checkpoint: str | None
    best_checkpoint: str | None
    final_fisher: Fisher
    metrics: Metrics


class SweepResponse(BaseModel):
    rows: list[dict]
    path: str


class Table1Response(BaseModel):
    rows: list[dict]
    text: str
    path: str


class ExportResponse(BaseModel):
    path: str
    rows: int


class SynthResponse(BaseModel):
    files: list[str]


class PresetOut(BaseModel):
    name: str
    label: str
    encoder_depth: int
    decoder_depth: int
    encoder_skip: str
    decoder_skip: str


@app.exception_handler(ScvaeError)
async def _scvae_error(request: Request, exc: ScvaeError) -> JSONResponse:
    kind = "numeric" if isinstance(exc, NumericError) else "configuration"
    status = 500 if kind == "numeric" else 400
    return JSONResponse(status_code=status, content={"kind": kind, "detail": str(exc)})


@app.exception_handler(OSError)
async def _os_error(request: Request, exc: OSError) -> JSONResponse:
    return JSONResponse(status_code=400, content={"kind": "configuration", "detail": str(exc)})


def _metrics(m: EvalMetrics, path: str | None = None) -> Metrics:
    return Metrics(**vars(m), path=path)


def _fisher(report: FisherReport, with_recurrence: bool = False, path: str | None = None) -> Fisher:
    rec = None
    if with_recurrence:
        diag = recurrence_check(report)
        enc, dec = diag.decay_rate("encoder"), diag.decay_rate("decoder")
        rec = Recurrence(
            pairs=[PairOut(network=p.network, layer=p.layer, next_layer=p.next_layer, measured=p.measured,
                           predicted=p.predicted, literal=p.literal) for p in diag.pairs],
            skipped=diag.skipped,
            encoder_decay_rate=None if np.isnan(enc) else enc,
            decoder_decay_rate=None if np.isnan(dec) else dec,
        )
    return Fisher(
        run_id=report.run_id,
        epoch=report.epoch,
        layers=[LayerOut(**vars(r)) for r in report.layers],
        encoder_mean=report.encoder_mean,
        decoder_mean=report.decoder_mean,
        overall_mean=report.overall_mean,
        recurrence=rec,
        path=path,
    )


def _train_response(runlog: RunLog) -> TrainResponse:
    return TrainResponse(
        run_id=runlog.run_id,
        epochs=[Epoch(**vars(e)) for e in runlog.epochs],
        best_epoch=runlog.best_epoch,
        fisher_csv=runlog.fisher_csv,
        checkpoint=runlog.checkpoint,
        best_checkpoint=runlog.best_checkpoint,
        final_fisher=_fisher(runlog.final_fisher, with_recurrence=True),
        metrics=_metrics(runlog.metrics, runlog.metrics_path),
    )


def _trained(config: RunConfig, checkpoint: str):
    split = load_dataset(config)
    params, wiring = load_trained(config, checkpoint, split)
    return split, params, wiring


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.get("/presets", response_model=list[PresetOut])
def presets() -> list[PresetOut]:
    out = []
    for name in PRESETS:
        c = preset(name)
        out.append(PresetOut(name=name, label=PRESET_LABELS[name], encoder_depth=c.encoder_depth,
                             decoder_depth=c.decoder_depth, encoder_skip=str(c.encoder_skip),
                             decoder_skip=str(c.decoder_skip)))
    return out


@app.post("/train", response_model=TrainResponse)
def train_endpoint(req: ConfigRequest) -> TrainResponse:
    return _train_response(train(parse_config(req.config)).log)


@app.post("/eval", response_model=Metrics)
def eval_endpoint(req: CheckpointRequest) -> Metrics:
    config = parse_config(req.config)
    split, params, wiring = _trained(config, req.checkpoint)
    metrics = evaluate(config, params, wiring, split)
    path = Path(config.output_dir) / f"metrics_{config.name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_metrics(path, metrics, preset=config.preset or "custom", seed=config.seed, epochs=config.epochs)
    return _metrics(metrics, str(path))


@app.post("/fisher", response_model=Fisher)
def fisher_endpoint(req: CheckpointRequest) -> Fisher:
    config = parse_config(req.config)
    split, params, wiring = _trained(config, req.checkpoint)
    x, eps = probe_batch(config, split, wiring.config.latent_dim)
    report = layer_fisher(params, wiring, x, eps, run_id=config.name, epoch=config.epochs)
    path = Path(config.output_dir) / f"fisher_{config.name}_{Path(req.checkpoint).stem}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(path)
    return _fisher(report, with_recurrence=True, path=str(path))


@app.post("/sweep", response_model=SweepResponse)
def sweep_endpoint(req: ConfigRequest) -> SweepResponse:
    config = parse_config(req.config)
    rows = run_depth_sweep(config)
    return SweepResponse(rows=rows, path=str(Path(config.output_dir) / "sweep.csv"))


@app.post("/table1", response_model=Table1Response)
def table1_endpoint(req: ConfigRequest) -> Table1Response:
    config = parse_config(req.config)
    table = run_table1(config)
    return Table1Response(rows=table.rows, text=table.render(), path=str(Path(config.output_dir) / "table1.csv"))


@app.post("/export-latents", response_model=ExportResponse)
def export_endpoint(req: ExportRequest) -> ExportResponse:
    config = parse_config(req.config)
    split, params, wiring = _trained(config, req.checkpoint)
    Path(req.out).parent.mkdir(parents=True, exist_ok=True)
    export_latents(params, wiring, split.test.images, split.test.labels, req.out)
    return ExportResponse(path=req.out, rows=len(split.test))


@app.post("/synth", response_model=SynthResponse)
def synth_endpoint(req: SynthRequest) -> SynthResponse:
    c = parse_config(req.config)
    split = synth_dataset(c.synth_seed, c.synth_n_per_class, c.synth_n_classes, c.synth_d)
    return SynthResponse(files=[str(p) for p in write_split(split, req.out_dir)])
