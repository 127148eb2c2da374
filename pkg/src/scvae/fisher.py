"""Layer-wise empirical Fisher Information of a VAE.

For each affine layer the probe reports the mean, over the layer's parameters
and over a batch, of the squared per-sample gradient of the negative ELBO.
Per-sample gradients come from one batched backward pass: the samples in a
batch never interact, so the gradient of the summed loss at a layer's
pre-activation row ``i`` is exactly the gradient of sample ``i``'s own loss,
and the weight gradient of that sample is ``outer(delta_i, input_i)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn_core as nn
from .errors import UsageError
from .model import LayerIO, Wiring, forward
from .nn_core import ParamStore

log = logging.getLogger(__name__)

CSV_COLUMNS = ("run_id", "epoch", "side", "layer", "fisher", "grad_sq_norm", "param_count")
MIN_PROBE_BATCH = 32


@dataclass
class LayerFisher:
    side: str
    layer: int
    fisher: float
    grad_sq_norm: float
    param_count: int
    zero_gradient: bool = False

    @property
    def network(self) -> str:
        """Which network the layer belongs to; latent heads are part of the encoder."""
        return "decoder" if self.side == "decoder" else "encoder"


def _weighted_mean(records: list[LayerFisher]) -> float:
    total = sum(r.param_count for r in records)
    if total == 0:
        return 0.0
    return float(sum(r.fisher * r.param_count for r in records) / total)


@dataclass
class FisherReport:
    run_id: str
    epoch: int
    layers: list[LayerFisher] = field(default_factory=list)

    def network(self, name: str) -> list[LayerFisher]:
        return [r for r in self.layers if r.network == name]

    @property
    def encoder_mean(self) -> float:
        return _weighted_mean(self.network("encoder"))

    @property
    def decoder_mean(self) -> float:
        return _weighted_mean(self.network("decoder"))

    @property
    def overall_mean(self) -> float:
        return _weighted_mean(self.layers)

    @property
    def flagged(self) -> list[int]:
        return [r.layer for r in self.layers if r.zero_gradient]

    def rows(self) -> list[dict]:
        return [
            {
                "run_id": self.run_id,
                "epoch": self.epoch,
                "side": r.side,
                "layer": r.layer,
                "fisher": repr(r.fisher),
                "grad_sq_norm": repr(r.grad_sq_norm),
                "param_count": r.param_count,
            }
            for r in self.layers
        ]

    def write_csv(self, path: str | Path, append: bool = False) -> None:
        path = Path(path)
        fresh = not append or not path.exists()
        with path.open("w" if fresh else "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            if fresh:
                writer.writeheader()
            writer.writerows(self.rows())


def read_fisher_csv(path: str | Path) -> list[FisherReport]:
    """Group the rows of a fisher CSV back into one report per epoch."""
    reports: dict[tuple[str, int], FisherReport] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["run_id"], int(row["epoch"]))
            report = reports.setdefault(key, FisherReport(*key))
            report.layers.append(
                LayerFisher(
                    side=row["side"],
                    layer=int(row["layer"]),
                    fisher=float(row["fisher"]),
                    grad_sq_norm=float(row["grad_sq_norm"]),
                    param_count=int(row["param_count"]),
                    zero_gradient=float(row["fisher"]) == 0.0,
                )
            )
    return list(reports.values())


def layer_fisher(
    params: ParamStore,
    wiring: Wiring,
    batch: np.ndarray,
    eps: np.ndarray,
    *,
    run_id: str = "",
    epoch: int = 0,
    loss_scale: float = 1.0,
    min_batch: int = MIN_PROBE_BATCH,
) -> FisherReport:
    """Diagonal empirical Fisher per layer on a fixed batch and fixed noise.

    ``loss_scale`` multiplies the per-sample loss before differentiation.
    ``min_batch`` guards estimator variance; lower it only for diagnostics.
    """
    batch = np.asarray(batch, dtype=np.float64)
    n = batch.shape[0]
    if n < min_batch:
        raise UsageError(f"probe batch has {n} samples; at least {min_batch} are required")
    records: list[LayerIO] = []
    terms, _ = forward(params, wiring, batch, eps, records)
    per_sample = nn.scale(terms.sample_loss(), loss_scale)
    nn.backward(nn.sum(per_sample))

    report = FisherReport(run_id=run_id, epoch=epoch)
    report.layers.extend(summarize_layer(rec, n) for rec in records)
    params.zero_grad()
    report.layers.sort(key=lambda r: r.layer)
    return report


def _deltas(rec: LayerIO) -> tuple[np.ndarray, np.ndarray]:
    delta = rec.preact.grad if rec.preact.grad is not None else np.zeros_like(rec.preact.data)
    return delta, rec.inputs.data


def diagonal_fisher(rec: LayerIO) -> tuple[np.ndarray, np.ndarray]:
    """Batch mean of squared per-sample gradients for each weight and bias entry.

    Call after ``backward`` on the *sum* of per-sample losses.
    """
    delta, x = _deltas(rec)
    n = delta.shape[0]
    return (delta * delta).T @ (x * x) / n, (delta * delta).mean(axis=0)


def summarize_layer(rec: LayerIO, n: int) -> LayerFisher:
    """Mean diagonal Fisher of one layer plus its full-batch gradient norm."""
    layer = rec.layer
    delta, x = _deltas(rec)
    sq = (delta * delta).sum(axis=1) * ((x * x).sum(axis=1) + 1.0)
    fisher = float(sq.mean() / layer.param_count)
    gw = layer.weight.grad if layer.weight.grad is not None else 0.0
    gb = layer.bias.grad if layer.bias.grad is not None else 0.0
    grad_sq = float((np.sum(gw * gw) + np.sum(gb * gb)) / (n * n))
    zero = not np.any(delta)
    if zero:
        log.warning("layer %d (%s) received an all-zero gradient", layer.index, layer.side)
    return LayerFisher(layer.side, layer.index, fisher, grad_sq, layer.param_count, zero)


@dataclass
class PairRatio:
    network: str
    layer: int
    next_layer: int
    measured: float
    predicted: float
    # (g_l / g_{l+1})^2 with raw layer gradient norms, as the recurrence is written
    literal: float

    @property
    def discrepancy(self) -> float:
        return abs(self.measured - self.predicted) / abs(self.predicted)


@dataclass
class RecurrenceDiagnostic:
    pairs: list[PairRatio]
    skipped: list[tuple[int, int]]
    decays: dict[str, list[bool]]

    def decay_rate(self, network: str | None = None) -> float:
        """Fraction of backprop-adjacent pairs whose Fisher does not grow away from the loss."""
        flags = (
            [f for fs in self.decays.values() for f in fs] if network is None else self.decays.get(network, [])
        )
        return float(np.mean(flags)) if flags else float("nan")

    @property
    def max_discrepancy(self) -> float:
        return max((p.discrepancy for p in self.pairs), default=0.0)


def recurrence_check(report: FisherReport) -> RecurrenceDiagnostic:
    """Compare measured Fisher ratios of adjacent layers with gradient-norm ratios.

    Chains run in backprop order: each step moves one layer further from the
    loss (from the latent head toward the input in the encoder, from the
    output layer toward ``z`` in the decoder). The predicted ratio transports
    Fisher one step using the per-parameter RMS of the full-batch gradient.
    With a single sample both sides reduce to the same squared-gradient ratio.
    """
    pairs: list[PairRatio] = []
    skipped: list[tuple[int, int]] = []
    decays: dict[str, list[bool]] = {}
    for network in ("encoder", "decoder"):
        chain = sorted(report.network(network), key=lambda r: r.layer, reverse=True)
        for a, b in zip(chain, chain[1:]):
            decays.setdefault(network, []).append(b.fisher <= a.fisher)
            if a.fisher == 0.0 or a.grad_sq_norm == 0.0 or b.grad_sq_norm == 0.0:
                skipped.append((a.layer, b.layer))
                continue
            rms_a = a.grad_sq_norm / a.param_count
            rms_b = b.grad_sq_norm / b.param_count
            pairs.append(
                PairRatio(
                    network=network,
                    layer=a.layer,
                    next_layer=b.layer,
                    measured=b.fisher / a.fisher,
                    predicted=rms_b / rms_a,
                    literal=a.grad_sq_norm / b.grad_sq_norm,
                )
            )
    return RecurrenceDiagnostic(pairs, skipped, decays)


@dataclass
class GainTable:
    rows: list[tuple[str, int, float]]
    encoder_gain: float
    decoder_gain: float
    overall_gain: float


def skip_gain(report_skip: FisherReport, report_plain: FisherReport) -> GainTable:
    """Per-layer Fisher difference between a skip network and its plain twin."""
    key_skip = [(r.side, r.layer, r.param_count) for r in report_skip.layers]
    key_plain = [(r.side, r.layer, r.param_count) for r in report_plain.layers]
    if key_skip != key_plain:
        raise UsageError("reports are not architecturally aligned: layer sets differ")
    rows = [(a.side, a.layer, a.fisher - b.fisher) for a, b in zip(report_skip.layers, report_plain.layers)]
    return GainTable(
        rows=rows,
        encoder_gain=report_skip.encoder_mean - report_plain.encoder_mean,
        decoder_gain=report_skip.decoder_mean - report_plain.decoder_mean,
        overall_gain=report_skip.overall_mean - report_plain.overall_mean,
    )
