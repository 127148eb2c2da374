"""Run configuration, the training loop, and the depth-sweep and preset-table drivers."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import nn_core as nn
from .data_io import DatasetSplit, load_mnist, read_split, synth_dataset
from .errors import ConfigurationError, NumericError
from .evaluation import EvalMetrics, estimate_nll, latent_classify, posterior_means, write_metrics
from .fisher import FisherReport, layer_fisher
from .model import (
    PRESET_LABELS,
    PRESETS,
    NetworkConfig,
    SkipSpec,
    Wiring,
    build_network,
    forward,
    preset,
)
from .nn_core import OptimizerState, ParamStore

log = logging.getLogger(__name__)

DATASETS = ("synth", "mnist", "idx")
PROBE_NOISE_STREAM = 7
VAL_NOISE_STREAM = 11


@dataclass
class RunConfig:
    dataset: str
    preset: str | None = None
    data_dir: str | None = None
    synth_n_per_class: int = 250
    synth_n_classes: int = 4
    synth_d: int = 64
    synth_seed: int = 0
    encoder_depth: int | None = None
    decoder_depth: int | None = None
    encoder_skip: str | None = None
    decoder_skip: str | None = None
    deep_depth: int = 11
    hidden_width: int = 500
    latent_dim: int = 50
    activation: str = "tanh"
    likelihood: str = "bernoulli"
    epochs: int = 20
    batch_size: int = 100
    seed: int = 0
    learning_rate: float = 1e-3
    output_dir: str = "runs"
    fisher_probe_interval: int = 1
    probe_size: int = 1024
    eval_samples: int = 100
    classifier_epochs: int = 30
    run_id: str | None = None
    resume: bool = False
    sweep_depths: tuple[int, ...] = (1, 3, 5, 7, 9, 11)
    sweep_skip_modes: tuple[str, ...] = ("none", "every_layer")
    table1_presets: tuple[str, ...] = PRESETS
    table1_seeds: tuple[int, ...] = (0,)

    @property
    def name(self) -> str:
        if self.run_id:
            return self.run_id
        arch = self.preset or f"e{self.encoder_depth}d{self.decoder_depth}"
        return f"{arch}-s{self.seed}"

    def network_config(self, input_dim: int) -> NetworkConfig:
        shared = dict(
            hidden_width=self.hidden_width,
            latent_dim=self.latent_dim,
            input_dim=input_dim,
            activation=self.activation,
            likelihood=self.likelihood,
        )
        if self.preset:
            base = preset(self.preset, deep_depth=self.deep_depth, **shared)
            changes = {}
            if self.encoder_depth is not None:
                changes["encoder_depth"] = self.encoder_depth
            if self.decoder_depth is not None:
                changes["decoder_depth"] = self.decoder_depth
            if self.encoder_skip is not None:
                changes["encoder_skip"] = SkipSpec.parse(self.encoder_skip)
            if self.decoder_skip is not None:
                changes["decoder_skip"] = SkipSpec.parse(self.decoder_skip)
            config = replace(base, **changes)
        else:
            if self.encoder_depth is None or self.decoder_depth is None:
                raise ConfigurationError("give a preset or both encoder_depth and decoder_depth")
            config = NetworkConfig(
                encoder_depth=self.encoder_depth,
                decoder_depth=self.decoder_depth,
                encoder_skip=SkipSpec.parse(self.encoder_skip or "none"),
                decoder_skip=SkipSpec.parse(self.decoder_skip or "none"),
                **shared,
            )
        config.validate()
        return config

    def validate(self) -> None:
        if self.dataset not in DATASETS:
            raise ConfigurationError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.dataset in ("mnist", "idx") and not self.data_dir:
            raise ConfigurationError(f"dataset = {self.dataset} needs data_dir")
        positive = ("epochs", "batch_size", "fisher_probe_interval", "eval_samples", "deep_depth",
                    "classifier_epochs", "synth_n_per_class", "probe_size")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, value: str):
    kind = _FIELD_TYPES[key]
    if kind in ("int", "int | None"):
        return int(value)
    if kind == "float":
        return float(value)
    if kind == "bool":
        low = value.lower()
        if low not in ("true", "false", "yes", "no", "1", "0"):
            raise ValueError(f"not a boolean: {value!r}")
        return low in ("true", "yes", "1")
    if kind == "tuple[int, ...]":
        return tuple(int(v) for v in value.split(",") if v.strip())
    if kind == "tuple[str, ...]":
        items = tuple(v.strip().lower() for v in _split_top_level(value) if v.strip())
        if key == "table1_presets" and items == ("all",):
            return PRESETS
        return items
    return value


def _split_top_level(value: str) -> list[str]:
    """Split on commas that are not inside parentheses, so long(1,5) survives."""
    parts, depth, current = [], 0, []
    for ch in value:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(current))
            current = []
        else:
            current.append(ch)
    parts.append("".join(current))
    return parts


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: dict = {}
    lines: dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {number}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.lower()
        if key not in _FIELD_TYPES:
            raise ConfigurationError(f"line {number}: unknown key {key!r}")
        try:
            values[key] = _convert(key, value)
        except ValueError as exc:
            raise ConfigurationError(f"line {number}: cannot parse {key} = {value!r} ({exc})") from None
        lines[key] = number
    if "dataset" not in values:
        raise ConfigurationError("dataset is required (synth, mnist or idx)")
    if values.get("preset"):
        values["preset"] = values["preset"].lower()
    config = RunConfig(**values)
    try:
        config.validate()
        for mode in config.sweep_skip_modes:
            SkipSpec.parse(mode)
        for name in config.table1_presets:
            preset(name)
        if config.preset or config.encoder_depth is not None or config.decoder_depth is not None:
            config.network_config(config.synth_d)
    except ConfigurationError as exc:
        msg = str(exc)
        hits = [k for k in lines if k in msg]
        if not hits:
            # skip-spec errors are phrased per network ("encoder: long skip ...")
            hits = [k for k in lines if k.endswith("_skip") and msg.startswith(k[: -len("_skip")])]
        where = lines[max(hits, key=len)] if hits else None
        prefix = f"line {where}: " if where else ""
        raise ConfigurationError(f"{prefix}{exc}") from None
    return config


def load_dataset(config: RunConfig) -> DatasetSplit:
    if config.dataset == "synth":
        return synth_dataset(config.synth_seed, config.synth_n_per_class, config.synth_n_classes, config.synth_d)
    if config.dataset == "idx":
        return read_split(config.data_dir)
    return load_mnist(config.data_dir)


@dataclass
class EpochRecord:
    epoch: int
    train_elbo: float
    val_elbo: float
    wall_time: float = 0.0


@dataclass
class RunLog:
    run_id: str
    epochs: list[EpochRecord] = field(default_factory=list)
    fisher_reports: list[FisherReport] = field(default_factory=list)
    fisher_csv: str | None = None
    checkpoint: str | None = None
    best_checkpoint: str | None = None
    metrics_path: str | None = None
    metrics: EvalMetrics | None = None
    best_epoch: int | None = None

    @property
    def final_fisher(self) -> FisherReport:
        return self.fisher_reports[-1]

    def to_dict(self) -> dict:
        # wall time and directories stay out so reruns are byte-identical wherever they land
        return {
            "run_id": self.run_id,
            "epochs": [{"epoch": e.epoch, "train_elbo": e.train_elbo, "val_elbo": e.val_elbo} for e in self.epochs],
            "fisher_csv": _name(self.fisher_csv),
            "fisher_epochs": [r.epoch for r in self.fisher_reports],
            "checkpoint": _name(self.checkpoint),
            "best_checkpoint": _name(self.best_checkpoint),
            "best_epoch": self.best_epoch,
            "metrics_path": _name(self.metrics_path),
            "metrics": None if self.metrics is None else vars(self.metrics),
        }


def _name(path: str | None) -> str | None:
    """Artifact paths are stored relative to the output directory."""
    return None if path is None else Path(path).name


@dataclass
class Trained:
    """Everything ``train`` produced, including live parameters."""

    log: RunLog
    params: ParamStore
    wiring: Wiring
    best_params: ParamStore


def mean_elbo(params: ParamStore, wiring: Wiring, images: np.ndarray, eps: np.ndarray, batch_size: int = 500) -> float:
    total = 0.0
    with nn.no_grad():
        for start in range(0, images.shape[0], batch_size):
            terms, _ = forward(params, wiring, images[start:start + batch_size], eps[start:start + batch_size])
            total += terms.elbo * min(batch_size, images.shape[0] - start)
    return total / images.shape[0]


def probe_batch(config: RunConfig, split: DatasetSplit, latent_dim: int) -> tuple[np.ndarray, np.ndarray]:
    x = split.val.images[: config.probe_size]
    eps = np.random.default_rng([config.seed, PROBE_NOISE_STREAM]).standard_normal((x.shape[0], latent_dim))
    return x, eps


def evaluate(config: RunConfig, params: ParamStore, wiring: Wiring, split: DatasetSplit) -> EvalMetrics:
    nll = estimate_nll(params, wiring, split.test.images, config.eval_samples, config.seed)
    train_mu, _ = posterior_means(params, wiring, split.train.images)
    test_mu, _ = posterior_means(params, wiring, split.test.images)
    acc = latent_classify(train_mu, split.train.labels, test_mu, split.test.labels,
                          epochs=config.classifier_epochs, seed=config.seed)
    return EvalMetrics(nll=nll, accuracy=acc, n_importance_samples=config.eval_samples,
                       classifier_epochs=config.classifier_epochs)


def _paths(config: RunConfig) -> dict[str, Path]:
    out = Path(config.output_dir)
    run = config.name
    return {
        "fisher": out / f"fisher_{run}.csv",
        "checkpoint": out / f"{run}.scv",
        "best": out / f"{run}.best.scv",
        "optim": out / f"{run}.optim.npz",
        "runlog": out / f"runlog_{run}.json",
        "metrics": out / f"metrics_{run}.json",
    }


def _save_optimizer(state: OptimizerState, path: Path) -> None:
    arrays = {f"m{i}": m for i, m in enumerate(state.m)}
    arrays.update({f"v{i}": v for i, v in enumerate(state.v)})
    with path.open("wb") as fh:
        np.savez(fh, step=np.array(state.step), **arrays)


def _load_optimizer(state: OptimizerState, path: Path) -> None:
    with np.load(path) as data:
        state.step = int(data["step"])
        state.m = [data[f"m{i}"].copy() for i in range(len(state.m))]
        state.v = [data[f"v{i}"].copy() for i in range(len(state.v))]


def _write_runlog(runlog: RunLog, path: Path) -> None:
    path.write_text(json.dumps(runlog.to_dict(), indent=2) + "\n")


def train(config: RunConfig, split: DatasetSplit | None = None) -> Trained:
    """Train on -ELBO with Adam, probing Fisher Information at epoch boundaries."""
    config.validate()
    split = split if split is not None else load_dataset(config)
    net = config.network_config(split.input_dim)
    params, wiring = build_network(net, config.seed)
    best = build_network(net, config.seed)[0]
    state = OptimizerState.for_params(params, lr=config.learning_rate)
    paths = _paths(config)
    paths["fisher"].parent.mkdir(parents=True, exist_ok=True)

    probe_x, probe_eps = probe_batch(config, split, net.latent_dim)
    val_eps = np.random.default_rng([config.seed, VAL_NOISE_STREAM]).standard_normal(
        (len(split.val), net.latent_dim)
    )
    runlog = RunLog(run_id=config.name, fisher_csv=str(paths["fisher"]))
    best_val = -np.inf
    start_epoch = 1

    if config.resume and paths["runlog"].exists() and paths["checkpoint"].exists():
        start_epoch, best_val = _resume(config, paths, params, best, state, runlog)
    else:
        report = layer_fisher(params, wiring, probe_x, probe_eps, run_id=config.name, epoch=0)
        report.write_csv(paths["fisher"])
        runlog.fisher_reports.append(report)

    n = len(split.train)
    for epoch in range(start_epoch, config.epochs + 1):
        tic = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            x = split.train.images[idx]
            eps = rng.standard_normal((idx.size, net.latent_dim))
            terms, _ = forward(params, wiring, x, eps)
            loss = terms.loss()
            if not np.isfinite(loss.data).all():
                _write_runlog(runlog, paths["runlog"])
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            nn.backward(loss)
            nn.adam_step(params, state)
            total += terms.elbo * idx.size
        val_elbo = mean_elbo(params, wiring, split.val.images, val_eps)
        record = EpochRecord(epoch, total / n, val_elbo, time.perf_counter() - tic)
        runlog.epochs.append(record)
        log.info("%s epoch %d train elbo %.4f val elbo %.4f (%.1fs)",
                 config.name, epoch, record.train_elbo, val_elbo, record.wall_time)

        if epoch % config.fisher_probe_interval == 0:
            report = layer_fisher(params, wiring, probe_x, probe_eps, run_id=config.name, epoch=epoch)
            report.write_csv(paths["fisher"], append=True)
            runlog.fisher_reports.append(report)
        if val_elbo > best_val:
            best_val = val_elbo
            best.restore(params.snapshot())
            runlog.best_epoch = epoch
            nn.save_checkpoint(best, paths["best"])
            runlog.best_checkpoint = str(paths["best"])
        nn.save_checkpoint(params, paths["checkpoint"])
        _save_optimizer(state, paths["optim"])
        runlog.checkpoint = str(paths["checkpoint"])
        _write_runlog(runlog, paths["runlog"])

    metrics = evaluate(config, best, wiring, split)
    runlog.metrics = metrics
    runlog.metrics_path = str(paths["metrics"])
    write_metrics(paths["metrics"], metrics, preset=config.preset or "custom", seed=config.seed,
                  epochs=config.epochs)
    _write_runlog(runlog, paths["runlog"])
    return Trained(runlog, params, wiring, best)


def _resume(config, paths, params, best, state, runlog) -> tuple[int, float]:
    from .fisher import read_fisher_csv

    saved = json.loads(paths["runlog"].read_text())
    nn.load_checkpoint(params, paths["checkpoint"])
    _load_optimizer(state, paths["optim"])
    if paths["best"].exists():
        nn.load_checkpoint(best, paths["best"])
    runlog.epochs = [EpochRecord(**e) for e in saved["epochs"]]
    runlog.best_epoch = saved.get("best_epoch")
    if saved.get("best_checkpoint"):
        runlog.best_checkpoint = str(paths["best"])
    done = runlog.epochs[-1].epoch if runlog.epochs else 0
    reports = [r for r in read_fisher_csv(paths["fisher"]) if r.epoch <= done]
    runlog.fisher_reports = reports
    # rewrite so rows from an interrupted epoch do not linger
    for i, r in enumerate(reports):
        r.write_csv(paths["fisher"], append=i > 0)
    best_val = max((e.val_elbo for e in runlog.epochs), default=-np.inf)
    log.info("%s resuming after epoch %d", config.name, done)
    return done + 1, best_val


def load_trained(config: RunConfig, checkpoint: str | Path, split: DatasetSplit) -> tuple[ParamStore, Wiring]:
    params, wiring = build_network(config.network_config(split.input_dim), config.seed)
    nn.load_checkpoint(params, checkpoint)
    return params, wiring


SWEEP_COLUMNS = ("depth", "skip_mode", "seed", "encoder_mean", "decoder_mean", "overall", "nll", "accuracy")


def run_depth_sweep(
    base: RunConfig,
    depths=None,
    skip_modes=None,
    split: DatasetSplit | None = None,
) -> list[dict]:
    """Train each (depth, skip mode) pair with matched seed and epochs."""
    depths = tuple(depths if depths is not None else base.sweep_depths)
    skip_modes = tuple(skip_modes if skip_modes is not None else base.sweep_skip_modes)
    if not depths:
        raise ConfigurationError("depth sweep needs at least one depth")
    split = split if split is not None else load_dataset(base)
    rows = []
    for depth in depths:
        for mode in skip_modes:
            config = replace(
                base,
                preset=None,
                encoder_depth=depth,
                decoder_depth=depth,
                encoder_skip=mode,
                decoder_skip=mode,
                run_id=f"sweep-d{depth}-{mode}-s{base.seed}",
            )
            trained = train(config, split)
            report = trained.log.final_fisher
            rows.append({
                "depth": depth,
                "skip_mode": mode,
                "seed": base.seed,
                "encoder_mean": report.encoder_mean,
                "decoder_mean": report.decoder_mean,
                "overall": report.overall_mean,
                "nll": trained.log.metrics.nll,
                "accuracy": trained.log.metrics.accuracy,
            })
    _write_csv(Path(base.output_dir) / "sweep.csv", SWEEP_COLUMNS, rows)
    return rows


TABLE1_COLUMNS = ("preset", "label", "seeds", "nll", "accuracy", "encoder_fisher", "decoder_fisher")


@dataclass
class Table1:
    rows: list[dict]
    per_seed: dict[str, dict[int, EvalMetrics]]
    fisher: dict[str, dict[int, FisherReport]]

    def render(self) -> str:
        lines = [f"{'Model':<10} {'NLL':>9} {'Acc':>7}", "-" * 28]
        for row in self.rows:
            lines.append(f"{row['label']:<10} {row['nll']:>9.2f} {row['accuracy']:>7.4f}")
        return "\n".join(lines) + "\n"


def run_table1(base: RunConfig, presets=None, seeds=None, split: DatasetSplit | None = None) -> Table1:
    """Train every preset for every seed and average NLL and accuracy."""
    presets = tuple(presets if presets is not None else base.table1_presets)
    seeds = tuple(seeds if seeds is not None else base.table1_seeds)
    split = split if split is not None else load_dataset(base)
    rows, per_seed, fisher = [], {}, {}
    for name in presets:
        per_seed[name], fisher[name] = {}, {}
        for seed in seeds:
            config = replace(base, preset=name, seed=seed, encoder_depth=None, decoder_depth=None,
                             encoder_skip=None, decoder_skip=None, run_id=f"{name}-s{seed}")
            trained = train(config, split)
            per_seed[name][seed] = trained.log.metrics
            fisher[name][seed] = trained.log.final_fisher
        rows.append({
            "preset": name,
            "label": PRESET_LABELS[name],
            "seeds": len(seeds),
            "nll": float(np.mean([m.nll for m in per_seed[name].values()])),
            "accuracy": float(np.mean([m.accuracy for m in per_seed[name].values()])),
            "encoder_fisher": float(np.mean([r.encoder_mean for r in fisher[name].values()])),
            "decoder_fisher": float(np.mean([r.decoder_mean for r in fisher[name].values()])),
        })
    table = Table1(rows, per_seed, fisher)
    out = Path(base.output_dir)
    _write_csv(out / "table1.csv", TABLE1_COLUMNS, rows)
    (out / "table1.txt").write_text(table.render())
    return table


def _write_csv(path: Path, columns, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
