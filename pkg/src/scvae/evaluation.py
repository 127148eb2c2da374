"""Downstream metrics: importance-weighted NLL and latent-code classification."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import nn_core as nn
from .errors import NumericError, UsageError
from .model import Wiring, decode, encode, log_likelihood
from .nn_core import ParamStore

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class EvalMetrics:
    nll: float
    accuracy: float
    n_importance_samples: int
    classifier_epochs: int


def importance_log_likelihood(
    params: ParamStore,
    wiring: Wiring,
    images: np.ndarray,
    S: int,
    seed: int,
    batch_size: int = 100,
    eps: np.ndarray | None = None,
) -> np.ndarray:
    """Per-image ``log (1/S) sum_s p(x|z_s) p(z_s) / q(z_s|x)``.

    ``eps`` of shape [n, S, latent] overrides the seeded standard normal draws.
    """
    if S < 1:
        raise UsageError(f"need at least one importance sample, got S={S}")
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    s_dim = wiring.config.latent_dim
    rng = np.random.default_rng(seed)
    out = np.empty(n)
    with nn.no_grad():
        for start in range(0, n, batch_size):
            x = images[start:start + batch_size]
            b = x.shape[0]
            latent, _ = encode(params, wiring, x)
            mu, lv = latent.mu.data, latent.log_var.data
            e = rng.standard_normal((b, S, s_dim)) if eps is None else eps[start:start + b]
            z = mu[:, None, :] + np.exp(0.5 * lv)[:, None, :] * e
            recon, _ = decode(params, wiring, z.reshape(b * S, s_dim))
            log_px = log_likelihood(recon, np.repeat(x, S, axis=0), wiring.config.likelihood).data
            log_px = log_px.reshape(b, S)
            log_pz = -0.5 * (z * z + LOG_2PI).sum(axis=2)
            log_qz = -0.5 * (e * e + LOG_2PI + lv[:, None, :]).sum(axis=2)
            log_w = log_px + log_pz - log_qz
            bad = ~np.isfinite(log_w)
            if bad.any():
                i, s = np.argwhere(bad)[0]
                raise NumericError(f"non-finite importance weight for image {start + i}, sample {s}")
            out[start:start + b] = logsumexp(log_w, axis=1) - np.log(S)
    return out


def estimate_nll(
    params: ParamStore,
    wiring: Wiring,
    images: np.ndarray,
    S: int,
    seed: int,
    batch_size: int = 100,
) -> float:
    """Mean importance-weighted negative log-likelihood in nats per image."""
    return float(-importance_log_likelihood(params, wiring, images, S, seed, batch_size).mean())


def posterior_means(params: ParamStore, wiring: Wiring, images: np.ndarray, batch_size: int = 500):
    """Posterior ``mu`` and ``log_var`` for every image, in input order."""
    mus, lvs = [], []
    with nn.no_grad():
        for start in range(0, images.shape[0], batch_size):
            latent, _ = encode(params, wiring, images[start:start + batch_size])
            mus.append(latent.mu.data)
            lvs.append(latent.log_var.data)
    return np.concatenate(mus), np.concatenate(lvs)


class LinearSVM:
    """One-vs-rest linear SVM fitted by minibatch subgradient descent.

    Minimises ``mean(max(0, 1 - y * (w.x + b))) + reg / 2 * |w|^2`` per class
    on standardised features.
    """

    def __init__(self, reg: float = 1e-3, lr: float = 0.1, epochs: int = 30, batch_size: int = 100, seed: int = 0):
        self.reg = reg
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LinearSVM":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 1e-12, std, 1.0)
        Z = (X - self.mean_) / self.scale_
        n, d = Z.shape
        k = self.classes_.size
        targets = np.where(y[:, None] == self.classes_[None, :], 1.0, -1.0)
        self.coef_ = np.zeros((k, d))
        self.intercept_ = np.zeros(k)
        rng = np.random.default_rng(self.seed)
        for epoch in range(self.epochs):
            lr = self.lr / np.sqrt(1.0 + epoch)
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                zb, tb = Z[idx], targets[idx]
                margin = tb * (zb @ self.coef_.T + self.intercept_)
                active = (margin < 1.0) * tb  # [b, k]
                gw = -(active.T @ zb) / idx.size + self.reg * self.coef_
                gb = -active.sum(axis=0) / idx.size
                self.coef_ -= lr * gw
                self.intercept_ -= lr * gb
        return self

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.mean_) / self.scale_
        return Z @ self.coef_.T + self.intercept_

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def latent_classify(
    train_latents: np.ndarray,
    train_labels: np.ndarray,
    test_latents: np.ndarray,
    test_labels: np.ndarray,
    epochs: int = 30,
    seed: int = 0,
) -> float:
    """Test accuracy of a linear SVM trained on posterior means."""
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)
    if train_latents.shape[0] != train_labels.shape[0] or test_latents.shape[0] != test_labels.shape[0]:
        raise UsageError("latents and labels are not aligned")
    missing = sorted(set(np.unique(test_labels)) - set(np.unique(train_labels)))
    if missing:
        raise UsageError(f"classes {missing} occur in test labels but not in training labels")
    clf = LinearSVM(epochs=epochs, seed=seed).fit(train_latents, train_labels)
    return float(np.mean(clf.predict(test_latents) == test_labels))


def export_latents(
    params: ParamStore,
    wiring: Wiring,
    images: np.ndarray,
    labels: np.ndarray,
    path: str | Path,
) -> None:
    """Write ``label,mu_1..mu_s,logvar_1..logvar_s`` rows in input order."""
    mu, lv = posterior_means(params, wiring, np.asarray(images, dtype=np.float64))
    s = mu.shape[1]
    header = ["label"] + [f"mu_{j}" for j in range(1, s + 1)] + [f"logvar_{j}" for j in range(1, s + 1)]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for label, m, v in zip(labels, mu, lv):
            writer.writerow([int(label)] + [repr(float(a)) for a in m] + [repr(float(a)) for a in v])


def read_latents(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`export_latents`: labels, mu, log_var."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        s = (len(header) - 1) // 2
        rows = [[float(v) for v in row] for row in reader]
    arr = np.array(rows, dtype=np.float64).reshape(-1, 1 + 2 * s)
    return arr[:, 0].astype(np.int64), arr[:, 1:1 + s], arr[:, 1 + s:]


def write_metrics(path: str | Path, metrics: EvalMetrics, **extra) -> None:
    payload = {"nll": metrics.nll, "accuracy": metrics.accuracy, "S": metrics.n_importance_samples}
    payload.update(extra)
    payload["classifier_epochs"] = metrics.classifier_epochs
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def metrics_dict(metrics: EvalMetrics) -> dict:
    return asdict(metrics)
