"""Encoder/decoder MLPs with configurable skip topology and the ELBO objective."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn_core as nn
from .errors import ConfigurationError, InputError, NumericError
from .nn_core import Layer, ParamStore, Tensor

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0
LIKELIHOODS = ("bernoulli", "diagonal_gaussian")
_LONG_RE = re.compile(r"^long\(\s*(\d+)\s*,\s*(\d+)\s*\)$")


@dataclass(frozen=True)
class SkipSpec:
    """Skip pattern on one side: ``none``, ``every_layer`` or ``long(a, b)``."""

    kind: str = "none"
    source: int | None = None
    target: int | None = None

    @classmethod
    def parse(cls, text: str) -> "SkipSpec":
        text = text.strip().lower()
        if text in ("none", "every_layer"):
            return cls(text)
        m = _LONG_RE.match(text)
        if m:
            return cls("long", int(m.group(1)), int(m.group(2)))
        raise ConfigurationError(f"bad skip mode {text!r}; use none, every_layer or long(a,b)")

    def __str__(self) -> str:
        if self.kind == "long":
            return f"long({self.source},{self.target})"
        return self.kind

    def edges(self, depth: int) -> list[tuple[int, int]]:
        if self.kind == "none":
            return []
        if self.kind == "every_layer":
            return [(l - 1, l) for l in range(2, depth + 1)]
        return [(self.source, self.target)]

    def check(self, depth: int, side: str) -> None:
        if self.kind not in ("none", "every_layer", "long"):
            raise ConfigurationError(f"{side}: unknown skip kind {self.kind!r}")
        if self.kind == "long":
            a, b = self.source, self.target
            if a is None or b is None or not (0 < a < b <= depth) or b - a < 2:
                raise ConfigurationError(
                    f"{side}: long skip ({a}, {b}) needs 0 < from < to <= depth={depth} and to - from >= 2"
                )


@dataclass(frozen=True)
class NetworkConfig:
    encoder_depth: int
    decoder_depth: int
    hidden_width: int = 500
    latent_dim: int = 50
    input_dim: int = 784
    encoder_skip: SkipSpec = field(default_factory=SkipSpec)
    decoder_skip: SkipSpec = field(default_factory=SkipSpec)
    activation: str = "tanh"
    likelihood: str = "bernoulli"
    # per-layer widths; None means hidden_width everywhere
    encoder_widths: tuple[int, ...] | None = None
    decoder_widths: tuple[int, ...] | None = None

    def widths(self, side: str) -> tuple[int, ...]:
        depth = self.encoder_depth if side == "encoder" else self.decoder_depth
        given = self.encoder_widths if side == "encoder" else self.decoder_widths
        return tuple(given) if given is not None else (self.hidden_width,) * depth

    def validate(self) -> None:
        for name in ("encoder_depth", "decoder_depth", "hidden_width", "latent_dim", "input_dim"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.activation not in nn.ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.likelihood not in LIKELIHOODS:
            raise ConfigurationError(f"unknown likelihood {self.likelihood!r}")
        for side, depth, skip in (
            ("encoder", self.encoder_depth, self.encoder_skip),
            ("decoder", self.decoder_depth, self.decoder_skip),
        ):
            skip.check(depth, side)
            widths = self.widths(side)
            if len(widths) != depth or min(widths) < 1:
                raise ConfigurationError(f"{side}: need {depth} positive widths, got {widths}")


PRESETS = ("vae1l", "vae11l", "vae-qpp", "vae-ppp", "scvae", "scvae-l")
PRESET_LABELS = {
    "vae1l": "VAE(1L)",
    "vae11l": "VAE(11L)",
    "vae-qpp": "VAE(q++)",
    "vae-ppp": "VAE(p++)",
    "scvae": "SCVAE",
    "scvae-l": "SCVAE-L",
}


def preset(name: str, deep_depth: int = 11, **overrides) -> NetworkConfig:
    """Named architecture; ``deep_depth`` replaces 11 for desk-scale runs."""
    key = name.strip().lower()
    d = deep_depth
    every = SkipSpec("every_layer")
    table = {
        "vae1l": dict(encoder_depth=1, decoder_depth=1),
        "vae11l": dict(encoder_depth=d, decoder_depth=d),
        "vae-qpp": dict(encoder_depth=d, decoder_depth=1),
        "vae-ppp": dict(encoder_depth=1, decoder_depth=d),
        "scvae": dict(encoder_depth=d, decoder_depth=d, encoder_skip=every, decoder_skip=every),
        "scvae-l": dict(encoder_depth=d, decoder_depth=d, encoder_skip=SkipSpec("long", 1, d)),
    }
    if key not in table:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    config = NetworkConfig(**{**table[key], **overrides})
    config.validate()
    return config


@dataclass
class SkipEdge:
    side: str
    source: int
    target: int
    # frozen width adapter; None means identity
    projection: np.ndarray | None = None


@dataclass
class Wiring:
    """Executable plan: which layer belongs where and which skips feed it."""

    config: NetworkConfig
    encoder_layers: list[Layer]
    head: Layer
    decoder_layers: list[Layer]
    output: Layer
    edges: list[SkipEdge]

    def edges_into(self, side: str, target: int) -> list[SkipEdge]:
        return [e for e in self.edges if e.side == side and e.target == target]


@dataclass
class GaussianLatent:
    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ConfigurationError(f"mu {list(self.mu.shape)} vs log_var {list(self.log_var.shape)}")


@dataclass
class LayerIO:
    """Input and pre-activation of one affine layer in a forward pass."""

    layer: Layer
    inputs: Tensor
    preact: Tensor


@dataclass
class ElboTerms:
    """Batch-mean reconstruction and KL terms plus their per-sample values."""

    sample_reconstruction: Tensor
    sample_kl: Tensor

    @property
    def reconstruction(self) -> float:
        return float(self.sample_reconstruction.data.mean())

    @property
    def kl(self) -> float:
        return float(self.sample_kl.data.mean())

    @property
    def elbo(self) -> float:
        return self.reconstruction - self.kl

    def sample_loss(self) -> Tensor:
        """Per-sample negative ELBO, shape [batch]."""
        return self.sample_kl - self.sample_reconstruction

    def loss(self) -> Tensor:
        """Scalar to minimise: batch mean of -ELBO."""
        return nn.mean(self.sample_loss())


def build_network(config: NetworkConfig, seed: int) -> tuple[ParamStore, Wiring]:
    config.validate()
    rng = np.random.default_rng(seed)
    params = ParamStore()
    enc_widths = config.widths("encoder")
    dec_widths = config.widths("decoder")

    enc_layers = []
    n_in = config.input_dim
    for w in enc_widths:
        enc_layers.append(params.add("encoder", n_in, w, rng))
        n_in = w
    head = params.add("latent-head", n_in, 2 * config.latent_dim, rng)

    dec_layers = []
    n_in = config.latent_dim
    for w in dec_widths:
        dec_layers.append(params.add("decoder", n_in, w, rng))
        n_in = w
    out_dim = config.input_dim * (2 if config.likelihood == "diagonal_gaussian" else 1)
    output = params.add("decoder", n_in, out_dim, rng)

    edges = []
    for side, widths, skip in (
        ("encoder", enc_widths, config.encoder_skip),
        ("decoder", dec_widths, config.decoder_skip),
    ):
        for source, target in skip.edges(len(widths)):
            n_src, n_dst = widths[source - 1], widths[target - 1]
            proj = None
            if n_src != n_dst:
                proj = rng.uniform(-1.0, 1.0, size=(n_dst, n_src)) * np.sqrt(3.0 / n_src)
            edges.append(SkipEdge(side, source, target, proj))

    params.validate()
    return params, Wiring(config, enc_layers, head, dec_layers, output, edges)


def _run_side(
    side: str,
    layers: list[Layer],
    wiring: Wiring,
    h0: Tensor,
    records: list[LayerIO] | None,
) -> list[Tensor]:
    kind = wiring.config.activation
    hs = [h0]
    for l, layer in enumerate(layers, start=1):
        pre = nn.affine(hs[-1], layer.weight, layer.bias)
        if records is not None:
            records.append(LayerIO(layer, hs[-1], pre))
        h = nn.activation(kind, pre)
        for edge in wiring.edges_into(side, l):
            src = hs[edge.source]
            if edge.projection is not None:
                src = nn.affine(src, Tensor(edge.projection))
            h = h + src
        if not np.isfinite(h.data).all():
            raise NumericError(f"non-finite activations in {side} layer {l}")
        hs.append(h)
    return hs[1:]


def encode(
    params: ParamStore,
    wiring: Wiring,
    x,
    records: list[LayerIO] | None = None,
) -> tuple[GaussianLatent, list[Tensor]]:
    """Map inputs to posterior parameters; also return every hidden output."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 2 or x.shape[1] != wiring.config.input_dim:
        raise ConfigurationError(f"encoder input must be [batch, {wiring.config.input_dim}], got {list(x.shape)}")
    trace = _run_side("encoder", wiring.encoder_layers, wiring, x, records)
    last = trace[-1]
    stats = nn.affine(last, wiring.head.weight, wiring.head.bias)
    if records is not None:
        records.append(LayerIO(wiring.head, last, stats))
    s = wiring.config.latent_dim
    mu = nn.columns(stats, 0, s)
    log_var = nn.clip(nn.columns(stats, s, 2 * s), LOG_VAR_MIN, LOG_VAR_MAX)
    if not np.isfinite(stats.data).all():
        raise NumericError("non-finite values in the latent head")
    return GaussianLatent(mu, log_var), trace


def reparameterize(latent: GaussianLatent, eps) -> Tensor:
    """``mu + exp(log_var / 2) * eps`` with ``eps`` supplied by the caller."""
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if eps.shape != latent.mu.shape:
        raise ConfigurationError(f"eps {list(eps.shape)} vs latent {list(latent.mu.shape)}")
    sigma = nn.exp(nn.scale(latent.log_var, 0.5))
    return latent.mu + sigma * eps


def decode(
    params: ParamStore,
    wiring: Wiring,
    z,
    records: list[LayerIO] | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """Map latent codes to likelihood parameters (logits for Bernoulli)."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.data.ndim != 2 or z.shape[1] != wiring.config.latent_dim:
        raise ConfigurationError(f"decoder input must be [batch, {wiring.config.latent_dim}], got {list(z.shape)}")
    trace = _run_side("decoder", wiring.decoder_layers, wiring, z, records)
    last = trace[-1]
    out = nn.affine(last, wiring.output.weight, wiring.output.bias)
    if records is not None:
        records.append(LayerIO(wiring.output, last, out))
    if not np.isfinite(out.data).all():
        raise NumericError("non-finite values in the decoder output layer")
    return out, trace


def log_likelihood(recon: Tensor, x: np.ndarray, likelihood: str) -> Tensor:
    """Per-sample ``log p(x | z)`` for decoder output ``recon``."""
    if likelihood == "bernoulli":
        return nn.bernoulli_log_likelihood(recon, x)
    d = x.shape[1]
    loc = nn.columns(recon, 0, d)
    log_var = nn.clip(nn.columns(recon, d, 2 * d), LOG_VAR_MIN, LOG_VAR_MAX)
    return nn.gaussian_log_likelihood(loc, log_var, x)


def check_pixels(x: np.ndarray) -> None:
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise InputError(f"pixel values must lie in [0, 1], found range [{x.min()}, {x.max()}]")


def elbo(x, recon: Tensor, latent: GaussianLatent, likelihood: str = "bernoulli") -> ElboTerms:
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    check_pixels(x)
    return ElboTerms(log_likelihood(recon, x, likelihood), nn.gaussian_kl(latent.mu, latent.log_var))


def forward(
    params: ParamStore,
    wiring: Wiring,
    x: np.ndarray,
    eps: np.ndarray,
    records: list[LayerIO] | None = None,
) -> tuple[ElboTerms, GaussianLatent]:
    """Full encode, sample, decode pass returning the ELBO terms."""
    latent, _ = encode(params, wiring, x, records)
    z = reparameterize(latent, eps)
    recon, _ = decode(params, wiring, z, records)
    return elbo(x, recon, latent, wiring.config.likelihood), latent


def with_overrides(config: NetworkConfig, **changes) -> NetworkConfig:
    out = replace(config, **changes)
    out.validate()
    return out
