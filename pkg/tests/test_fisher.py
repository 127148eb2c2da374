import numpy as np
import pytest

from scvae import nn_core as nn
from scvae.errors import UsageError
from scvae.fisher import (
    FisherReport,
    LayerFisher,
    diagonal_fisher,
    layer_fisher,
    read_fisher_csv,
    recurrence_check,
    skip_gain,
    summarize_layer,
)
from scvae.model import LayerIO, NetworkConfig, SkipSpec, build_network, forward
from scvae.nn_core import ParamStore, Tensor


def _batch(n=48, d=5, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(n, d)), rng.standard_normal((n, 2))


def _per_sample_oracle(params, wiring, x, eps):
    """Loop over samples one at a time and average squared gradients per layer."""
    sums = np.zeros(len(params.layers))
    for i in range(x.shape[0]):
        terms, _ = forward(params, wiring, x[i:i + 1], eps[i:i + 1])
        nn.backward(nn.sum(terms.sample_loss()))
        for j, layer in enumerate(params.layers):
            sums[j] += np.sum(layer.weight.grad**2) + np.sum(layer.bias.grad**2)
    counts = np.array([layer.param_count for layer in params.layers])
    return sums / x.shape[0] / counts


@pytest.mark.parametrize("skip", ["none", "every_layer"])
def test_batched_fisher_matches_per_sample_loop(tiny_config, skip):
    config = NetworkConfig(**{**tiny_config.__dict__, "encoder_skip": SkipSpec.parse(skip),
                              "decoder_skip": SkipSpec.parse(skip)})
    params, wiring = build_network(config, seed=1)
    x, eps = _batch()
    report = layer_fisher(params, wiring, x, eps)
    oracle = _per_sample_oracle(params, wiring, x, eps)
    np.testing.assert_allclose([r.fisher for r in report.layers], oracle, rtol=1e-10)


def test_untrained_model_has_positive_fisher_everywhere(tiny_net):
    params, wiring = tiny_net
    x, eps = _batch()
    report = layer_fisher(params, wiring, x, eps)
    assert all(r.fisher > 0 for r in report.layers)
    assert not report.flagged


def test_dead_relu_layer_reports_zero(pixels):
    config = NetworkConfig(encoder_depth=2, decoder_depth=1, hidden_width=4, latent_dim=2, input_dim=5,
                           activation="relu")
    params, wiring = build_network(config, seed=0)
    wiring.encoder_layers[0].bias.data[:] = -100.0
    x, eps = _batch()
    report = layer_fisher(params, wiring, x, eps)
    first = report.layers[0]
    assert first.fisher == 0.0 and first.zero_gradient
    assert first.layer in report.flagged


def test_small_batch_rejected(tiny_net):
    params, wiring = tiny_net
    x, eps = _batch(n=8)
    with pytest.raises(UsageError):
        layer_fisher(params, wiring, x, eps)


def test_scale_law(tiny_net):
    params, wiring = tiny_net
    x, eps = _batch()
    base = layer_fisher(params, wiring, x, eps)
    scaled = layer_fisher(params, wiring, x, eps, loss_scale=3.0)
    for a, b in zip(base.layers, scaled.layers):
        assert b.fisher == pytest.approx(9.0 * a.fisher, rel=1e-9)


def test_report_means(tiny_net):
    params, wiring = tiny_net
    x, eps = _batch()
    report = layer_fisher(params, wiring, x, eps)
    enc = [r for r in report.layers if r.side in ("encoder", "latent-head")]
    expected = sum(r.fisher * r.param_count for r in enc) / sum(r.param_count for r in enc)
    assert report.encoder_mean == pytest.approx(expected)
    total = sum(r.param_count for r in report.layers)
    assert report.overall_mean == pytest.approx(sum(r.fisher * r.param_count for r in report.layers) / total)
    assert all(r.fisher >= 0 for r in report.layers)


def test_logistic_model_matches_analytic_fisher():
    # p(y=1|x) = sigmoid(w x); Fisher of w is x^2 p (1 - p)
    rng = np.random.default_rng(3)
    store = ParamStore()
    layer = store.add("encoder", 1, 1, rng)
    layer.weight.data[:] = 0.8
    layer.bias.data[:] = 0.0
    x_val, n = 1.7, 10**5
    p = 1.0 / (1.0 + np.exp(-0.8 * x_val))
    y = (rng.random((n, 1)) < p).astype(float)
    x = Tensor(np.full((n, 1), x_val))
    logits = nn.affine(x, layer.weight, layer.bias)
    nn.backward(nn.neg(nn.sum(nn.bernoulli_log_likelihood(logits, y))))
    diag_w, diag_b = diagonal_fisher(LayerIO(layer, x, logits))
    assert diag_w[0, 0] == pytest.approx(x_val**2 * p * (1 - p), rel=0.02)
    assert diag_b[0] == pytest.approx(p * (1 - p), rel=0.02)
    summary = summarize_layer(LayerIO(layer, x, logits), n)
    assert summary.fisher == pytest.approx((diag_w.sum() + diag_b.sum()) / 2, rel=1e-12)


def _report(fishers, norms=None, side="encoder"):
    norms = norms or fishers
    return FisherReport("r", 0, [LayerFisher(side, i + 1, f, g, 10) for i, (f, g) in enumerate(zip(fishers, norms))])


def test_recurrence_identical_layers():
    diag = recurrence_check(_report([2.0, 2.0]))
    (pair,) = diag.pairs
    assert pair.measured == pair.predicted == 1.0


def test_recurrence_zero_fisher_pair_skipped():
    diag = recurrence_check(_report([0.0, 1.0, 0.5], norms=[0.0, 1.0, 0.5]))
    assert (2, 1) in diag.skipped
    assert len(diag.pairs) == 1


def test_recurrence_single_sample_self_consistent(tiny_net):
    params, wiring = tiny_net
    x, eps = _batch(n=1)
    report = layer_fisher(params, wiring, x, eps, min_batch=1)
    diag = recurrence_check(report)
    assert diag.pairs
    assert diag.max_discrepancy < 1e-6


def test_decay_rate_counts_non_increasing_pairs():
    # listed input side first; the chain is walked from the loss end, 4 -> 3 -> 3.5 -> 1
    diag = recurrence_check(_report([1.0, 3.5, 3.0, 4.0]))
    assert diag.decay_rate("encoder") == pytest.approx(2 / 3)


def test_skip_gain_self_comparison_is_zero(tiny_net):
    params, wiring = tiny_net
    x, eps = _batch()
    report = layer_fisher(params, wiring, x, eps)
    table = skip_gain(report, report)
    assert all(g == 0.0 for _, _, g in table.rows)
    assert table.overall_gain == 0.0


def test_skip_gain_misaligned():
    with pytest.raises(UsageError):
        skip_gain(_report([1.0, 2.0]), _report([1.0]))


def test_skip_edges_do_not_change_parameter_counts(tiny_config):
    plain = NetworkConfig(**{**tiny_config.__dict__, "encoder_skip": SkipSpec()})
    a, _ = build_network(tiny_config, seed=0)
    b, _ = build_network(plain, seed=0)
    assert [l.param_count for l in a.layers] == [l.param_count for l in b.layers]


def test_csv_round_trip(tmp_path, tiny_net):
    params, wiring = tiny_net
    x, eps = _batch()
    first = layer_fisher(params, wiring, x, eps, run_id="demo", epoch=0)
    second = layer_fisher(params, wiring, x, eps, run_id="demo", epoch=1)
    path = tmp_path / "fisher_demo.csv"
    first.write_csv(path)
    second.write_csv(path, append=True)
    header = path.read_text().splitlines()[0]
    assert header == "run_id,epoch,side,layer,fisher,grad_sq_norm,param_count"
    back = read_fisher_csv(path)
    assert [r.epoch for r in back] == [0, 1]
    assert [r.fisher for r in back[1].layers] == [r.fisher for r in second.layers]
