import warnings

import pytest

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from fastapi.testclient import TestClient

from scvae import cli, service
from scvae.errors import NumericError
from scvae.nn_core import read_checkpoint

CONFIG = """dataset = synth
preset = vae1l
synth_n_per_class = 40
hidden_width = 16
latent_dim = 4
epochs = 2
probe_size = 64
eval_samples = 5
classifier_epochs = 5
output_dir = {out}
"""


@pytest.fixture
def client():
    return TestClient(service.app)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(CONFIG.format(out=tmp_path / "out"))
    return path


def test_health_and_presets(client):
    assert client.get("/health").json()["status"] == "ok"
    names = [p["name"] for p in client.get("/presets").json()]
    assert names == ["vae1l", "vae11l", "vae-qpp", "vae-ppp", "scvae", "scvae-l"]


def test_train_then_inspect(client, config_file, tmp_path):
    text = config_file.read_text()
    out = client.post("/train", json={"config": text}).json()
    assert [e["epoch"] for e in out["epochs"]] == [1, 2]
    assert out["final_fisher"]["epoch"] == 2
    ckpt = out["checkpoint"]
    assert read_checkpoint(ckpt)

    metrics = client.post("/eval", json={"config": text, "checkpoint": out["best_checkpoint"]}).json()
    assert metrics["nll"] == pytest.approx(out["metrics"]["nll"])

    fisher = client.post("/fisher", json={"config": text, "checkpoint": ckpt}).json()
    assert [l["fisher"] for l in fisher["layers"]] == [l["fisher"] for l in out["final_fisher"]["layers"]]
    assert fisher["recurrence"]["pairs"]

    target = tmp_path / "lat.csv"
    exp = client.post("/export-latents", json={"config": text, "checkpoint": ckpt, "out": str(target)}).json()
    assert exp["rows"] == 80 and len(target.read_text().splitlines()) == 81


def test_bad_config_is_a_400(client):
    resp = client.post("/train", json={"config": "dataset = synth\nepochs = -3"})
    assert resp.status_code == 400
    assert resp.json()["kind"] == "configuration"
    assert "line 2" in resp.json()["detail"]


def test_missing_checkpoint_is_a_400(client, config_file):
    resp = client.post("/eval", json={"config": config_file.read_text(), "checkpoint": "/nonexistent.scv"})
    assert resp.status_code == 400


def test_numeric_failure_is_tagged(client, config_file, monkeypatch):
    def boom(config):
        raise NumericError("non-finite loss at epoch 1, batch 0")

    monkeypatch.setattr(service, "train", boom)
    resp = client.post("/train", json={"config": config_file.read_text()})
    assert resp.status_code == 500 and resp.json()["kind"] == "numeric"


def test_cli_round_trip(config_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["train", str(config_file)]) == 0
    assert "checkpoint" in capsys.readouterr().out
    ckpt = str(out / "vae1l-s0.scv")
    assert cli.main(["eval", ckpt, str(config_file)]) == 0
    assert cli.main(["fisher", ckpt, str(config_file)]) == 0
    assert "encoder mean" in capsys.readouterr().out
    assert cli.main(["export-latents", ckpt, str(config_file), str(tmp_path / "z.csv")]) == 0
    assert cli.main(["synth", str(config_file), str(tmp_path / "data")]) == 0
    assert (tmp_path / "data" / "train-images.idx").exists()


def test_cli_sweep_and_table(tmp_path, capsys):
    cfg = tmp_path / "sweep.cfg"
    cfg.write_text(CONFIG.format(out=tmp_path) + "epochs = 1\nsweep_depths = 1\ntable1_presets = vae1l\n")
    assert cli.main(["sweep", str(cfg)]) == 0
    assert cli.main(["table1", str(cfg)]) == 0
    text = capsys.readouterr().out
    assert "every_layer" in text and "VAE(1L)" in text


def test_cli_exit_codes(config_file, tmp_path, monkeypatch, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("dataset = synth\nepochs = -3\n")
    assert cli.main(["train", str(bad)]) == 1
    assert "line 2" in capsys.readouterr().err
    assert cli.main(["train", str(tmp_path / "missing.cfg")]) == 1

    def boom(config):
        raise NumericError("non-finite loss at epoch 1, batch 0")

    monkeypatch.setattr(service, "train", boom)
    assert cli.main(["train", str(config_file)]) == 2
    assert "epoch 1, batch 0" in capsys.readouterr().err
