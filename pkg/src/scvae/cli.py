"""Command-line client for the scvae service.

By default requests are served in-process; ``--url`` sends them to a running
server instead (start one with ``scvae serve``). Exit codes: 0 success,
1 configuration error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


class RemoteError(Exception):
    def __init__(self, kind: str, detail: str):
        super().__init__(detail)
        self.kind = kind


def _client(url: str | None):
    if url:
        import httpx

        return httpx.Client(base_url=url, timeout=None)
    with warnings.catch_warnings():
        # starlette nags about its httpx backend; the in-process path is still supported
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service import app

    return TestClient(app, raise_server_exceptions=True)


def _call(client, path: str, payload: dict) -> dict:
    resp = client.post(path, json=payload)
    if resp.status_code >= 400:
        try:
            body = resp.json()
        except ValueError:
            body = {}
        kind = body.get("kind", "configuration" if resp.status_code < 500 else "numeric")
        raise RemoteError(kind, body.get("detail", resp.text))
    return resp.json()


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise RemoteError("configuration", f"cannot read config {path}: {exc.strerror}") from None


def _print_fisher(report: dict) -> None:
    print(f"{'side':<12} {'layer':>5} {'fisher':>12} {'params':>8}")
    for r in report["layers"]:
        flag = "  zero gradient" if r["zero_gradient"] else ""
        print(f"{r['side']:<12} {r['layer']:>5} {r['fisher']:>12.4e} {r['param_count']:>8}{flag}")
    print(f"encoder mean {report['encoder_mean']:.4e}  decoder mean {report['decoder_mean']:.4e}  "
          f"overall {report['overall_mean']:.4e}")
    rec = report.get("recurrence")
    if rec:
        for name in ("encoder", "decoder"):
            rate = rec[f"{name}_decay_rate"]
            if rate is not None:
                print(f"{name} non-increasing pairs: {rate:.2f}")


def _train(client, args) -> None:
    out = _call(client, "/train", {"config": _read(args.config)})
    for e in out["epochs"]:
        print(f"epoch {e['epoch']:>3}  train elbo {e['train_elbo']:.4f}  val elbo {e['val_elbo']:.4f}")
    _print_fisher(out["final_fisher"])
    m = out["metrics"]
    print(f"nll {m['nll']:.4f}  accuracy {m['accuracy']:.4f}  (best epoch {out['best_epoch']})")
    print(f"checkpoint {out['checkpoint']}")


def _eval(client, args) -> None:
    m = _call(client, "/eval", {"config": _read(args.config), "checkpoint": args.checkpoint})
    print(f"nll {m['nll']:.4f}  accuracy {m['accuracy']:.4f}  -> {m['path']}")


def _fisher(client, args) -> None:
    report = _call(client, "/fisher", {"config": _read(args.config), "checkpoint": args.checkpoint})
    _print_fisher(report)
    print(f"-> {report['path']}")


def _sweep(client, args) -> None:
    out = _call(client, "/sweep", {"config": _read(args.config)})
    print(f"{'depth':>5} {'skip':<12} {'overall FI':>12} {'nll':>9} {'acc':>7}")
    for r in out["rows"]:
        print(f"{r['depth']:>5} {r['skip_mode']:<12} {r['overall']:>12.4e} {r['nll']:>9.3f} {r['accuracy']:>7.4f}")
    print(f"-> {out['path']}")


def _table1(client, args) -> None:
    out = _call(client, "/table1", {"config": _read(args.config)})
    sys.stdout.write(out["text"])
    print(f"-> {out['path']}")


def _export(client, args) -> None:
    out = _call(client, "/export-latents",
                {"config": _read(args.config), "checkpoint": args.checkpoint, "out": args.out})
    print(f"wrote {out['rows']} rows -> {out['path']}")


def _synth(client, args) -> None:
    out = _call(client, "/synth", {"config": _read(args.config), "out_dir": args.out_dir})
    for f in out["files"]:
        print(f)


def _serve(args) -> None:
    import uvicorn

    uvicorn.run("scvae.service:app", host=args.host, port=args.port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scvae", description=__doc__.splitlines()[0])
    parser.add_argument("--url", default=os.environ.get("SCVAE_URL"),
                        help="base URL of a running scvae server (default: run in-process)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, func, *positional, **kw):
        p = sub.add_parser(name, **kw)
        for arg in positional:
            p.add_argument(arg)
        p.set_defaults(func=func)
        return p

    cmd("train", _train, "config", help="train one model")
    cmd("eval", _eval, "checkpoint", "config", help="NLL and latent accuracy of a checkpoint")
    cmd("fisher", _fisher, "checkpoint", "config", help="layer-wise Fisher report of a checkpoint")
    cmd("sweep", _sweep, "config", help="depth sweep with and without skips")
    cmd("table1", _table1, "config", help="train every preset and tabulate NLL and accuracy")
    cmd("export-latents", _export, "checkpoint", "config", "out", help="write test-set posterior parameters")
    cmd("synth", _synth, "config", "out_dir", help="write the synthetic dataset as IDX files")
    serve = sub.add_parser("serve", help="run the HTTP API")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.set_defaults(func=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "serve":
        _serve(args)
        return EXIT_OK
    try:
        with _client(args.url) as client:
            args.func(client, args)
    except RemoteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if exc.kind == "numeric" else EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
