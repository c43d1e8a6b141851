"""Command-line client.

Every subcommand builds the same request models the HTTP service consumes
and either executes them in-process (default) or posts them to a running
server (--server URL).  Exit codes: 0 success, 1 usage/config error, 2 data
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import urllib.error
import urllib.request

import numpy as np

from . import __version__
from .config import parse_config_text
from .data import load_csv
from .errors import DataError, GapfillError, UsageError
from .service import core
from .service import schemas as S

_KIND_CODES = {"usage": 1, "data": 2, "numeric": 3}


class RemoteError(GapfillError):
    def __init__(self, kind, detail):
        super().__init__(detail)
        self.exit_code = _KIND_CODES.get(kind, 1)


class LocalClient:
    """In-process execution through the service layer."""

    def call(self, endpoint, request):
        return getattr(core, endpoint)(request)


class HttpClient:
    """Thin JSON-over-HTTP client for a remote server."""

    _RESPONSES = {
        "make_mask": S.MaskResponse,
        "impute": S.ImputeResponse,
        "forecast": S.ForecastResponse,
        "train": S.TrainResponse,
        "finetune": S.FinetuneResponse,
        "bench": S.BenchResponse,
    }
    _PATHS = {"make_mask": "/mask"}

    def __init__(self, base_url):
        self.base_url = base_url.rstrip("/")

    def call(self, endpoint, request):
        path = self._PATHS.get(endpoint, f"/{endpoint}")
        payload = request.model_dump_json().encode()
        req = urllib.request.Request(
            self.base_url + path, data=payload,
            headers={"Content-Type": "application/json"}, method="POST",
        )
        try:
            with urllib.request.urlopen(req) as resp:
                body = resp.read()
        except urllib.error.HTTPError as exc:
            try:
                err = json.loads(exc.read())
                raise RemoteError(err.get("kind", "usage"),
                                  f"{err.get('error', 'Error')}: {err.get('detail', '')}") from exc
            except (ValueError, KeyError):
                raise RemoteError("usage", f"server error {exc.code}") from exc
        except urllib.error.URLError as exc:
            raise RemoteError("usage", f"cannot reach {self.base_url}: {exc.reason}") from exc
        return self._RESPONSES[endpoint].model_validate_json(body)


def _client(args):
    return HttpClient(args.server) if args.server else LocalClient()


def _load_mask_csv(path, expect_shape):
    series = load_csv(path)
    mask = series.values
    if mask.shape != expect_shape:
        raise DataError(f"mask {path} shape {mask.shape} != data shape {expect_shape}")
    if not np.isin(mask, (0.0, 1.0)).all() or (series.mask == 0).any():
        raise DataError(f"mask {path} must contain only 0/1 cells")
    return mask


def cmd_train(args):
    req = S.TrainRequest(out=args.out, config_path=args.config)
    resp = _client(args).call("train", req)
    print(f"checkpoint: {resp.checkpoint}")
    print(f"best_val_mse: {resp.best_val_mse:.6g} (epoch {resp.best_epoch}, "
          f"{resp.epochs_run} epochs run)")
    return 0


def cmd_finetune(args):
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides.update(parse_config_text(f"{key} = {value}"))
    req = S.FinetuneRequest(base=args.base, data=args.data, out=args.out,
                            task=args.task, horizon=args.horizon,
                            domain=args.domain, overrides=overrides)
    resp = _client(args).call("finetune", req)
    print(f"{resp.task} artifact: {resp.artifact} ({resp.steps} steps)")
    if resp.val_mse is not None:
        print(f"val_mse: {resp.val_mse:.6g}")
    return 0


def cmd_impute(args):
    series = load_csv(args.data)
    values = [
        [series.values[t, v] if series.mask[t, v] > 0 else None
         for v in range(len(series.variables))]
        for t in range(series.length)
    ]
    extra = None
    if args.mask:
        extra = _load_mask_csv(args.mask, series.values.shape).astype(int).tolist()
    req = S.ImputeRequest(checkpoint=args.ckpt, prefix=args.prefix,
                          domain=args.domain, variables=series.variables,
                          values=values, mask=extra)
    resp = _client(args).call("impute", req)
    from .workflows import write_csv_matrix

    write_csv_matrix(args.out, np.array(resp.imputed), resp.variables)
    print(f"imputed series written to {args.out}")
    return 0


def cmd_forecast(args):
    series = load_csv(args.data)
    outputs = []
    for v in range(len(series.variables)):
        col = [
            series.values[t, v] if series.mask[t, v] > 0 else None
            for t in range(series.length)
        ]
        req = S.ForecastRequest(checkpoint=args.ckpt, horizon=args.horizon,
                                domain=args.domain, values=col)
        outputs.append(_client(args).call("forecast", req).forecast)
    from .workflows import write_csv_matrix

    write_csv_matrix(args.out, np.array(outputs).T, series.variables)
    print(f"forecast written to {args.out}")
    return 0


def cmd_bench(args):
    req = S.BenchRequest(out_dir=args.out, config_path=args.config)
    resp = _client(args).call("bench", req)
    print(f"report: {resp.csv}")
    for model, avg in sorted(resp.averages.items()):
        print(f"  {model}: mse={avg['mse']:.6g} mae={avg['mae']:.6g}")
    return 0


def cmd_maskgen(args):
    req = S.MaskRequest(length=args.len, rate=args.rate, pattern=args.pattern,
                        seed=args.seed)
    resp = _client(args).call("make_mask", req)
    line = ",".join(str(b) for b in resp.mask)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(line + "\n")
    else:
        print(line)
    return 0


def cmd_synth(args):
    from .synthetic import sinusoid_series
    from .workflows import write_csv_matrix

    series = sinusoid_series(n_variables=args.variables, n_points=args.points,
                             period_range=(args.period_min, args.period_max),
                             noise=args.noise, seed=args.seed)
    write_csv_matrix(args.out, series.values, series.variables)
    print(f"synthetic corpus ({args.variables} variables x {args.points} points) "
          f"written to {args.out}")
    return 0


def cmd_serve(args):
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gapfill",
        description="general-purpose incomplete time series imputation",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--server", default=None,
                        help="run against a remote gapfill server instead of in-process")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a one-for-all model from scratch")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("finetune", help="adapt a frozen base to a domain or to forecasting")
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True, action="append")
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=["impute", "forecast"], default="impute")
    p.add_argument("--horizon", type=int, default=1)
    p.add_argument("--domain", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a fine-tune setting (repeatable)")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("impute", help="fill the missing values of a CSV series")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prefix", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--domain", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_impute)

    p = sub.add_parser("forecast", help="forecast beyond the end of a CSV series")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--domain", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_forecast)

    p = sub.add_parser("bench", help="run the variable-wise evaluation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("maskgen", help="emit a deterministic missing mask")
    p.add_argument("--len", type=int, required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--pattern", choices=["random", "continuous"], default="random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_maskgen)

    p = sub.add_parser("synth", help="write a synthetic sinusoid corpus CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--variables", type=int, default=120)
    p.add_argument("--points", type=int, default=224)
    p.add_argument("--period-min", type=float, default=12.0)
    p.add_argument("--period-max", type=float, default=48.0)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except GapfillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
