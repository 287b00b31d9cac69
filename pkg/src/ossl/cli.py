"""Command line front end.

Thin client over the shared handlers: every subcommand builds a request
payload, then either runs it in-process or POSTs it to a running service
when --server is given.  Flags are generated from the request models, so
the CLI and the HTTP API accept exactly the same fields.  Precedence when
the same field arrives twice: explicit flag > config file > profile >
built-in default.  A run's manifest.json doubles as a config file, which is
how a finished run is replayed.
"""

from __future__ import annotations

import argparse
import json
import sys
import types
import typing
from pathlib import Path

from pydantic import BaseModel
from pydantic import ValidationError as RequestError

from . import __version__
from .errors import ConfigError, OsslError
from .harness import desk_profile, dispatch
from .schemas import (AdaptConfigModel, DatasetSpecModel, EvalOptionsModel,
                      SourceConfigModel)

_STATUS_TO_EXIT = {422: 2, 400: 3, 500: 4}


def _unwrap(annotation):
    """Reduce an annotation to ("scalar", type) or ("seq", item_type)."""
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        return _unwrap(args[0])
    if origin in (list, tuple):
        item = typing.get_args(annotation)[0]
        return "seq", (int if item is Ellipsis else item)
    return "scalar", annotation


def _add_model_flags(parser: argparse.ArgumentParser, model: type[BaseModel],
                     section: str, prefix: str = "") -> None:
    for name, field in model.model_fields.items():
        flag = "--" + (prefix + name).replace("_", "-")
        dest = f"{section}__{name}"
        kind, base = _unwrap(field.annotation)
        if kind == "seq":
            parser.add_argument(flag, dest=dest, nargs="*", type=base,
                                default=argparse.SUPPRESS)
        elif base is bool:
            parser.add_argument(flag, dest=dest,
                                action=argparse.BooleanOptionalAction,
                                default=argparse.SUPPRESS)
        else:
            parser.add_argument(flag, dest=dest, type=base,
                                default=argparse.SUPPRESS)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE",
                        help="JSON request file; a run manifest also works")
    parser.add_argument("--profile", choices=["desk"],
                        help="named bundle of overrides applied under the config file")
    parser.add_argument("--server", metavar="URL",
                        help="send the request to a running service instead")
    parser.add_argument("--json", dest="json_out", action="store_true",
                        help="print the full response as JSON")
    parser.add_argument("--output-root", dest="output_root", default=argparse.SUPPRESS)
    parser.add_argument("--run-name", dest="run_name", default=argparse.SUPPRESS)


def _path_flag(parser: argparse.ArgumentParser, name: str) -> None:
    parser.add_argument("--" + name.replace("_", "-"), dest=name,
                        default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ossl",
        description="open-set self-labeling: generate data, pretrain, adapt, evaluate")
    parser.add_argument("--version", action="version", version=f"ossl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a source/test dataset pair")
    _add_common(p)
    _add_model_flags(p, DatasetSpecModel, "spec")

    p = sub.add_parser("train-source", help="pretrain the closed-set starting point")
    _add_common(p)
    _path_flag(p, "train_path")
    _add_model_flags(p, SourceConfigModel, "config")

    p = sub.add_parser("adapt", help="self-label a test set from a starting checkpoint")
    _add_common(p)
    for name in ("checkpoint_path", "test_path", "train_path"):
        _path_flag(p, name)
    _add_model_flags(p, AdaptConfigModel, "adapt")
    _add_model_flags(p, EvalOptionsModel, "eval")

    p = sub.add_parser("evaluate", help="score a checkpoint on a labeled test file")
    _add_common(p)
    for name in ("checkpoint_path", "test_path", "train_path"):
        _path_flag(p, name)
    _add_model_flags(p, EvalOptionsModel, "eval")

    for cmd, extra in (("sweep", "threshold grid"), ("ablate", "component toggles")):
        p = sub.add_parser(cmd, help=f"full pipelines over a {extra}")
        _add_common(p)
        _add_model_flags(p, DatasetSpecModel, "spec", prefix="data_")
        _add_model_flags(p, SourceConfigModel, "source", prefix="source_")
        _add_model_flags(p, AdaptConfigModel, "adapt", prefix="adapt_")
        _add_model_flags(p, EvalOptionsModel, "eval")
        p.add_argument("--seeds", dest="seeds", nargs="*", type=int,
                       default=argparse.SUPPRESS)
        if cmd == "sweep":
            p.add_argument("--confidence-grid", dest="confidence_grid", nargs="*",
                           type=float, default=argparse.SUPPRESS)
            p.add_argument("--flatness-grid", dest="flatness_grid", nargs="*",
                           type=float, default=argparse.SUPPRESS)
        else:
            p.add_argument("--injection-counts", dest="injection_counts", nargs="*",
                           type=int, default=argparse.SUPPRESS)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _load_config_file(path: str, command: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    if "command" in raw and "request" in raw:
        if raw["command"] != command:
            raise ConfigError(f"{path} is a manifest for {raw['command']!r}, "
                              f"not {command!r}")
        raw = raw["request"]
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: manifest request must be an object")
    return raw


def _profile_overlay(command: str, name: str) -> dict:
    profile = desk_profile()
    if command == "train-source":
        return {"config": profile["source"]}
    if command == "adapt":
        return {"adapt": profile["adapt"]}
    if command in ("sweep", "ablate"):
        return {"source": profile["source"], "adapt": profile["adapt"]}
    return {}


_CONTROL_KEYS = {"command", "config", "profile", "server", "json_out"}


def _payload_from_args(args: argparse.Namespace) -> dict:
    payload: dict = {}
    for dest, value in vars(args).items():
        if dest in _CONTROL_KEYS:
            continue
        if "__" in dest:
            section, name = dest.split("__", 1)
            payload.setdefault(section, {})[name] = value
        else:
            payload[dest] = value
    return payload


def build_payload(args: argparse.Namespace) -> dict:
    payload: dict = {}
    if args.profile:
        payload = _merge(payload, _profile_overlay(args.command, args.profile))
    if args.config:
        payload = _merge(payload, _load_config_file(args.config, args.command))
    return _merge(payload, _payload_from_args(args))


def _post(server: str, command: str, payload: dict) -> dict:
    import httpx

    url = f"{server.rstrip('/')}/{command}"
    reply = httpx.post(url, json=payload, timeout=None)
    if reply.status_code != 200:
        try:
            detail = reply.json().get("detail", reply.text)
        except ValueError:
            detail = reply.text
        err = OsslError(f"server returned {reply.status_code}: {detail}")
        err.exit_code = _STATUS_TO_EXIT.get(reply.status_code, 1)
        raise err
    return reply.json()


def _metrics_line(tag: str, metrics: dict) -> str:
    return (f"{tag}: auroc={metrics['auroc']:.4f} macro_f1={metrics['macro_f1']:.4f} "
            f"acc={metrics['acc']:.4f} ({metrics['score_kind']}, "
            f"threshold={metrics['threshold']:.4f})")


def _summarize(command: str, result: dict) -> list[str]:
    lines = []
    if command == "gen-data":
        lines.append(f"train: {result['train_path']} ({result['n_train']} rows, "
                     f"{result['k_known']} known classes)")
        lines.append(f"test:  {result['test_path']} ({result['n_test']} rows)")
    elif command == "train-source":
        lines.append(f"train acc {result['train_accuracy']:.4f}, "
                     f"holdout acc {result['holdout_accuracy']:.4f}")
        lines.append(f"checkpoint: {result['checkpoint_path']}")
    elif command == "adapt":
        lines.append(_metrics_line("before", result["before"]))
        lines.append(_metrics_line("after", result["after"]))
        delta = result["after"]["auroc"] - result["before"]["auroc"]
        state = "converged" if result["converged"] else "hit epoch cap"
        lines.append(f"auroc delta {delta:+.4f} after {result['epochs_run']} "
                     f"epochs ({state})")
        lines.append(f"checkpoint: {result['checkpoint_path']}")
    elif command == "evaluate":
        lines.append(_metrics_line(result["checkpoint_kind"], result["metrics"]))
    else:
        lines.append(f"{result['n_rows']} rows ({result['n_failed']} failed): "
                     f"{result['table_csv']}")
    lines.append(f"run dir: {result['run_dir']}")
    return lines


def _run_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="info")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "serve":
            return _run_serve(args)
        payload = build_payload(args)
        if args.server:
            result = _post(args.server, args.command, payload)
        else:
            result = dispatch(args.command, payload).model_dump()
        if args.json_out:
            print(json.dumps(result, indent=2, sort_keys=True))
        else:
            for line in _summarize(args.command, result):
                print(line)
        return 0
    except RequestError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except OsslError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
