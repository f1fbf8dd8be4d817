"""Command-line entry point: ``plora-lab {run,resume,analyze,export,sweep}``.

Errors go to stderr as a single JSON line ``{"error": <kind>, "message": ...}``
with a nonzero exit status.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from ..analysis import spectrum_report, write_loss_csv
from ..linalg import DEFAULT_RANK_TOL
from .checkpoint import CheckpointError
from .config import ConfigError, ConfigReadError, RunConfig, config_schema, load_config
from .runner import RunAborted, latest_checkpoint, load_trainer, read_events, resume, run

EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_ERROR):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE)


def _fail(err: CliError) -> int:
    sys.stderr.write(json.dumps({"error": err.kind, "message": str(err)}) + "\n")
    return err.code


def _status_line(result) -> None:
    print(json.dumps({"status": result.status, "step": result.step, "out_dir": str(result.out_dir)}))


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    result = run(cfg, out_dir=args.out)
    _status_line(result)
    return 0 if result.status == "completed" else EXIT_DIVERGED


def cmd_resume(args) -> int:
    result = resume(args.checkpoint, out_dir=args.out, total_steps=args.total_steps)
    _status_line(result)
    return 0 if result.status == "completed" else EXIT_DIVERGED


def analyze_run(run_dir, rank_tol: float = DEFAULT_RANK_TOL) -> list[dict]:
    """Per-layer spectrum of the cumulative update, computed from the latest checkpoint."""
    ckpt = latest_checkpoint(run_dir)
    trainer = load_trainer(ckpt)
    rows = []
    for i, dw in enumerate(trainer.delta_weights()):
        rep = spectrum_report(dw, rank_tol, layer=i)
        row = {"layer": i, "step": trainer.step}
        row.update(rep.to_dict())
        rows.append(row)
    return rows


def cmd_analyze(args) -> int:
    if not 0.0 < args.rank_tol < 1.0:
        raise CliError("usage", f"--rank-tol must lie in (0, 1), got {args.rank_tol}", EXIT_USAGE)
    rows = analyze_run(args.run_dir, args.rank_tol)
    with open(Path(args.run_dir) / "analysis.ndjson", "w") as f:
        for row in rows:
            line = json.dumps(row, sort_keys=True)
            f.write(line + "\n")
            print(line)
    return 0


def cmd_export(args) -> int:
    if args.smooth_window < 1:
        raise CliError("usage", f"--smooth-window must be >= 1, got {args.smooth_window}", EXIT_USAGE)
    try:
        events = read_events(args.run_dir)
    except OSError as exc:
        raise CliError("io", f"cannot read metrics in {args.run_dir}: {exc.strerror}") from None
    n = write_loss_csv(events, args.csv, window=args.smooth_window)
    print(json.dumps({"rows": n, "csv": str(args.csv)}))
    return 0


def _config_paths(schema: dict, prefix: tuple = ()) -> list[tuple[str, ...]]:
    paths = []
    for key, sub in schema.get("properties", {}).items():
        if sub.get("type") == "object" and "properties" in sub:
            paths += _config_paths(sub, prefix + (key,))
        else:
            paths.append(prefix + (key,))
    return paths


def resolve_field(name: str) -> tuple[str, ...]:
    """Map ``momentum`` or ``plora.momentum`` to its path inside the config dict."""
    paths = _config_paths(config_schema())
    wanted = tuple(name.split("."))
    matches = [p for p in paths if p[-len(wanted):] == wanted]
    if not matches:
        raise CliError("usage", f"unknown config field {name!r}", EXIT_USAGE)
    if len(matches) > 1:
        opts = ", ".join(".".join(p) for p in matches)
        raise CliError("usage", f"ambiguous config field {name!r}: {opts}", EXIT_USAGE)
    return matches[0]


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_vary(spec: str) -> tuple[tuple[str, ...], list]:
    if "=" not in spec:
        raise CliError("usage", f"--vary expects field=v1,v2,..., got {spec!r}", EXIT_USAGE)
    name, values = spec.split("=", 1)
    vals = [_parse_value(v) for v in values.split(",") if v != ""]
    if not vals:
        raise CliError("usage", f"--vary {name} has no values", EXIT_USAGE)
    return resolve_field(name.strip()), vals


def sweep_configs(base: RunConfig, varies: list[tuple[tuple[str, ...], list]], out_root: Path) -> list[RunConfig]:
    configs = []
    for combo in itertools.product(*[vals for _, vals in varies]):
        raw = base.to_dict()
        tags = []
        for (path, _), value in zip(varies, combo):
            node = raw
            for key in path[:-1]:
                if key not in node:
                    raise CliError("schema", f"config has no {key!r} block for field {'.'.join(path)}")
                node = node[key]
            node[path[-1]] = value
            tags.append(f"{path[-1]}={value}")
        raw["name"] = f"{base.run_name}__{'__'.join(tags)}"
        raw["output_dir"] = str(out_root / raw["name"])
        configs.append(RunConfig.from_dict(raw))
    return configs


def _run_one(cfg: RunConfig) -> tuple[str, str]:
    result = run(cfg)
    return str(result.out_dir), result.status


def cmd_sweep(args) -> int:
    base = load_config(args.config)
    varies = [parse_vary(v) for v in args.vary]
    out_root = Path(args.out_root) if args.out_root else base.resolve_output_dir().parent
    configs = sweep_configs(base, varies, out_root)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_one, configs))
    else:
        results = [_run_one(c) for c in configs]
    for out, status in results:
        print(json.dumps({"status": status, "out_dir": out}))
    return 0 if all(s == "completed" for _, s in results) else EXIT_DIVERGED


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="plora-lab", description="LoRA / periodic-unload LoRA training laboratory")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="train from a JSON config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default: config output_dir, then $PLORA_OUT_DIR/<name>)")
    r.set_defaults(func=cmd_run)

    r = sub.add_parser("resume", help="continue a run from a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("--out", help="write the continuation elsewhere instead of the original run directory")
    r.add_argument("--total-steps", type=int, help="extend or shorten the run")
    r.set_defaults(func=cmd_resume)

    r = sub.add_parser("analyze", help="per-layer spectrum of the accumulated update")
    r.add_argument("run_dir")
    r.add_argument("--rank-tol", type=float, default=DEFAULT_RANK_TOL)
    r.set_defaults(func=cmd_analyze)

    r = sub.add_parser("export", help="write step,raw_loss,smoothed_loss,stage CSV")
    r.add_argument("run_dir")
    r.add_argument("--csv", required=True)
    r.add_argument("--smooth-window", type=int, default=1)
    r.set_defaults(func=cmd_export)

    r = sub.add_parser("sweep", help="grid of runs varying config fields")
    r.add_argument("config")
    r.add_argument("--vary", action="append", required=True, help="field=v1,v2,... (repeatable)")
    r.add_argument("--out-root", help="parent directory for the run directories")
    r.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    r.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as err:
        return _fail(err)
    except ConfigReadError as exc:
        return _fail(CliError("io", str(exc)))
    except ConfigError as exc:
        return _fail(CliError("schema", str(exc)))
    except CheckpointError as exc:
        return _fail(CliError("checkpoint", str(exc)))
    except RunAborted as exc:
        return _fail(CliError("aborted", str(exc)))
    except OSError as exc:
        return _fail(CliError("io", f"{exc.filename or ''}: {exc.strerror or exc}".strip(": ")))


if __name__ == "__main__":
    raise SystemExit(main())
