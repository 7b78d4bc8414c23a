"""Command-line entry point: run, verify, metrics.

Exit codes: 0 success, 1 verification/termination distinctions, 2 usage or
config problems, 3 inner-loop exhaustion, 4 agent protocol errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import threading
from pathlib import Path

from . import metrics as metrics_mod
from .config import ConfigError, load_config
from .errors import PatchlockError
from .market import DataError, read_equity_csv
from .orchestrator import AgentCrashed, AgentTimeout, ProtocolError, Run
from .vault import IOFailure, ManifestRules, TreeDigest, verify_anchor

EXIT_OK = 0
EXIT_DISTINCTION = 1
EXIT_USAGE = 2
EXIT_EXHAUSTED = 3
EXIT_AGENT = 4


def _serve_in_background(run: Run, host: str, port: int):
    import uvicorn

    from .service import RunRegistry, create_app

    registry = RunRegistry()
    registry.register(run)
    server = uvicorn.Server(uvicorn.Config(
        create_app(registry), host=host, port=port, log_level="warning",
    ))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    return server, thread


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config)
        if args.seed is not None:
            if config.market is None or config.market.synth is None:
                raise ConfigError("--seed requires a synthetic market config")
            synth = dataclasses.replace(config.market.synth, seed=args.seed)
            config = dataclasses.replace(
                config, market=dataclasses.replace(config.market, synth=synth)
            )
        run = Run(config)
    except (ConfigError, PatchlockError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    server = None
    if args.serve:
        server, _ = _serve_in_background(run, args.host, args.port)
        print(f"operator API on http://{args.host}:{args.port}/runs/{run.run_id}",
              file=sys.stderr)
    try:
        result = run.execute()
    except (AgentCrashed, AgentTimeout, ProtocolError) as exc:
        print(f"agent protocol failure: {exc}", file=sys.stderr)
        return EXIT_AGENT
    finally:
        if server is not None and args.headless:
            server.should_exit = True

    if args.serve and not args.headless:
        print("run finished; serving until interrupted (Ctrl-C)", file=sys.stderr)
        try:
            threading.Event().wait()
        except KeyboardInterrupt:
            server.should_exit = True

    summary = run.summary()
    out = {
        "run_id": run.run_id,
        "committed": result.committed,
        "status": summary["status"],
        "artifacts": str(run.run_dir),
    }
    if result.episode is not None:
        out["episode"] = dataclasses.asdict(result.episode)
    if result.exhausted:
        out["gradient"] = (result.last_gradient.to_payload()
                           if result.last_gradient else None)
        print(json.dumps(out, indent=2, sort_keys=True))
        return EXIT_EXHAUSTED
    print(json.dumps(out, indent=2, sort_keys=True))
    if result.episode is not None and result.episode.termination_cause in (
        "TerminalBreach", "Halted", "InnerExhausted",
    ):
        return EXIT_DISTINCTION
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    workspace = Path(args.workspace)
    try:
        data = json.loads(Path(args.anchors).read_text())
        trees = data["trees"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        print(f"cannot read anchors file: {exc}", file=sys.stderr)
        return EXIT_USAGE
    tampered = False
    for label, info in sorted(trees.items()):
        try:
            anchor = TreeDigest(
                digest=info["digest"],
                file_count=info["file_count"],
                root_label=info.get("root_label", label),
                entries=tuple((p, d) for p, d in info.get("manifest", [])),
            )
            verdict = verify_anchor(workspace / info["prefix"], anchor, ManifestRules())
        except (KeyError, TypeError) as exc:
            print(f"bad anchors entry for {label}: {exc}", file=sys.stderr)
            return EXIT_USAGE
        except IOFailure as exc:
            print(f"cannot snapshot {label}: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if verdict.intact:
            print(f"{label}: intact")
        else:
            tampered = True
            print(f"{label}: TAMPERED")
            for kind, paths in (("added", verdict.added), ("removed", verdict.removed),
                                ("modified", verdict.modified)):
                for path in paths:
                    print(f"  {kind}: {path}")
    return EXIT_DISTINCTION if tampered else EXIT_OK


def cmd_metrics(args: argparse.Namespace) -> int:
    try:
        equity_points = read_equity_csv(Path(args.equity))
        if len(equity_points) < 2:
            raise DataError("need at least two equity rows")
        wealth = [p.wealth for p in equity_points]
        portfolio = metrics_mod.ReturnSeries.from_equity(wealth, args.periods_per_year)
        benchmark = None
        if args.benchmark:
            bench_points = read_equity_csv(Path(args.benchmark))
            if len(bench_points) != len(equity_points):
                raise DataError("benchmark and equity lengths differ")
            benchmark = metrics_mod.ReturnSeries.from_equity(
                [p.wealth for p in bench_points], args.periods_per_year
            )
        summary = metrics_mod.summary(
            portfolio, wealth, benchmark, risk_free_per_step=args.risk_free
        )
    except (OSError, PatchlockError, ValueError) as exc:
        print(f"metrics error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchlock",
        description="Capability-locked patch gating with a market deployment loop",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute the inner loop and, if configured, deploy")
    p_run.add_argument("config", help="path to a patchlock-run/v1 JSON config")
    p_run.add_argument("--serve", action="store_true",
                       help="expose the operator API while the run executes")
    p_run.add_argument("--host", default="127.0.0.1")
    p_run.add_argument("--port", type=int, default=8787)
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the synthetic market seed")
    p_run.add_argument("--headless", action="store_true",
                       help="exit when the run finishes even when serving")
    p_run.set_defaults(func=cmd_run)

    p_verify = sub.add_parser("verify", help="check workspace trees against saved anchors")
    p_verify.add_argument("workspace")
    p_verify.add_argument("anchors", help="anchors.json written at commit time")
    p_verify.set_defaults(func=cmd_verify)

    p_metrics = sub.add_parser("metrics", help="compute performance metrics from equity CSVs")
    p_metrics.add_argument("equity", help="equity CSV in the run export format")
    p_metrics.add_argument("benchmark", nargs="?", default=None,
                           help="optional benchmark equity CSV")
    p_metrics.add_argument("--periods-per-year", type=int, default=252)
    p_metrics.add_argument("--risk-free", type=float, default=0.0)
    p_metrics.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    return args.func(args)


def entrypoint() -> None:
    sys.exit(main())
