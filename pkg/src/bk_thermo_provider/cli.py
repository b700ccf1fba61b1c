from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from typing import Sequence

from bk_thermo_provider.engine.artifacts import ArtifactStore
from bk_thermo_provider.engine.config import RunConfig, default_output_dir
from bk_thermo_provider.engine.exceptions import ConfigError
from bk_thermo_provider.engine.pipeline import STAGES, ThermoPipeline, error_record, exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bk-thermo",
        description="Batch thermodynamic formalism runs for BK-class meromorphic maps.",
    )
    parser.add_argument("subcommand", choices=STAGES, help="stage to run")
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--config", metavar="PATH", help="JSON run configuration")
    source.add_argument("--manifest", metavar="PATH", help="rerun with the configuration recorded in a run manifest")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one configuration value, JSON decoded when possible",
    )
    parser.add_argument("--threads", type=int, default=None, help="worker cap for parallel stages (default 1)")
    parser.add_argument("--output-dir", default=None, help="artifact directory, overrides output.directory")
    return parser


def load_config(args: argparse.Namespace) -> tuple[RunConfig, int]:
    threads = 1
    if args.manifest:
        config = RunConfig.from_file(args.manifest)
        with open(args.manifest) as handle:
            threads = int(json.load(handle).get("threads", 1))
    elif args.config:
        config = RunConfig.from_file(args.config)
    else:
        config = RunConfig()
    config = config.apply_overrides(args.overrides)
    if args.output_dir:
        config = dataclasses.replace(config, output=dataclasses.replace(config.output, directory=args.output_dir))
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError({"threads": "must be >= 1"})
        threads = args.threads
    return config, threads


def _status(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True, default=str) + "\n")


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)

    try:
        config, threads = load_config(args)
    except ConfigError as exc:
        directory = args.output_dir or default_output_dir()
        ArtifactStore(directory).write_json("error.json", {"stage": args.subcommand, **error_record(exc)})
        _status({"stage": args.subcommand, "status": "failed", **error_record(exc)})
        return exit_code(exc)

    pipeline = ThermoPipeline(config, n_jobs=threads, argv=argv)
    try:
        result = pipeline.run(args.subcommand)
    except Exception as exc:
        # run has already written error.json and the failed manifest
        _status({"stage": args.subcommand, "status": "failed", **error_record(exc)})
        return exit_code(exc)

    _status({"stage": result.stage, "status": "success", "outputs": result.outputs, "manifest": result.manifest})
    return 0


if __name__ == "__main__":
    sys.exit(main())
