"""Command line entry point: ``rankmfg <subcommand> --config run.toml``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ValidationError
from .experiments import EXIT_STAGE, EXIT_VALIDATION, rerun_from_manifest, run_experiment

SUBCOMMANDS = {
    "solve": ["solve"],
    "verify-nash": ["verify-nash"],
    "common-noise": ["common-noise"],
    "value-sweep": ["value-sweep"],
    "run": None,  # stages listed in the config
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rankmfg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", type=Path, help="TOML experiment configuration")
        if name == "run":
            src.add_argument("--manifest", type=Path, help="repeat the run recorded in a manifest.json")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        p.add_argument("--threads", type=int, help="worker threads for path simulation")
        if name == "common-noise":
            p.add_argument("--sigma0", type=float, help="common-noise volatility")
            p.add_argument("--w-count", type=int, help="number of common paths for the conditional check")
            p.add_argument("--N", type=int, nargs="+", dest="N_values", help="N ladder")
        if name == "verify-nash":
            p.add_argument("--N", type=int, nargs="+", dest="N_values", help="N ladder")
        p.add_argument("--quiet", action="store_true", help="suppress progress messages")
    return parser


def _overrides(args) -> dict:
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.threads is not None:
        over["threads"] = args.threads
    if args.command == "common-noise":
        cn = {}
        if args.sigma0 is not None:
            cn["sigma0"] = args.sigma0
        if args.w_count is not None:
            cn["w_count"] = args.w_count
        if args.N_values:
            cn["N_values"] = args.N_values
        if cn:
            over["common_noise"] = cn
    if args.command == "verify-nash" and args.N_values:
        over["nash"] = {"N_values": args.N_values}
    return over


def _merge(raw: dict, over: dict) -> dict:
    out = dict(raw)
    for k, v in over.items():
        out[k] = {**out.get(k, {}), **v} if isinstance(v, dict) else v
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log_stream = None if args.quiet else sys.stderr
    try:
        if getattr(args, "manifest", None) is not None:
            out = args.out or args.manifest.parent
            manifest = rerun_from_manifest(args.manifest, out, threads=args.threads or 1, log_stream=log_stream)
        else:
            from .experiments import config_from_dict, tomllib
            try:
                raw = tomllib.loads(args.config.read_text())
            except FileNotFoundError:
                raise ValidationError([f"config: file not found: {args.config}"]) from None
            except tomllib.TOMLDecodeError as exc:
                raise ValidationError([f"config: {exc}"]) from None
            cfg = config_from_dict(_merge(raw, _overrides(args)), args.config.parent)
            manifest = run_experiment(cfg, threads=cfg.threads, out_dir=args.out,
                                      stages=SUBCOMMANDS[args.command], log_stream=log_stream)
    except ValidationError as exc:
        print("configuration invalid:", file=sys.stderr)
        for p in exc.problems:
            print(f"  {p}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    code = manifest.exit_code()
    if not args.quiet:
        for stage, status in manifest.status.items():
            print(f"{stage}: {status} ({manifest.timing[stage]:.1f} s)", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
