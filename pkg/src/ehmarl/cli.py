"""Command-line entry point.

Verbs: run, summarize, validate-config, gen-trace, gen-topology. Any config
field can come from a YAML file, an EHMARL_<FIELD> environment variable, or a
flag (flags win). Exit codes: 0 success, 2 configuration error, 3 I/O error,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .energy import generate_synthetic_trace, save_trace_csv
from .experiment import (ALGORITHMS, ConfigError, ExperimentConfig, load_config,
                         run_experiment, summarize, validate_run)
from .topology import TopologyError, dump_topology, fifteen_node_fixture, load_topology

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_RUNTIME = 4


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--from-manifest", dest="from_manifest",
                        help="re-run the configuration stored in a manifest.json")
    parser.add_argument("--algorithm", choices=ALGORITHMS)
    parser.add_argument("--episodes", type=int)
    parser.add_argument("--seeds", help="comma-separated seed list")
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--topology", dest="topology_path")
    parser.add_argument("--trace", dest="trace_path",
                        help="trace CSV file or directory of trace_<id>.csv files")
    parser.add_argument("--p-peak", dest="p_peak_w", type=float)
    parser.add_argument("--rate-mode", dest="rate_mode",
                        choices=("constant", "log-distance"))
    parser.add_argument("--mode", choices=("lockstep", "async"))
    parser.add_argument("--optimizer", choices=("sgd", "adam"))
    parser.add_argument("--detail-days", dest="detail_days",
                        help="comma-separated 1-based day numbers")
    parser.add_argument("--detail-nodes", dest="detail_nodes",
                        help="'roles', 'all', or comma-separated node ids")
    parser.add_argument("--jobs", type=int, help="parallel seed processes")


def _overrides_from(args: argparse.Namespace) -> dict:
    fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    overrides = {}
    for name in fields:
        value = getattr(args, name, None)
        if value is None:
            continue
        if name == "seeds":
            value = tuple(int(x) for x in str(value).split(",") if x.strip())
        if name == "detail_days":
            value = tuple(int(x) for x in str(value).split(",") if x.strip())
        overrides[name] = value
    return overrides


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    path = args.config
    overrides = _overrides_from(args)
    if args.from_manifest:
        with open(args.from_manifest) as fh:
            manifest = json.load(fh)
        base = manifest["config"]
        base.update(overrides)
        return ExperimentConfig.from_dict(base)
    return load_config(path, overrides)


def cmd_run(args) -> int:
    config = _resolve_config(args)
    run_dirs = run_experiment(config)
    for d in run_dirs:
        print(d)
    return EXIT_OK


def cmd_summarize(args) -> int:
    result = summarize(args.run_dirs, output_dir=args.output_dir)
    table = result["table"]
    print(f"{'algorithm':<10} {'final5 sink Mb':>14} {'delivery':>9} {'reward':>10}")
    for algorithm in sorted(table):
        t = table[algorithm]
        print(f"{algorithm:<10} {t['final5_sink_bits_mean'] / 1e6:>14.3f} "
              f"{t['final5_delivery_mean']:>9.3f} {t['final5_reward_mean']:>10.1f}")
    for name, value in sorted(result["ratios"].items()):
        print(f"{name}: {value:.3f}x")
    return EXIT_OK


def cmd_validate_config(args) -> int:
    config = _resolve_config(args)
    print(yaml_dump(config.to_dict()))
    print("config ok")
    return EXIT_OK


def yaml_dump(data: dict) -> str:
    import yaml
    return yaml.safe_dump(data, sort_keys=True).rstrip()


def cmd_validate_run(args) -> int:
    problems = []
    for d in args.run_dirs:
        problems += [f"{d}: {p}" for p in validate_run(d)]
    if problems:
        for p in problems:
            print(p, file=sys.stderr)
        return EXIT_RUNTIME
    print("all runs valid")
    return EXIT_OK


def cmd_gen_trace(args) -> int:
    samples = generate_synthetic_trace(
        p_peak=args.p_peak, day_start=args.day_start, day_end=args.day_end,
        noise_sigma=args.noise_sigma, seed=args.seed)
    save_trace_csv(samples, args.output)
    print(args.output)
    return EXIT_OK


def cmd_gen_topology(args) -> int:
    if args.fixture:
        topo = fifteen_node_fixture(args.range_m)
    else:
        raise ConfigError("only the built-in fixture is generatable; "
                          "pass --fixture")
    dump_topology(topo, args.output)
    print(args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ehmarl",
        description="Energy-harvesting multi-hop network experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train/evaluate one algorithm over seeds")
    _add_config_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sum = sub.add_parser("summarize", help="merge run directories")
    p_sum.add_argument("run_dirs", nargs="+")
    p_sum.add_argument("--output-dir", dest="output_dir")
    p_sum.set_defaults(func=cmd_summarize)

    p_val = sub.add_parser("validate-config", help="resolve and check a config")
    _add_config_flags(p_val)
    p_val.set_defaults(func=cmd_validate_config)

    p_vr = sub.add_parser("validate-run", help="re-check run directory invariants")
    p_vr.add_argument("run_dirs", nargs="+")
    p_vr.set_defaults(func=cmd_validate_run)

    p_tr = sub.add_parser("gen-trace", help="write a synthetic harvest trace CSV")
    p_tr.add_argument("output")
    p_tr.add_argument("--p-peak", type=float, default=0.08)
    p_tr.add_argument("--day-start", type=float, default=8 * 3600.0)
    p_tr.add_argument("--day-end", type=float, default=17 * 3600.0)
    p_tr.add_argument("--noise-sigma", type=float, default=0.0)
    p_tr.add_argument("--seed", type=int, default=0)
    p_tr.set_defaults(func=cmd_gen_trace)

    p_tp = sub.add_parser("gen-topology", help="write a topology YAML")
    p_tp.add_argument("output")
    p_tp.add_argument("--fixture", action="store_true", default=True)
    p_tp.add_argument("--range-m", type=float, default=25.0)
    p_tp.set_defaults(func=cmd_gen_topology)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TopologyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures keep partial outputs on disk
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
