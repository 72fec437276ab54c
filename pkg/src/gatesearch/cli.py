"""Command-line entry points.

Subcommands: ``run`` (full pipeline), the individual stages ``pretrain`` /
``search`` / ``finetune``, ``compile``, ``report``, ``fit-latency`` and
``eval``. Failures exit nonzero with one machine-parsable line
``<category>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .archfile import load_architecture, write_architecture
from .checkpoint import read_container
from .config import parse_config
from .datasets import dataset_geometry, load_dataset
from .errors import ConfigError, GateSearchError
from .network import build_network, compile_network
from .pipeline import _latest_checkpoint, run_pipeline
from .resources import fit_latency, parse_latency_profile, resource_report

EXIT_CODES = {
    "config-error": 2,
    "format-error": 3,
    "dimension-error": 4,
    "dead-layer": 5,
    "wiring-error": 6,
    "fit-error": 7,
    "coverage-error": 8,
    "state-error": 9,
    "divergence": 10,
    "io-error": 11,
    "error": 1,
}


def _add_common(p, need_out=True):
    p.add_argument("--config", required=True, help="experiment config file")
    if need_out:
        p.add_argument("--out-dir", required=True, help="experiment directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--resume", action="store_true", help="resume from the latest checkpoint")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gatesearch",
        description="Per-channel operation search and pruning for small conv nets")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, desc in (("run", "run all four stages"),
                       ("pretrain", "build and pre-train only"),
                       ("search", "run through the search stage"),
                       ("finetune", "run through fine-tuning and compile")):
        p = sub.add_parser(name, help=desc)
        _add_common(p)

    p = sub.add_parser("compile", help="compile the latest checkpoint into an architecture file")
    _add_common(p)
    p.add_argument("--arch-out", default=None, help="output path (default <out-dir>/architecture.json)")

    p = sub.add_parser("report", help="resource report of an architecture or a dense preset")
    p.add_argument("--arch", default=None, help="architecture JSON file")
    p.add_argument("--config", default=None, help="config file (reports the dense preset)")
    p.add_argument("--profile", default=None, help="latency profile for predictions")
    p.add_argument("--out-dir", default=None, help="also write report.csv and report.png here")

    p = sub.add_parser("fit-latency", help="fit affine latency models from a profile file")
    p.add_argument("--profile", required=True)
    p.add_argument("--json-out", default=None, help="write fitted coefficients as JSON")

    p = sub.add_parser("eval", help="evaluate an architecture file on a dataset")
    p.add_argument("--arch", required=True)
    p.add_argument("--config", required=True, help="config providing the dataset")
    p.add_argument("--batch-size", type=int, default=256)
    return parser


def _load_config(args):
    config = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def _print_report(report):
    lat = report["predicted_latency_ms"]
    print(f"parameters: {report['parameters']}")
    print(f"flops: {report['flops']}")
    print(f"predicted-latency-ms: {repr(lat) if lat is not None else 'none'}")
    print(f"head-parameters: {report['head_parameters']}")
    print(f"head-flops: {report['head_flops']}")


def _write_report_files(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "report.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["layer", "op", "conv_type", "kernel",
                                                "activation", "c_in", "c_out",
                                                "parameters", "flops", "latency_ms"])
        writer.writeheader()
        writer.writerows(report["rows"])
    from .figures import render_report_figure
    render_report_figure(report["rows"], os.path.join(out_dir, "report.png"))


def cmd_stage(args, through):
    config = _load_config(args)
    resume = args.resume or through in ("search", "finetune")
    result = run_pipeline(config, args.out_dir, resume=resume, through=through)
    if result.get("completed"):
        print(f"test-accuracy: {result['test_accuracy']!r}")
        print(f"architecture: {result['architecture']}")
    else:
        print(f"stopped-after: {result['stage']}")
    return 0


def cmd_compile(args):
    config = _load_config(args)
    c, h, w, n_classes = dataset_geometry(config.dataset, config.seed)
    rng = np.random.default_rng(config.seed)
    net = build_network(config, (c, h, w), n_classes, rng)
    found = _latest_checkpoint(os.path.join(args.out_dir, "checkpoints"))
    if found is None:
        raise ConfigError(f"no checkpoints found under {args.out_dir}")
    arrays, _ = read_container(found[1])
    net.load_state_arrays(
        {k: v for k, v in arrays.items() if k.split("/")[0] in ("param", "buffer", "gate")})
    arch = compile_network(net)
    profile = None
    if config.search.latency_profile is not None:
        profile = fit_latency(parse_latency_profile(config.search.latency_profile))
    report = resource_report(arch, profile)
    arch.resources = {"parameters": report["parameters"], "flops": report["flops"],
                      "predicted_latency_ms": report["predicted_latency_ms"],
                      "head_parameters": report["head_parameters"],
                      "head_flops": report["head_flops"]}
    out = args.arch_out or os.path.join(args.out_dir, "architecture.json")
    write_architecture(arch, out)
    _print_report(report)
    print(f"architecture: {out}")
    return 0


def cmd_report(args):
    if (args.arch is None) == (args.config is None):
        raise ConfigError("report needs exactly one of --arch or --config")
    profile = fit_latency(parse_latency_profile(args.profile)) if args.profile else None
    if args.arch is not None:
        arch = load_architecture(args.arch)
    else:
        config = parse_config(args.config)
        c, h, w, n_classes = dataset_geometry(config.dataset, config.seed)
        rng = np.random.default_rng(config.seed)
        net = build_network(config, (c, h, w), n_classes, rng)
        arch = compile_network(net)  # gates start fully open: the dense preset
    report = resource_report(arch, profile)
    _print_report(report)
    if args.out_dir:
        _write_report_files(report, args.out_dir)
    return 0


def cmd_fit_latency(args):
    samples = parse_latency_profile(args.profile)
    profile = fit_latency(samples)
    for key in sorted(profile.coef):
        a, b = profile.coef[key]
        h, w, k, stride, groups = key
        print(f"condition H={h} W={w} k={k} stride={stride} groups={groups}: a={a!r} b={b!r}")
    if args.json_out:
        import json
        doc = {" ".join(map(str, key)): list(coef) for key, coef in sorted(profile.coef.items())}
        with open(args.json_out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_eval(args):
    config = parse_config(args.config)
    arch = load_architecture(args.arch)
    _, test = load_dataset(config)
    acc = arch.evaluate(test.images, test.labels, batch_size=args.batch_size)
    print(f"accuracy: {acc!r}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_stage(args, through=None)
        if args.command == "pretrain":
            return cmd_stage(args, through="pretrain")
        if args.command == "search":
            return cmd_stage(args, through="search")
        if args.command == "finetune":
            return cmd_stage(args, through=None)
        if args.command == "compile":
            return cmd_compile(args)
        if args.command == "report":
            return cmd_report(args)
        if args.command == "fit-latency":
            return cmd_fit_latency(args)
        if args.command == "eval":
            return cmd_eval(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except GateSearchError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"io-error: {exc}", file=sys.stderr)
        return EXIT_CODES["io-error"]


if __name__ == "__main__":
    sys.exit(main())
