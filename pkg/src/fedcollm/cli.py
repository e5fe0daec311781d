"""Command-line entry point.

Subcommands: fedcollm (full protocol run), baseline <kind>, eval,
commcost (transmitted-parameter table), report (figures + CSV from a
finished run). Exit status is 0 only when all phases completed and the
built-in invariant self-checks passed.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import BASELINE_KINDS, canonical_json, load_config
from .errors import FedCoLLMError
from .lora import LoraConfig, count_transmitted_params

COMMCOST_PRESETS = {
    # arch dims paired with published full-model parameter counts
    "gpt2": {"n_layers": 12, "d_model": 768, "rank": 8, "targets": ("q", "v"),
             "full_params": 124_000_000},
    "opt": {"n_layers": 24, "d_model": 2048, "rank": 16, "targets": ("q", "v"),
            "full_params": 1_316_000_000},
    "llama2": {"n_layers": 24, "d_model": 2048, "rank": 16, "targets": ("q", "v"),
               "full_params": 1_345_000_000},
}


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="JSON config file")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--out", metavar="DIR", help="output directory override")
    parser.add_argument("--transport", choices=("plain", "secure"),
                        help="transport override")


def _config_from_args(args) -> "ExperimentConfig":
    overrides = {"seed": args.seed, "out_dir": args.out, "transport": args.transport}
    return load_config(args.config, overrides)


def _print_report(report: dict) -> None:
    print(json.dumps(report, sort_keys=True, indent=2))


def cmd_fedcollm(args) -> int:
    from .experiment import run_fedcollm_experiment

    cfg = _config_from_args(args)
    print("effective config:", file=sys.stderr)
    print(canonical_json(cfg), file=sys.stderr)
    report = run_fedcollm_experiment(cfg)
    _print_report(report)
    return 0


def cmd_baseline(args) -> int:
    from .experiment import run_baseline

    cfg = _config_from_args(args)
    print("effective config:", file=sys.stderr)
    print(canonical_json(cfg), file=sys.stderr)
    report = run_baseline(args.kind, cfg)
    _print_report(report)
    return 0


def cmd_eval(args) -> int:
    from .experiment import run_eval_only

    cfg = _config_from_args(args)
    report = run_eval_only(cfg, args.slm_adapters, args.llm_adapters)
    _print_report(report)
    return 0


def cmd_commcost(args) -> int:
    if args.preset:
        row = dict(COMMCOST_PRESETS[args.preset])
    else:
        missing = [n for n in ("n_layers", "d_model", "rank", "full_params")
                   if getattr(args, n) is None]
        if missing:
            raise FedCoLLMError(
                f"commcost needs --preset or explicit dims; missing {missing}"
            )
        row = {
            "n_layers": args.n_layers, "d_model": args.d_model, "rank": args.rank,
            "targets": tuple(args.targets.split(",")), "full_params": args.full_params,
        }
    lora_cfg = LoraConfig.with_default_alpha(row["rank"], targets=row["targets"])
    count, fraction = count_transmitted_params(
        row["n_layers"], row["d_model"], lora_cfg, row["full_params"]
    )
    label = args.preset or "custom"
    print(f"{'row':<10} {'params':>12} {'pct_full':>9} {'bytes_plain':>12} {'bytes_fixed':>12}")
    print(f"{label:<10} {count:>12} {fraction * 100:>8.4f}% {count * 8:>12} {count * 4:>12}")
    return 0


def cmd_report(args) -> int:
    from .report import generate_report

    written = generate_report(args.run, args.out)
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedcollm",
        description="Desk-scale federated co-tuning of large and small language models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("fedcollm", help="run the full co-tuning protocol")
    _add_run_flags(run)
    run.set_defaults(func=cmd_fedcollm)

    base = sub.add_parser("baseline", help="run a baseline with the same reporting surface")
    base.add_argument("kind", choices=BASELINE_KINDS)
    _add_run_flags(base)
    base.set_defaults(func=cmd_baseline)

    ev = sub.add_parser("eval", help="evaluate fresh or checkpointed adapters")
    _add_run_flags(ev)
    ev.add_argument("--slm-adapters", metavar="CKPT")
    ev.add_argument("--llm-adapters", metavar="CKPT")
    ev.set_defaults(func=cmd_eval)

    cc = sub.add_parser("commcost", help="transmitted-parameter cost table")
    cc.add_argument("--preset", choices=sorted(COMMCOST_PRESETS))
    cc.add_argument("--n-layers", dest="n_layers", type=int)
    cc.add_argument("--d-model", dest="d_model", type=int)
    cc.add_argument("--rank", type=int)
    cc.add_argument("--targets", default="q,v")
    cc.add_argument("--full-params", dest="full_params", type=int)
    cc.set_defaults(func=cmd_commcost)

    rep = sub.add_parser("report", help="render figures and CSV from a run directory")
    rep.add_argument("--run", required=True, metavar="DIR")
    rep.add_argument("--out", metavar="DIR")
    rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FedCoLLMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
