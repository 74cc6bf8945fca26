"""Command-line experiment runner.

    kvremap gen     --out trace.bin [generator flags]
    kvremap run     --policies full,page:16,starc --budget 1024 --out results/
    kvremap sweep   --policies page:16,starc --budgets 256,512,1024,2048 --out results/
    kvremap inspect trace.bin | results/steps.csv

``--config FILE`` reads a JSON object whose keys are the long flag names
(dashes or underscores); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import Counter
from dataclasses import fields
from pathlib import Path

from .experiment import (
    STEP_FIELDS,
    InvariantViolation,
    Policy,
    SimConfig,
    dedupe_budgets,
    run_seeds,
    summarize,
    write_steps_csv,
    write_summary,
)
from .pim import CostModel, PimGeometry, load_hw_config
from .workload import MAGIC, SyntheticConfig, TraceFormatError, generate, load_trace, read_header, save_trace

log = logging.getLogger("kvremap")

GEN_FIELDS = [f for f in fields(SyntheticConfig) if f.name != "seed"]
RUN_DEFAULTS = {
    "policies": "full,page:16,token_oracle,starc",
    "budget": 1024,
    "budgets": None,
    "seeds": "0",
    "trace": None,
    "hw_config": None,
    "interval": 128,
    "tokens_per_cluster": 32,
    "no_step_records": False,
    "no_output_error": False,
}


class CliError(Exception):
    pass


def _int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    if isinstance(text, int):
        return [text]
    return [int(x) for x in str(text).split(",") if x.strip()]


def _str_list(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        return [str(x) for x in text]
    return [x.strip() for x in str(text).split(",") if x.strip()]


def _add_generator_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic workload")
    for f in GEN_FIELDS:
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=type(f.default), default=None,
                       help=f"default {f.default}")


def _add_run_flags(p: argparse.ArgumentParser, sweep: bool) -> None:
    p.add_argument("--config", help="JSON file supplying any of these flags")
    p.add_argument("--policies", default=None,
                   help="comma list of full, window, token_oracle, sparq:R, page:SIZE, starc")
    if sweep:
        p.add_argument("--budgets", default=None, help="comma list of token budgets")
    else:
        p.add_argument("--budget", type=int, default=None, help="token budget B (default 1024)")
    p.add_argument("--seeds", default=None, help="comma list of seeds (default 0)")
    p.add_argument("--trace", default=None, help="trace file; omit to generate one per seed")
    p.add_argument("--hw-config", dest="hw_config", default=None, help="key=value geometry/cost file")
    p.add_argument("--interval", type=int, default=None, help="clustering interval I (default 128)")
    p.add_argument("--tokens-per-cluster", dest="tokens_per_cluster", type=int, default=None,
                   help="cluster count divisor (default 32)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--no-step-records", dest="no_step_records", action="store_true", default=None,
                   help="skip writing steps.csv")
    p.add_argument("--no-output-error", dest="no_output_error", action="store_true", default=None,
                   help="skip attention output error (faster)")
    _add_generator_flags(p)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kvremap", description="Clustered KV remapping simulator for row-granular PIM")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic trace file")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    _add_generator_flags(g)

    _add_run_flags(sub.add_parser("run", help="simulate one budget"), sweep=False)
    _add_run_flags(sub.add_parser("sweep", help="simulate several budgets"), sweep=True)

    i = sub.add_parser("inspect", help="validate a trace file or a steps.csv report")
    i.add_argument("path")
    return ap


def _merge_config(args: argparse.Namespace) -> dict:
    opts = dict(RUN_DEFAULTS)
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise CliError("config file must hold a JSON object")
        known = set(RUN_DEFAULTS) | {f.name for f in GEN_FIELDS} | {"out"}
        for k, v in raw.items():
            key = k.replace("-", "_")
            if key not in known:
                raise CliError(f"unknown config key {k!r}")
            opts[key] = v
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "command", "verbose"):
            opts[k] = v
    return opts


def _gen_config(opts: dict, seed: int) -> SyntheticConfig:
    kw = {f.name: type(f.default)(opts[f.name]) for f in GEN_FIELDS if opts.get(f.name) is not None}
    return SyntheticConfig(seed=seed, **kw)


def experiment(opts: dict, budgets: list[int]) -> Path:
    try:
        policies = [Policy.parse(p) for p in _str_list(opts["policies"])]
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if not policies:
        raise CliError("at least one policy is required")
    if len({p.name for p in policies}) != len(policies):
        raise CliError("duplicate policy in --policies")
    budgets = dedupe_budgets(budgets)
    if not budgets or min(budgets) < 1:
        raise CliError("budgets must be >= 1")
    seeds = _int_list(opts["seeds"])
    if not seeds:
        raise CliError("at least one seed is required")
    if not opts.get("out"):
        raise CliError("--out is required")

    geom, cm = PimGeometry(), CostModel()
    if opts.get("hw_config"):
        try:
            geom, cm = load_hw_config(opts["hw_config"])
        except (OSError, ValueError) as exc:
            raise CliError(f"bad hardware config {opts['hw_config']}: {exc}") from None

    if opts.get("trace"):
        try:
            trace = load_trace(opts["trace"])
        except (OSError, TraceFormatError) as exc:
            raise CliError(f"cannot load trace {opts['trace']}: {exc}") from None
        traces = [trace] * len(seeds)
    else:
        try:
            traces = [generate(_gen_config(opts, s)) for s in seeds]
        except ValueError as exc:
            raise CliError(f"invalid workload config: {exc}") from None

    for p in policies:
        if p.kind == "sparq" and p.param > traces[0].d_h:
            raise CliError(f"sparq r={p.param} exceeds head dimension {traces[0].d_h}")

    out = Path(opts["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from None
    try:
        cfg = SimConfig(
            policies=policies, budgets=budgets, geometry=geom, cost_model=cm,
            interval=int(opts["interval"]), tokens_per_cluster=int(opts["tokens_per_cluster"]),
            with_output_error=not opts.get("no_output_error"),
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    log.info("simulating %d seed(s), budgets %s, policies %s", len(seeds), budgets, [p.name for p in policies])
    records = run_seeds(traces, cfg, seeds)
    rows = summarize(records, cfg)
    try:
        if not opts.get("no_step_records"):
            write_steps_csv(records, out / "steps.csv")
        write_summary(rows, out)
    except OSError as exc:
        raise CliError(f"cannot write reports to {out}: {exc}") from None
    print((out / "summary.txt").read_text(), end="")
    return out


def cmd_gen(args) -> None:
    opts = {f.name: getattr(args, f.name) for f in GEN_FIELDS}
    try:
        trace = generate(_gen_config(opts, args.seed))
    except ValueError as exc:
        raise CliError(f"invalid workload config: {exc}") from None
    try:
        save_trace(trace, args.out)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}") from None
    print(f"wrote {args.out}: d_h={trace.d_h} prefill={trace.prefill_len} total={trace.total_len}")


def inspect_steps_csv(path: Path) -> str:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != STEP_FIELDS:
            raise CliError(f"{path}: unexpected columns {reader.fieldnames}")
        keys = Counter()
        policies = set()
        for n, row in enumerate(reader, 2):
            try:
                key = (int(row["seed"]), int(row["budget"]), int(row["step"]), row["policy"])
                recall = float(row["recall"])
                processed, useful = int(row["processed_tokens"]), int(row["useful_tokens"])
            except ValueError as exc:
                raise CliError(f"{path}:{n}: {exc}") from None
            if not 0.0 <= recall <= 1.0:
                raise CliError(f"{path}:{n}: recall {recall} outside [0, 1]")
            if processed < useful:
                raise CliError(f"{path}:{n}: processed tokens below useful tokens")
            keys[key] += 1
            policies.add(row["policy"])
    dup = [k for k, c in keys.items() if c > 1]
    if dup:
        raise CliError(f"{path}: duplicate record for seed/budget/step/policy {dup[0]}")
    per_run = Counter((s, b, p) for s, b, _, p in keys)
    steps = set(per_run.values())
    if len(steps) > 1:
        raise CliError(f"{path}: policies have differing step counts {sorted(steps)}")
    return f"{path}: {sum(keys.values())} records, policies {sorted(policies)}, {steps.pop() if steps else 0} steps each"


def cmd_inspect(args) -> None:
    path = Path(args.path)
    try:
        head = path.open("rb").read(len(MAGIC))
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from None
    if head == MAGIC:
        try:
            h = read_header(path.read_bytes()[:64])
            trace = load_trace(path)
        except TraceFormatError as exc:
            raise CliError(f"{path}: {exc}") from None
        print(f"{path}: trace v{h['version']} d_h={trace.d_h} prefill={trace.prefill_len} "
              f"total={trace.total_len} decode_steps={trace.decode_len} OK")
    else:
        print(inspect_steps_csv(path) + " OK")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen":
            cmd_gen(args)
        elif args.command == "inspect":
            cmd_inspect(args)
        else:
            opts = _merge_config(args)
            if args.command == "run":
                budgets = [int(opts["budget"])]
            else:
                if opts.get("budgets") is None:
                    raise CliError("--budgets is required for sweep")
                budgets = _int_list(opts["budgets"])
                if not budgets:
                    raise CliError("--budgets must list at least one budget")
            experiment(opts, budgets)
    except CliError as exc:
        print(f"kvremap: error: {exc}", file=sys.stderr)
        return 1
    except InvariantViolation as exc:
        print(f"kvremap: invariant violated: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
