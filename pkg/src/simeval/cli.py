"""Command-line front end: ``generate``, ``run``, ``align`` and ``report``.

Every command writes into a scratch directory next to ``--out`` and moves the
files into place only after the whole command succeeded, so a failed run
leaves no partial outputs behind.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
import tempfile
from pathlib import Path

from . import __version__
from .data import dumps_transactions, simulate_analyst, write_analyst_log
from .engine import ExperimentConfig, ExperimentReport, StageError, load_data, report_flags, run_experiment
from .errors import ComputationError, ConfigError, DataError, MetricError, SimEvalError
from .explainers import dumps_explanations, load_explanations
from .metrics import (CONCEPT_CLASSES, avg_feature_alignment, check_reasons, format_estimate,
                      load_reasons, load_score_sheets)
from .seeding import derive_seed
from .trees import dumps_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_COMPUTATION = 4
EXIT_OTHER = 1


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class OutputDir:
    """Collects files in a scratch directory and publishes them on success."""

    def __init__(self, out):
        self.out = Path(out)
        try:
            self.out.parent.mkdir(parents=True, exist_ok=True)
            self.tmp = Path(tempfile.mkdtemp(prefix=".simeval-", dir=self.out.parent))
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {self.out}: {exc}") from None
        self.files: list[str] = []

    def write(self, name, text):
        path = self.tmp / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        self.files.append(name)
        return path

    def manifest(self, command, cfg_raw, seed, inputs=()):
        doc = {
            "tool": "simeval", "tool_version": __version__, "command": command, "seed": seed,
            "config": cfg_raw,
            "artifacts": {n: {"path": n, "sha256": sha256_file(self.tmp / n)} for n in sorted(self.files)},
            "inputs": {str(p): sha256_file(p) for p in sorted(set(map(str, inputs)))},
        }
        self.write("manifest.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")

    def publish(self):
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            for name in self.files:
                dest = self.out / name
                dest.parent.mkdir(parents=True, exist_ok=True)
                (self.tmp / name).replace(dest)
        except OSError as exc:
            raise ConfigError(f"cannot write to output directory {self.out}: {exc}") from None
        finally:
            self.discard()

    def discard(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, et, ev, tb):
        if ev is not None:
            self.discard()
        return False


def _out_dir(args, cfg=None):
    if args.out:
        return Path(args.out)
    if cfg is not None and "dir" in cfg.section("output"):
        return cfg.path(cfg.section("output")["dir"])
    return Path("out")


def _config(args):
    if not args.config:
        raise ConfigError("--config is required")
    return ExperimentConfig.from_file(args.config, args.seed)


# ----------------------------------------------------------------- commands


def cmd_generate(args):
    cfg = _config(args)
    if cfg.data.get("source", "synthetic") != "synthetic":
        raise ConfigError("generate needs data.source = 'synthetic'")
    history, experiment = load_data(cfg)
    with OutputDir(_out_dir(args, cfg)) as out:
        out.write("history.csv", dumps_transactions(history))
        out.write("transactions.csv", dumps_transactions(experiment))
        an = cfg.section("analyst")
        if an:
            log = simulate_analyst(experiment, tuple(an.get("error_rates", (0.1, 0.1))),
                                   float(an.get("suspicious_rate", 0.1)), derive_seed(cfg.seed, "analyst"))
            write_analyst_log(log, out.tmp / "analyst_log.csv", experiment.ids.tolist())
            out.files.append("analyst_log.csv")
        out.manifest("generate", cfg.raw, cfg.seed, [args.config])
        out.publish()
    print(f"wrote {len(history)} history and {len(experiment)} experiment transactions to {out.out}")
    return EXIT_OK


def cmd_run(args):
    cfg = _config(args)
    arms = [a for a in args.arms.split(",") if a] if args.arms else None
    if args.arms is not None and not arms:
        raise ConfigError("--arms names no arm")
    art = run_experiment(cfg, parallel=args.parallel, arms_filter=arms)
    with OutputDir(_out_dir(args, cfg)) as out:
        out.write("report.json", art.report.to_json())
        out.write("report.txt", art.report.render())
        out.write("history.csv", dumps_transactions(art.history))
        out.write("transactions.csv", dumps_transactions(art.experiment))
        out.write("original_model.json", dumps_model(art.original_model) + "\n")
        order = {t: k for k, t in enumerate(art.experiment.ids.tolist())}
        for arm in art.report.arms:
            if arm.parent is None and arm.arm in art.explanations:
                expl = art.explanations[arm.arm]
                rows = [(t, expl[t]) for t in sorted(expl, key=order.__getitem__)]
                out.write(f"explanations/{arm.arm}.csv", dumps_explanations(rows, arm.k))
        if art.analyst_log is not None:
            write_analyst_log(art.analyst_log, out.tmp / "analyst_log.csv", art.experiment.ids.tolist())
            out.files.append("analyst_log.csv")
        inputs = [args.config] + [cfg.path(p) for p in _input_files(cfg)]
        out.manifest("run", cfg.raw, cfg.seed, inputs)
        out.publish()
    sys.stdout.write(art.report.render())
    return EXIT_OK


def _input_files(cfg):
    files = [cfg.data[k] for k in ("history", "transactions") if cfg.data.get("source") == "files" and k in cfg.data]
    if "log" in cfg.section("analyst"):
        files.append(cfg.section("analyst")["log"])
    files += [a.explanations_path for a in cfg.arms() if a.explanations_path and a.parent is None]
    return files


def alignment_table(results):
    """Rows of ``explainer | fraudulent concepts | legitimate concepts``."""
    width = max([len(e) for e in results] + [9])
    lines = ["Average feature alignment (higher is better); parentheses contain "
             f"{_level(results):g} percent pivotal bootstrap CIs", "",
             f"{'explainer':<{width}} | {'fraudulent':<20} | {'legitimate':<20}", "-" * (width + 46)]
    for name, cols in results.items():
        cells = [format_estimate(cols[c]["ci_obj"], digits=2) if cols[c] else "n/a" for c in CONCEPT_CLASSES]
        lines.append(f"{name:<{width}} | {cells[0]:<20} | {cells[1]:<20}")
    return "\n".join(lines) + "\n"


def _level(results):
    for cols in results.values():
        for c in cols.values():
            if c:
                return c["ci_obj"].level
    return 90


def cmd_align(args):
    cfg = ExperimentConfig.from_file(args.config, args.seed) if args.config else None
    B = cfg.B if cfg else 2000
    alpha = cfg.alpha if cfg else 0.10
    seed = cfg.seed if cfg else (args.seed or 0)
    mode = args.mode or (cfg.section("alignment").get("mode", "per_feature") if cfg else "per_feature")
    sheets = load_score_sheets(args.sheets)
    reasons = load_reasons(args.reasons)
    check_reasons(reasons, sheets)
    by_explainer: dict[str, dict] = {}
    for path in args.explanations:
        for name, expl in load_explanations(path).items():
            if name in by_explainer:
                raise DataError(f"explainer {name!r} appears in more than one explanations file")
            by_explainer[name] = expl
    if not by_explainer:
        raise DataError("no explanations loaded")
    for name in sorted(by_explainer):
        missing = sorted(set(reasons) - set(by_explainer[name]))
        if missing:
            raise DataError(f"transaction {missing[0]!r} has reasons but no {name} explanation")
    results: dict[str, dict] = {}
    for name in sorted(by_explainer):
        results[name] = {}
        for cls in CONCEPT_CLASSES:
            try:
                res = avg_feature_alignment(by_explainer[name], sheets, reasons, cls, mode=mode, B=B,
                                            alpha=alpha, seed=derive_seed(seed, "align", name, cls))
            except MetricError as exc:
                if "no transaction" not in str(exc):
                    raise
                results[name][cls] = None
                continue
            results[name][cls] = {"value": res.value, "ci": res.ci.as_record(),
                                  "n_transactions": res.n_transactions, "ci_obj": res.ci}
    text = alignment_table(results)
    record = {n: {c: (None if v is None else {k: x for k, x in v.items() if k != "ci_obj"}) for c, v in cols.items()}
              for n, cols in results.items()}
    doc = json.dumps({"tool_version": __version__, "mode": mode, "seed": seed, "B": B, "alpha": alpha,
                      "alignment": record}, indent=1, sort_keys=True) + "\n"
    with OutputDir(_out_dir(args, cfg)) as out:
        out.write("alignment.json", doc)
        out.write("alignment.txt", text)
        out.manifest("align", cfg.raw if cfg else {}, seed,
                     [p for p in [args.config, args.sheets, args.reasons, *args.explanations] if p])
        out.publish()
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args):
    try:
        text = Path(args.report).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read report {args.report}: {exc}") from None
    try:
        report = ExperimentReport.from_json(text)
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed report {args.report}: {exc}") from None
    if not report.arms:
        raise DataError("report contains no arms")
    report_flags(report)
    sys.stdout.write(report.render())
    return EXIT_OK


# -------------------------------------------------------------------- main


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (TOML)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--parallel", type=int, default=1, metavar="N", help="worker threads")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="simeval", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"simeval {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write synthetic transactions and analyst log")
    p.set_defaults(func=cmd_generate)
    p = sub.add_parser("run", parents=[common], help="run every configured arm and write the report")
    p.add_argument("--arms", help="comma-separated subset of arm names")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("align", parents=[common], help="average feature alignment per explainer")
    p.add_argument("--explanations", action="append", required=True, help="explanations file (repeatable)")
    p.add_argument("--sheets", required=True, help="analyst score sheets file")
    p.add_argument("--reasons", required=True, help="transaction reasons file")
    p.add_argument("--mode", choices=("per_feature", "per_transaction"))
    p.set_defaults(func=cmd_align)
    p = sub.add_parser("report", parents=[common], help="render a machine-readable report")
    p.add_argument("report", help="report.json written by 'run'")
    p.set_defaults(func=cmd_report)
    return parser


def exit_code(exc):
    if isinstance(exc, StageError):
        if isinstance(exc.cause, OSError):
            return EXIT_DATA
        if not isinstance(exc.cause, SimEvalError):
            return EXIT_COMPUTATION
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, ComputationError):
        return EXIT_COMPUTATION
    return EXIT_OTHER


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.parallel < 1:
        print("simeval: error: --parallel must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except SimEvalError as exc:
        print(f"simeval: error: {exc}", file=sys.stderr)
        return exit_code(exc)
    except OSError as exc:
        print(f"simeval: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
