"""Command-line entry point: perimetry, simulate, analyze, compare, report."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import orjson
import yaml

from .core import TrialLogError, VisualFieldProfile, read_trials
from .metrics import exclusion_summary, metrics_row, read_metrics_csv, write_metrics_csv
from .perimetry import ModelResponder, PerimetryConfig, run_perimetry
from .stats import DEFAULT_PARAMETERS, ReportError, TostConfig, compare, render_report
from .study import ConfigError, StudyConfig, default_study, load_manifest, load_profile_file, write_study

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

log = logging.getLogger("tunnelsim")


class DataError(Exception):
    """Input data is unreadable or inconsistent."""


def _load_yaml(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return data


def _dump_json(path: str, doc) -> None:
    Path(path).write_bytes(orjson.dumps(doc, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS) + b"\n")


def _read_profile(path: str) -> VisualFieldProfile:
    try:
        return load_profile_file(path)
    except (OSError, orjson.JSONDecodeError, ValueError, TypeError, KeyError) as exc:
        raise DataError(f"cannot read visual field profile {path}: {exc}") from None


# -- subcommands ----------------------------------------------------------

def cmd_perimetry(args) -> int:
    conf = _load_yaml(args.config)
    try:
        pcfg = PerimetryConfig(**conf.get("perimetry", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"perimetry config: {exc}") from None
    if args.truth is None:
        raise ConfigError("perimetry needs --truth")
    if args.delay < 0 or not 0 <= args.lapse < 1:
        raise ConfigError("--delay must be non-negative and --lapse in [0, 1)")
    truth = _read_profile(args.truth)
    responder = ModelResponder(truth, reaction_delay=args.delay, lapse_rate=args.lapse, seed=args.seed,
                               target_radius=pcfg.target_radius, mode=pcfg.detection)
    result = run_perimetry(truth, responder, pcfg)
    profile = result.to_profile()
    doc = profile.to_json()
    doc["aborted_sweeps"] = result.aborted_sweeps
    doc["reaction_delay"] = args.delay
    _dump_json(args.out, doc)
    print(f"measured mean radius {profile.mean_radius():.3f} deg (truth {truth.mean_radius():.3f}) -> {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.config:
        cfg = StudyConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
    else:
        cfg = default_study(args.seed or 0)
    if args.sessions is not None:
        if args.sessions < 1:
            raise ConfigError("--sessions must be positive")
        cfg = cfg.with_overrides(sessions=args.sessions)
    manifest = write_study(cfg, args.out, progress=lambda pid, n: log.info("participant %s: %d trials", pid, n))
    total = sum(sum(p["trials"].values()) for p in manifest["participants"])
    print(f"{len(manifest['participants'])} participants, {total} trials -> {args.out}")
    return EXIT_OK


def _rows_from_log(path: Path, vf: VisualFieldProfile, participant: str, group: str) -> list:
    try:
        return [metrics_row(rec, vf, participant, group) for rec in read_trials(path)]
    except TrialLogError as exc:
        raise DataError(f"{path}: {exc}") from None
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def cmd_analyze(args) -> int:
    if args.input is None:
        raise ConfigError("analyze needs --in")
    src = Path(args.input)
    override = _read_profile(args.vf) if args.vf else None
    rows = []
    if src.is_dir():
        try:
            manifest = load_manifest(src)
        except ValueError as exc:
            raise DataError(str(exc)) from None
        for p in manifest["participants"]:
            vf = override or _read_profile(str(src / p["vf"]))
            rows.extend(_rows_from_log(src / p["log"], vf, p["id"], p["group"]))
    else:
        if override is None:
            raise ConfigError("analyzing a single trial log needs --vf")
        if not src.exists():
            raise DataError(f"no such trial log {src}")
        rows = _rows_from_log(src, override, args.participant, args.group)
    write_metrics_csv(args.out, rows)
    for (group, task), s in sorted(exclusion_summary(rows).items()):
        print(f"{group or '-'} {task:<10} total {s.total:6d}  analyzed {s.analyzed:6d}  "
              f"excluded {s.excluded:4d}  missing {s.missing:4d}")
    return EXIT_OK


def _read_rows(path: str, group: Optional[str] = None) -> list:
    try:
        rows = read_metrics_csv(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if group is not None:
        for r in rows:
            r["group"] = group
    return rows


def cmd_compare(args) -> int:
    conf = _load_yaml(args.config).get("compare", {})
    try:
        tcfg = TostConfig(float(conf.get("delta_factor", 0.2)), float(conf.get("alpha", 0.05)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"compare config: {exc}") from None
    mode = args.tost_mode or conf.get("tost_mode", "trial")
    if mode not in ("trial", "participant"):
        raise ConfigError(f"unknown TOST mode {mode!r}")
    if args.params is None:
        params = list(conf.get("params", DEFAULT_PARAMETERS))
    else:
        params = [p.strip() for p in args.params.split(",") if p.strip()]
    if args.a or args.b:
        if not (args.a and args.b):
            raise ConfigError("--a and --b must be given together")
        rows = _read_rows(args.a, "A") + _read_rows(args.b, "B")
        ga, gb = "A", "B"
    elif args.input:
        rows = _read_rows(args.input)
        if args.groups:
            labels = [g.strip() for g in args.groups.split(",")]
            if len(labels) != 2:
                raise ConfigError("--groups needs exactly two labels")
        else:
            labels = sorted(set(r["group"] for r in rows))
            if len(labels) != 2:
                raise DataError(f"expected exactly two groups in {args.input}, found {labels}")
        ga, gb = labels
    else:
        raise ConfigError("compare needs --a/--b or --in")
    try:
        report = compare(rows, params, ga, gb, tcfg, mode)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    _dump_json(args.out, report)
    print(render_report(report), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.input is None:
        raise ConfigError("report needs --in")
    try:
        doc = orjson.loads(Path(args.input).read_bytes())
        text = render_report(doc)
    except OSError as exc:
        raise DataError(f"cannot read {args.input}: {exc}") from None
    except (orjson.JSONDecodeError, ReportError) as exc:
        raise DataError(f"{args.input}: {exc}") from None
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


# -- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tunnelsim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True, seed_default=0):
        p.add_argument("--seed", type=int, default=seed_default, help="random seed")
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--out", required=out_required, help="output path")

    p = sub.add_parser("perimetry", help="measure a visual field profile by simulated kinetic perimetry")
    common(p)
    p.add_argument("--truth", help="true visual field profile (JSON)")
    p.add_argument("--delay", type=float, default=0.0, help="responder reaction delay in seconds")
    p.add_argument("--lapse", type=float, default=0.0, help="probability of a missed response per frame")
    p.set_defaults(func=cmd_perimetry)

    p = sub.add_parser("simulate", help="simulate a study and write logs, profiles and a manifest")
    common(p, seed_default=None)
    p.add_argument("--sessions", type=int, help="override the number of sessions")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="compute per-trial metrics from trial logs")
    common(p)
    p.add_argument("--in", dest="input", help="study directory or trial log (JSON lines)")
    p.add_argument("--vf", help="visual field profile used for analysis")
    p.add_argument("--participant", default="", help="participant id for a single log")
    p.add_argument("--group", default="", help="group label for a single log")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compare", help="equivalence, difference and learning-rate tests between two groups")
    common(p)
    p.add_argument("--a", help="metrics CSV of group A")
    p.add_argument("--b", help="metrics CSV of group B")
    p.add_argument("--in", dest="input", help="metrics CSV holding both groups")
    p.add_argument("--groups", help="two group labels, e.g. A,B")
    p.add_argument("--params", help="comma-separated parameters (default: all)")
    p.add_argument("--tost-mode", choices=("trial", "participant"), help="TOST on trial residuals or participant means")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="render a comparison report as a table")
    common(p, out_required=False)
    p.add_argument("--in", dest="input", help="report JSON")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
