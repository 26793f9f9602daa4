"""Command-line surface: each pipeline stage is independently scriptable.

Exit codes: 0 success, 1 usage error, 2 runtime error. Output files are
written atomically (temp + rename). Config fields are overridable with
repeated ``--set dotted.path=value`` flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .adaptation import build_adaptation_set, load_query_pool, score_difficulty
from .archive import open_archive
from .diagnostics import (
    DEFAULT_LAYER_PATTERN,
    DEFAULT_MODULE_RULES,
    interference_sweep,
    layerwise_norms,
    load_module_rules,
    modulewise_activation,
    sign_interference,
    write_interference_csv,
    write_modulewise_csv,
    write_norms_csv,
)
from .errors import TvfuseError
from .pipeline import (
    PipelineConfig,
    apply_overrides,
    atomic_write_text,
    load_config,
    load_report,
    run_pipeline,
)
from .task_vector import (
    extract_task_vector,
    global_l2_norm,
    load_task_vector,
    merge,
    rescale,
    save_task_vector,
    sparsify,
)

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise UsageError(message)


def _load_config_with_overrides(args) -> PipelineConfig:
    from .errors import ConfigError

    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load config {args.config}: {exc}") from exc
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects DOTTED.PATH=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = value
    return PipelineConfig.from_dict(apply_overrides(raw, overrides))


# --- subcommand handlers -----------------------------------------------------------


def cmd_extract(args) -> int:
    base = open_archive(args.base)
    finetuned = open_archive(args.finetuned)
    tv = extract_task_vector(base, finetuned, allow_dtype_mismatch=args.allow_dtype_mismatch)
    if args.base_id:
        tv.source_base_id = args.base_id
    if args.ft_id:
        tv.source_ft_id = args.ft_id
    save_task_vector(tv, args.out, dtype=args.dtype)
    print(f"wrote task vector ({tv.num_parameters} parameters) to {args.out}")
    return 0


def cmd_sparsify(args) -> int:
    tv = load_task_vector(args.vector)
    original_norm = global_l2_norm(tv)
    sparse = sparsify(tv, args.retention, mode=args.mode, scope=args.scope)
    if not args.no_rescale:
        sparse = rescale(sparse, original_norm, args.epsilon)
    save_task_vector(sparse, args.out)
    info = sparse.sparsity
    print(
        f"retained {info.retained_count} entries (threshold {info.threshold:.6g}, "
        f"gamma {info.rescale_gamma if info.rescale_gamma is not None else 1.0:.6g}) -> {args.out}"
    )
    return 0


def cmd_merge(args) -> int:
    parsed: list[tuple[str, float]] = []
    for spec in args.term:
        path, _, coeff = spec.rpartition("=")
        if not path:
            raise UsageError(f"--term must look like PATH=COEFF, got {spec!r}")
        try:
            parsed.append((path, float(coeff)))
        except ValueError:
            raise UsageError(f"--term coefficient is not a number in {spec!r}") from None
    base = open_archive(args.base)
    terms = [(load_task_vector(path), coeff) for path, coeff in parsed]
    merge(base, terms, args.out, out_dtype=args.dtype)
    print(f"wrote merged model to {args.out}")
    return 0


def cmd_analyze_norms(args) -> int:
    tv = load_task_vector(args.vector)
    profile = layerwise_norms(tv, args.pattern)
    if args.out_csv:
        write_norms_csv(profile, args.out_csv)
    payload = {
        "per_layer": {str(k): v for k, v in profile.per_layer.items()},
        "non_layer": profile.non_layer,
        "global_norm": profile.global_norm(),
    }
    if args.out_json:
        atomic_write_text(Path(args.out_json), json.dumps(payload, indent=2))
    print(json.dumps(payload))
    return 0


def cmd_analyze_interference(args) -> int:
    tv_a = load_task_vector(args.a)
    tv_b = load_task_vector(args.b)
    report = sign_interference(tv_a, tv_b, args.retain_a, args.retain_b)
    if args.out_csv:
        write_interference_csv([report], args.out_csv)
    print(
        json.dumps(
            {
                "retention_a_fraction": report.retention_a,
                "retention_b_fraction": report.retention_b,
                "conflict_ratio": report.conflict_ratio,
                "denominator_count": report.denominator_count,
            }
        )
    )
    return 0


def cmd_analyze_sweep(args) -> int:
    tv_a = load_task_vector(args.a)
    tv_b = load_task_vector(args.b)
    retentions = [float(x) for x in args.retentions.split(",") if x]
    reports = interference_sweep(tv_a, tv_b, retentions, args.retain_b)
    if args.out_csv:
        write_interference_csv(reports, args.out_csv)
    for report in reports:
        print(f"{report.retention_a:.3f},{report.conflict_ratio:.6f},{report.denominator_count}")
    return 0


def cmd_analyze_modules(args) -> int:
    tv = load_task_vector(args.vector)
    rules = load_module_rules(args.rules) if args.rules else DEFAULT_MODULE_RULES
    ratios = modulewise_activation(tv, args.retention, rules)
    if args.out_csv:
        write_modulewise_csv(ratios, args.retention, args.out_csv)
    print(json.dumps({cls.value: ratio for cls, ratio in ratios.items()}))
    return 0


def cmd_select_data(args) -> int:
    config = _load_config_with_overrides(args)
    config.validate()
    from .pipeline import WorkspacePaths, build_backend, _stage_select_data

    paths = WorkspacePaths(Path(config.workspace))
    selection = _stage_select_data(config, paths, build_backend(config), resume=args.resume)
    print(
        f"selected {len(selection.selected)} queries "
        f"({selection.drawn_from_low} low / {selection.drawn_from_medium} medium, "
        f"backfill {selection.backfill_count}) -> {paths.adaptation_set}"
    )
    return 0


def cmd_search(args) -> int:
    config = _load_config_with_overrides(args)
    report = run_pipeline(config, resume=args.resume, final_merge=False)
    print(
        f"coefficients {tuple(report.coefficients)} via {report.selection_rule}; "
        f"trial log at {report.trial_log}"
    )
    return 0


def cmd_run(args) -> int:
    config = _load_config_with_overrides(args)
    report = run_pipeline(config, resume=args.resume, final_merge=True)
    print(
        f"merged model at {report.final_model} with coefficients "
        f"{tuple(report.coefficients)} ({report.selection_rule})"
    )
    return 0


def cmd_report(args) -> int:
    report = load_report(args.workspace)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


# --- parser -----------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="tvfuse", description=__doc__)
    parser.add_argument("--version", action="version", version=f"tvfuse {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract a task vector from a checkpoint pair")
    p.add_argument("--base", required=True)
    p.add_argument("--finetuned", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--base-id", default="")
    p.add_argument("--ft-id", default="")
    p.add_argument("--dtype", default="F32", choices=["F32", "F16", "BF16"])
    p.add_argument("--allow-dtype-mismatch", action="store_true")
    p.set_defaults(handler=cmd_extract)

    p = sub.add_parser("sparsify", help="prune a task vector and restore its norm")
    p.add_argument("--vector", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--retention", type=float, default=0.30)
    p.add_argument("--mode", default="exact", choices=["exact", "streaming"])
    p.add_argument("--scope", default="global", choices=["global", "per_tensor"])
    p.add_argument("--epsilon", type=float, default=1e-8)
    p.add_argument("--no-rescale", action="store_true")
    p.set_defaults(handler=cmd_sparsify)

    p = sub.add_parser("merge", help="base + sum(coefficient * task vector)")
    p.add_argument("--base", required=True)
    p.add_argument("--term", action="append", required=True, metavar="PATH=COEFF")
    p.add_argument("--out", required=True)
    p.add_argument("--dtype", default=None, choices=["F32", "F16", "BF16"])
    p.set_defaults(handler=cmd_merge)

    analyze = sub.add_parser("analyze", help="diagnostics over task vectors")
    asub = analyze.add_subparsers(dest="analysis", required=True)

    p = asub.add_parser("norms", help="layer-wise L2 norms")
    p.add_argument("--vector", required=True)
    p.add_argument("--pattern", default=DEFAULT_LAYER_PATTERN)
    p.add_argument("--out-csv")
    p.add_argument("--out-json")
    p.set_defaults(handler=cmd_analyze_norms)

    p = asub.add_parser("sign-interference", help="opposite-sign fraction of two vectors")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--retain-a", type=float, default=1.0)
    p.add_argument("--retain-b", type=float, default=0.1)
    p.add_argument("--out-csv")
    p.set_defaults(handler=cmd_analyze_interference)

    p = asub.add_parser("sweep", help="interference across retentions of the first vector")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--retentions", default="1.0,0.9,0.8,0.7,0.6,0.5,0.4,0.3,0.2,0.1")
    p.add_argument("--retain-b", type=float, default=0.1)
    p.add_argument("--out-csv")
    p.set_defaults(handler=cmd_analyze_sweep)

    p = asub.add_parser("modules", help="module-wise activated-parameter fractions")
    p.add_argument("--vector", required=True)
    p.add_argument("--retention", type=float, default=0.1)
    p.add_argument("--rules", help="JSON rule file overriding the default table")
    p.add_argument("--out-csv")
    p.set_defaults(handler=cmd_analyze_modules)

    for name, handler, description in (
        ("select-data", cmd_select_data, "score difficulty and build the adaptation set"),
        ("search", cmd_search, "search combination coefficients (no final model write)"),
        ("run", cmd_run, "full pipeline through the final merged model"),
    ):
        p = sub.add_parser(name, help=description)
        p.add_argument("--config", required=True)
        p.add_argument("--resume", action="store_true")
        p.add_argument(
            "--set",
            action="append",
            metavar="DOTTED.PATH=VALUE",
            help="override a config field, e.g. --set search.n_trials=20",
        )
        p.set_defaults(handler=handler)

    p = sub.add_parser("report", help="print and re-validate a run report")
    p.add_argument("--workspace", required=True)
    p.set_defaults(handler=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except TvfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # unexpected; still a runtime failure
        logger.exception("unhandled failure")
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
