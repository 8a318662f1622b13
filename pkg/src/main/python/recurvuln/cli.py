"""
Command line entry point.

Exit codes: 0 ran clean, 1 vulnerabilities confirmed, 2 operational error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from . import __version__
from .config import PipelineConfig, configure_logging, load_config
from .detector import FindingStatus
from .errors import ConfigError, RecurVulnError
from .evaluation import CaseReject, evaluate, filter_cases, load_cases
from .ledger import RunLedger
from .llm_gateway import LLMGateway
from .patch_engine import apply_to_origin
from .pipeline import load_report, manage, scan
from .vkb import GitCloneSource, LiveSource, OfflineBundle, VkbStore, build_record

logger = logging.getLogger(__name__)

EXIT_CLEAN = 0
EXIT_VULNERABLE = 1
EXIT_ERROR = 2

EVAL_FILE = "eval.json"
REJECTS_FILE = "rejects.json"


def _provider_overrides(spec: Optional[str]) -> Dict[str, Any]:
    if not spec:
        return {}
    if spec == "live":
        return {"llm.provider_kind": "live"}
    kind, _, path = spec.partition(":")
    if kind != "scripted" or not path:
        raise ConfigError(f"--provider must be 'live' or 'scripted:FILE', got '{spec}'")
    return {"llm.provider_kind": "scripted", "llm.script_path": path}


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {
        "detector.theta": getattr(args, "theta", None),
        "detector.window_w": getattr(args, "window", None),
        "equivalence_mode": getattr(args, "equivalence", None),
        "workers": getattr(args, "workers", None),
        "output_dir": getattr(args, "output", None),
        "version_label": getattr(args, "version_label", None),
        "ledger_url": getattr(args, "ledger_url", None),
        "cve_filter": getattr(args, "cve", None) or None,
    }
    for flag in ("no_vkb", "no_confirmation", "no_context_tools"):
        if getattr(args, flag, False):
            overrides[flag] = True
    overrides.update(_provider_overrides(getattr(args, "provider", None)))
    return overrides


def _config(args: argparse.Namespace) -> PipelineConfig:
    return load_config(args.config, _overrides(args))


def _print_json(data: Any) -> None:
    print(json.dumps(data, indent=2, sort_keys=False))


# -- subcommands ----------------------------------------------------------


def cmd_vkb_build(args: argparse.Namespace) -> int:
    config = _config(args)
    if args.offline_bundle:
        source = OfflineBundle(args.offline_bundle)
    elif args.git_clone:
        source = GitCloneSource(args.git_clone)
    else:
        source = LiveSource(timeout=config.llm.request_timeout)
    with LLMGateway(config.llm) as gateway:
        record = build_record(args.cve, args.commit, source, gateway)
    path = VkbStore(args.vkb).store(record)
    print(f"Stored {record.cve_id} ({len(record.points)} analysis points) at {path}")
    return EXIT_CLEAN


def cmd_vkb_list(args: argparse.Namespace) -> int:
    for cve_id in VkbStore(args.vkb).list_records():
        print(cve_id)
    return EXIT_CLEAN


def cmd_scan(args: argparse.Namespace) -> int:
    findings = scan(args.repo, args.vkb, _config(args))
    _print_json([f.model_dump(mode="json") for f in findings])
    logger.info(f"{len(findings)} candidate recurrences")
    return EXIT_CLEAN


def cmd_manage(args: argparse.Namespace) -> int:
    config = _config(args)
    report = manage(args.repo, args.vkb, config)
    if not args.no_ledger:
        RunLedger(config.ledger_url).record_run(report, str(config.output_dir))
    _print_json(report.summary.model_dump())
    return EXIT_VULNERABLE if report.summary.any_vulnerable else EXIT_CLEAN


def cmd_eval(args: argparse.Namespace) -> int:
    config = _config(args)
    rejects: List[CaseReject] = []
    cases = filter_cases(load_cases(args.dataset, rejects))
    with LLMGateway(config.llm) as gateway:
        outcome = evaluate(cases, config, args.dataset, provider=gateway.provider, rejects=rejects)
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / EVAL_FILE).write_text(outcome.model_dump_json(indent=2), encoding="utf-8")
    (output_dir / REJECTS_FILE).write_text(
        json.dumps([r.model_dump() for r in rejects], indent=2), encoding="utf-8")
    _print_json(outcome.model_dump(exclude={"per_case", "per_repo_pair"}))
    return EXIT_CLEAN


def cmd_apply(args: argparse.Namespace) -> int:
    """Apply the validated patches of a finished run to a checkout."""
    report = load_report(args.report)
    applied = 0
    for entry in report.findings:
        if entry.finding.status != FindingStatus.VALIDATED or not entry.patch_diff:
            continue
        files = apply_to_origin(args.repo, entry.patch_diff)
        print(f"{entry.finding.slug}: patched {', '.join(files)}")
        applied += 1
    logger.info(f"Applied {applied} validated patches to {args.repo}")
    return EXIT_CLEAN


def cmd_serve(args: argparse.Namespace) -> int:
    from .api import run_app

    run_app(args.host, args.port)
    return EXIT_CLEAN


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON configuration file")
    common.add_argument("--log-level", help="Override LOG_LEVEL")

    parser = argparse.ArgumentParser(prog="recurvuln", description="Recurring vulnerability management")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    vkb = sub.add_parser("vkb", help="Build or inspect the vulnerability knowledge base")
    vkb_sub = vkb.add_subparsers(dest="vkb_command", required=True)
    build = vkb_sub.add_parser("build", parents=[common], help="Ingest a CVE and its fixing commit")
    build.add_argument("--cve", required=True)
    build.add_argument("--commit", required=True, help="Fixing commit URL")
    build.add_argument("--vkb", default="vkb", help="Knowledge base directory")
    origin = build.add_mutually_exclusive_group()
    origin.add_argument("--offline-bundle", help="Directory with NVD JSON and commit contents")
    origin.add_argument("--git-clone", help="Local clone of the source repository")
    build.add_argument("--provider", help="live or scripted:FILE")
    build.set_defaults(handler=cmd_vkb_build)
    listing = vkb_sub.add_parser("list", parents=[common], help="List stored records")
    listing.add_argument("--vkb", default="vkb")
    listing.set_defaults(handler=cmd_vkb_list)

    scan_cmd = sub.add_parser("scan", parents=[common], help="Run the detectors only")
    scan_cmd.add_argument("--repo", required=True)
    scan_cmd.add_argument("--vkb", required=True)
    scan_cmd.set_defaults(handler=cmd_scan)

    manage_cmd = sub.add_parser("manage", parents=[common], help="Detect, confirm, repair and validate")
    manage_cmd.add_argument("--repo", required=True)
    manage_cmd.add_argument("--vkb", required=True)
    manage_cmd.add_argument("--no-vkb", action="store_true", help="Agents see basic info only")
    manage_cmd.add_argument("--no-confirmation", action="store_true", help="Repair every detected finding")
    manage_cmd.add_argument("--no-context-tools", action="store_true", help="Agents run without context tools")
    manage_cmd.add_argument("--provider", help="live or scripted:FILE")
    manage_cmd.add_argument("--output", help="Artifacts directory")
    manage_cmd.add_argument("--workers", type=int)
    manage_cmd.add_argument("--version-label")
    manage_cmd.add_argument("--ledger-url")
    manage_cmd.add_argument("--no-ledger", action="store_true", help="Do not record the run")
    manage_cmd.set_defaults(handler=cmd_manage)

    eval_cmd = sub.add_parser("eval", parents=[common], help="Evaluate over a porting dataset")
    eval_cmd.add_argument("--dataset", required=True)
    eval_cmd.add_argument("--equivalence", choices=["strict", "judge"])
    eval_cmd.add_argument("--provider", help="live or scripted:FILE")
    eval_cmd.add_argument("--output", help="Artifacts directory")
    eval_cmd.add_argument("--workers", type=int)
    eval_cmd.add_argument("--no-vkb", action="store_true")
    eval_cmd.add_argument("--no-confirmation", action="store_true")
    eval_cmd.add_argument("--no-context-tools", action="store_true")
    eval_cmd.set_defaults(handler=cmd_eval)

    for detecting in (scan_cmd, manage_cmd, eval_cmd):
        detecting.add_argument("--theta", type=float, help="Function-hash similarity threshold")
        detecting.add_argument("--window", type=int, help="Clone signature window width")
    for filtered in (scan_cmd, manage_cmd):
        filtered.add_argument("--cve", action="append", help="Restrict to this CVE (repeatable)")

    apply_cmd = sub.add_parser("apply", parents=[common], help="Apply validated patches from a run")
    apply_cmd.add_argument("--repo", required=True)
    apply_cmd.add_argument("--report", required=True, help="Artifacts directory of a manage run")
    apply_cmd.set_defaults(handler=cmd_apply)

    serve = sub.add_parser("serve", parents=[common], help="Serve the HTTP API")
    serve.add_argument("--host")
    serve.add_argument("--port", type=int)
    serve.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except (RecurVulnError, ValidationError, OSError) as e:
        logger.error(f"{args.command} failed: {str(e)}")
        print(f"error: {str(e)}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
