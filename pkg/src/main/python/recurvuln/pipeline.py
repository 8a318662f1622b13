"""
End-to-end management of recurring vulnerabilities in one target repository.

Each finding moves through::

    Detected -> Rejected | Confirmed -> Patched -> Validated (one refix round at most)

with Quarantined and Inconclusive as the failure exits.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import BaseModel, Field, model_validator

from .agents import (
    AnalysisVerdict,
    FunctionContexts,
    PortedPointSet,
    Substitution,
    analyze,
    check_consistency,
    generate_fix,
    historical_function,
    port_points,
    validate,
)
from .code_context import FunctionDef, LineSpan, RepoIndex, build_index, context_toolbox, extract_span
from .config import PipelineConfig
from .detector import VULNERABLE_STATUSES, Finding, FindingStatus, detect
from .errors import RecurVulnError
from .llm_gateway import LLMGateway, Transcript
from .patch_engine import SandboxWorkspace, write_patch_file
from .vkb import AnalysisPoint, VkbStore, VulnRecord

logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"
FINDINGS_FILE = "findings.json"
MAX_FIX_ROUNDS = 2

ALLOWED_TRANSITIONS = {
    FindingStatus.DETECTED: {FindingStatus.CONFIRMED, FindingStatus.REJECTED, FindingStatus.INCONCLUSIVE,
                             FindingStatus.QUARANTINED},
    FindingStatus.CONFIRMED: {FindingStatus.PATCHED, FindingStatus.QUARANTINED},
    FindingStatus.PATCHED: {FindingStatus.VALIDATED, FindingStatus.QUARANTINED},
}


class FindingReport(BaseModel):
    finding: Finding
    verdict_summary: str = ""
    consistency_summary: str = ""
    patch_diff: Optional[str] = None
    patch_file: Optional[str] = None
    patched_function_source: Optional[str] = None
    substitutions: List[Substitution] = Field(default_factory=list)
    fix_rounds: int = 0
    validation_outcome: str = ""
    transcripts: List[str] = Field(default_factory=list)


class ReportSummary(BaseModel):
    any_vulnerable: bool
    counts: Dict[str, int]


class ManagementReport(BaseModel):
    target_repo: str
    version_label: str = ""
    generated_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
    findings: List[FindingReport] = Field(default_factory=list)
    summary: ReportSummary

    @model_validator(mode="after")
    def check_summary(self):
        vulnerable = any(f.finding.status in VULNERABLE_STATUSES for f in self.findings)
        if self.summary.any_vulnerable != vulnerable:
            raise ValueError("any_vulnerable must reflect the finding statuses")
        for entry in self.findings:
            if entry.finding.status == FindingStatus.VALIDATED and not entry.patch_diff:
                raise ValueError(f"validated finding {entry.finding.slug} carries no diff")
        return self

    def to_json(self, include_timestamp: bool = True) -> str:
        exclude = None if include_timestamp else {"generated_at"}
        return self.model_dump_json(indent=2, exclude=exclude)


def summarize(findings: Sequence[FindingReport]) -> ReportSummary:
    counts = {status.value: 0 for status in FindingStatus}
    for entry in findings:
        counts[entry.finding.status.value] += 1
    return ReportSummary(any_vulnerable=any(f.finding.status in VULNERABLE_STATUSES for f in findings),
                         counts=counts)


class _Tracker:
    """Per-finding status holder that refuses transitions outside the state machine."""

    def __init__(self, finding: Finding):
        self.finding = finding
        self.report = FindingReport(finding=finding)
        self.verdict: Optional[AnalysisVerdict] = None

    def advance(self, status: FindingStatus, reason: str = "") -> None:
        current = self.finding.status
        if status not in ALLOWED_TRANSITIONS.get(current, set()):
            raise RecurVulnError(f"illegal status transition {current.value} -> {status.value}")
        self.finding = self.finding.model_copy(update={"status": status, "reason": reason or self.finding.reason})
        logger.info(f"{self.finding.slug}: {current.value} -> {status.value}")

    def quarantine(self, reason: str) -> None:
        self.finding = self.finding.model_copy(update={"status": FindingStatus.QUARANTINED, "reason": reason})
        logger.error(f"{self.finding.slug}: quarantined: {reason}")

    def result(self) -> FindingReport:
        return self.report.model_copy(update={"finding": self.finding})


class TranscriptArchive:
    def __init__(self, output_dir: Path):
        self.root = Path(output_dir) / "transcripts"

    def save(self, transcript: Optional[Transcript]) -> Optional[str]:
        if transcript is None:
            return None
        self.root.mkdir(parents=True, exist_ok=True)
        name = transcript.label.replace(":", "__") + ".json"
        (self.root / name).write_text(transcript.model_dump_json(indent=2), encoding="utf-8")
        return f"transcripts/{name}"


# -- indexes --------------------------------------------------------------


def source_index_for(record: VulnRecord, config: PipelineConfig, cache: Optional[Dict[str, RepoIndex]] = None) -> RepoIndex:
    """The configured checkout of the record's source repository, else one built from the VKB."""
    repo = record.basic.repo_name
    if repo in config.source_repos:
        if cache is not None and repo in cache:
            return cache[repo]
        index = build_index(config.source_repos[repo], "source")
        if cache is not None:
            cache[repo] = index
        return index
    files: Dict[str, List[str]] = {}
    for entry in record.basic.vulnerable_functions:
        files.setdefault(entry.file_path, []).append(entry.pre_patch_source)
    return RepoIndex.from_sources("source", {path: "\n\n".join(parts) + "\n" for path, parts in files.items()})


def _target_function(index: RepoIndex, finding: Finding) -> FunctionDef:
    if finding.target_function:
        for fn in index.functions_in(finding.target_file):
            if fn.name == finding.target_function:
                return fn
        raise RecurVulnError(f"{finding.target_function} not found in {finding.target_file}")
    # file-level finding: the flagged region stands in for a function
    span = finding.line_span or LineSpan(start=1, end=1)
    return FunctionDef(name="", return_type="", body_source=extract_span(index.file_text(finding.target_file),
                                                                         span.start, span.end),
                       file_path=finding.target_file, line_span=span)


def _unported_points(record: VulnRecord, finding: Finding, use_vkb: bool) -> PortedPointSet:
    """Points used for validation when confirmation (and with it porting) is skipped."""
    if use_vkb:
        points = list(record.points)
    else:
        points = [AnalysisPoint(point_id=1, symbols_of_interest=[finding.target_function],
                                directive=f"the flaw fixed by the historical patch of {record.cve_id} is present")]
    return PortedPointSet(finding_ref=finding.slug, points=points, porting_notes="not ported")


# -- per-finding workflow -------------------------------------------------


class FindingWorkflow:
    def __init__(self, record: VulnRecord, source_index: RepoIndex, target_index: RepoIndex, target_repo: Path,
                 gateway: LLMGateway, config: PipelineConfig, archive: TranscriptArchive):
        self.record = record
        self.source_index = source_index
        self.target_index = target_index
        self.target_repo = target_repo
        self.gateway = gateway
        self.config = config
        self.archive = archive
        self.use_vkb = not config.no_vkb
        self.toolbox = {} if config.no_context_tools else context_toolbox(source_index, target_index)

    def _keep(self, tracker: _Tracker, transcript: Optional[Transcript]) -> None:
        path = self.archive.save(transcript)
        if path:
            tracker.report.transcripts.append(path)

    def run(self, finding: Finding) -> FindingReport:
        tracker = _Tracker(finding)
        try:
            self._run(tracker)
        except Exception as e:
            tracker.quarantine(f"{type(e).__name__}: {str(e)}")
        return tracker.result()

    def _confirm(self, tracker: _Tracker, target_fn: FunctionDef) -> Optional[PortedPointSet]:
        finding = tracker.finding
        historical = historical_function(self.record, target_fn.name)
        source_name = target_fn.name if self.source_index.function_named(target_fn.name) else (
            historical.function_name if historical else "")
        source_fn = next(iter(self.source_index.function_named(source_name)), None)
        ported = port_points(self.record, finding, FunctionContexts(source_fn=source_fn, target_fn=target_fn),
                             self.gateway, self.toolbox, use_vkb=self.use_vkb)
        self._keep(tracker, ported.transcript)
        verdict: AnalysisVerdict = analyze(
            finding, ported, self.toolbox, self.gateway, record=self.record, target_fn=target_fn,
            source_index=self.source_index, target_index=self.target_index, use_vkb=self.use_vkb)
        self._keep(tracker, verdict.transcript)
        tracker.report.verdict_summary = verdict.summary()
        if verdict.inconclusive:
            tracker.advance(FindingStatus.INCONCLUSIVE, "analysis did not reach a conclusion; manual review needed")
            return None
        if not verdict.is_vulnerable:
            tracker.advance(FindingStatus.REJECTED)
            return None
        tracker.advance(FindingStatus.CONFIRMED)
        tracker.verdict = verdict
        return ported

    def _run(self, tracker: _Tracker) -> None:
        target_fn = _target_function(self.target_index, tracker.finding)
        if self.config.no_confirmation:
            ported = _unported_points(self.record, tracker.finding, self.use_vkb)
            tracker.report.verdict_summary = "confirmation skipped"
            tracker.advance(FindingStatus.CONFIRMED)
        else:
            ported = self._confirm(tracker, target_fn)
            if ported is None:
                return
        if not target_fn.name:
            logger.warning(f"{tracker.finding.slug}: file-level finding confirmed; no function to repair")
            return
        self._repair(tracker, target_fn, ported)

    def _repair(self, tracker: _Tracker, target_fn: FunctionDef, ported: PortedPointSet) -> None:
        finding = tracker.finding
        summary_gateway = self.gateway if self.config.llm_consistency_summary else None
        consistency = check_consistency(self.record, self.target_index, self.source_index, summary_gateway)
        tracker.report.consistency_summary = consistency.summary
        file_text = self.target_index.file_text(target_fn.file_path)
        feedback = None
        with SandboxWorkspace(self.target_repo) as ws:
            for round_no in range(1, MAX_FIX_ROUNDS + 1):
                proposal = generate_fix(finding, tracker.verdict, self.record, consistency, self.toolbox, self.gateway,
                                        target_fn=target_fn, file_text=file_text, feedback=feedback,
                                        round_no=round_no)
                self._keep(tracker, proposal.transcript)
                tracker.report.fix_rounds = round_no
                tracker.report.patch_diff = proposal.unified_diff
                tracker.report.patched_function_source = proposal.patched_function_source
                tracker.report.substitutions = proposal.substitutions
                tracker.report.patch_file = write_patch_file(
                    self.config.output_dir, tracker.finding, proposal.unified_diff
                ).relative_to(self.config.output_dir).as_posix()
                if tracker.finding.status == FindingStatus.CONFIRMED:
                    tracker.advance(FindingStatus.PATCHED)
                result = validate(proposal, self.record, ported, finding, self.config.detector, ws, self.toolbox,
                                  self.gateway, target_fn=target_fn, source_index=self.source_index,
                                  target_index=self.target_index, round_no=round_no, use_vkb=self.use_vkb)
                if result.agent_verdict is not None:
                    self._keep(tracker, result.agent_verdict.transcript)
                if result.fixed:
                    tracker.report.validation_outcome = (
                        "fixed (detector clean)" if not result.detector_flagged else "fixed (validation agent)")
                    tracker.advance(FindingStatus.VALIDATED)
                    return
                tracker.report.validation_outcome = "unfixed"
                feedback = result.feedback
                logger.warning(f"{finding.slug}: validation round {round_no} failed")


# -- entry points ---------------------------------------------------------


def load_records(vkb_dir, cve_filter: Optional[Sequence[str]] = None) -> List[VulnRecord]:
    store = VkbStore(vkb_dir)
    return store.load_all(list(cve_filter) if cve_filter else None)


def scan(target_repo, vkb_dir, config: Optional[PipelineConfig] = None) -> List[Finding]:
    config = config or PipelineConfig()
    records = load_records(vkb_dir, config.cve_filter)
    index = build_index(target_repo, "target")
    return detect(index, records, config.detector, cve_ids=config.cve_filter or None)


def manage(target_repo, vkb_dir, config: Optional[PipelineConfig] = None, provider=None,
           records: Optional[Sequence[VulnRecord]] = None) -> ManagementReport:
    """Detect, confirm, repair and validate; writes the report artifacts to ``config.output_dir``."""
    config = config or PipelineConfig()
    target_repo = Path(target_repo)
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    if records is None:
        records = load_records(vkb_dir, config.cve_filter)
    by_cve = {r.cve_id: r for r in records}
    target_index = build_index(target_repo, "target")
    findings = detect(target_index, records, config.detector, cve_ids=config.cve_filter or None)
    logger.info(f"Managing {len(findings)} findings in {target_repo}")

    reports: List[FindingReport] = []
    if findings:
        archive = TranscriptArchive(output_dir)
        source_cache: Dict[str, RepoIndex] = {}
        with LLMGateway(config.llm, provider) as gateway:
            workflows = {cve: FindingWorkflow(by_cve[cve], source_index_for(by_cve[cve], config, source_cache),
                                              target_index, target_repo, gateway, config, archive)
                         for cve in sorted({f.cve_id for f in findings})}
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                reports = list(pool.map(lambda f: workflows[f.cve_id].run(f), findings))

    report = ManagementReport(
        target_repo=str(target_repo),
        version_label=config.version_label,
        findings=reports,
        summary=summarize(reports),
    )
    write_artifacts(report, output_dir)
    logger.info(f"Run finished: {report.summary.counts}")
    return report


def write_artifacts(report: ManagementReport, output_dir) -> Path:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / REPORT_FILE).write_text(report.to_json(), encoding="utf-8")
    findings = [entry.finding.model_dump(mode="json") for entry in report.findings]
    (output_dir / FINDINGS_FILE).write_text(json.dumps(findings, indent=2), encoding="utf-8")
    return output_dir / REPORT_FILE


def load_report(output_dir) -> ManagementReport:
    path = Path(output_dir) / REPORT_FILE
    return ManagementReport.model_validate_json(path.read_text(encoding="utf-8"))
