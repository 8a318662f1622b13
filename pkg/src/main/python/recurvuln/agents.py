"""
Agent roles of the confirmation and repair stages.

Porting, Analyzing, Fixing and Validation run as tool-calling sessions on the LLM
gateway; the consistency check is computed from the two repository indexes and only
its summary text may come from a model.

Session labels follow ``role:CVE:function:file-tag[:round]`` so scripted transcripts can be
keyed per conversation.
"""
import logging
import re
from typing import Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, Field, model_validator

from .code_context import (
    FunctionComparison,
    FunctionDef,
    RepoIndex,
    compare_function,
    format_function,
    normalize_code,
    parse_single_function,
    strip_comments,
)
from .config import DetectorConfig
from .detector import Finding
from .diffs import apply_unified_diff, parse_unified_diff, render_unified_diff
from .errors import MalformedPatchError, PatchApplyError, PortingError
from .llm_gateway import LLMGateway, Toolbox, Transcript, system, user
from .patch_engine import RescanResult, SandboxWorkspace, apply_function_replacement, rescan_patched, splice_function
from .prompts import render_prompt
from .vkb import AnalysisPoint, VulnRecord, VulnerableFunction, extract_symbols

logger = logging.getLogger(__name__)

C_KEYWORDS = {
    "auto", "break", "case", "char", "const", "continue", "default", "do", "double", "else", "enum",
    "extern", "float", "for", "goto", "if", "inline", "int", "long", "register", "restrict", "return",
    "short", "signed", "sizeof", "static", "struct", "switch", "typedef", "union", "unsigned", "void",
    "volatile", "while", "_Bool", "bool", "_Alignof", "_Static_assert", "_Generic",
}
MACRO_ALLOWLIST = {
    "likely", "unlikely", "offsetof", "typeof", "__typeof__", "alignof", "__alignof__", "defined",
    "__attribute__", "__builtin_expect", "static_assert", "va_arg", "va_start", "va_end", "va_copy",
}

_CALL = re.compile(r"(?<![\w.>])([A-Za-z_]\w*)\s*\(")
_LITERAL = re.compile(r'"(?:\\.|[^"\\\n])*"|\'(?:\\.|[^\'\\\n])*\'')
_PORTED = re.compile(r"^\s*PORTED\s+(\d+)\s*:\s*(.+?)\s*$", re.IGNORECASE)
_DROPPED = re.compile(r"^\s*DROPPED\s+(\d+)\s*:?\s*(.*?)\s*$", re.IGNORECASE)
_NOTES = re.compile(r"^\s*NOTES\s*:\s*(.*)$", re.IGNORECASE)
_POINT = re.compile(r"^\s*POINT\s+(\d+)\s*:\s*(HOLDS|REFUTED|INCONCLUSIVE)\b[\s:\-]*(.*?)\s*$", re.IGNORECASE)
_CODE_BLOCK = re.compile(r"```[ \t]*[A-Za-z]*[ \t]*\n(.*?)```", re.DOTALL)
_SUBSTITUTE = re.compile(r"^\s*SUBSTITUTE\s*:\s*([A-Za-z_]\w*)\s*->\s*([A-Za-z_]\w*)", re.IGNORECASE)
_RATIONALE = re.compile(r"^\s*RATIONALE\s*:\s*(.*)$", re.IGNORECASE)

Outcome = Literal["Holds", "Refuted", "Inconclusive"]


# -- result types ---------------------------------------------------------


class FunctionContexts(BaseModel):
    source_fn: Optional[FunctionDef] = None
    target_fn: FunctionDef


class PortedPointSet(BaseModel):
    finding_ref: str
    points: List[AnalysisPoint] = Field(min_length=1)
    porting_notes: str = ""
    dropped: Dict[int, str] = Field(default_factory=dict)
    transcript: Optional[Transcript] = None


class PointResult(BaseModel):
    point_id: int
    outcome: Outcome
    evidence: str = ""


class AnalysisVerdict(BaseModel):
    is_vulnerable: bool
    per_point_results: List[PointResult] = Field(default_factory=list)
    transcript: Optional[Transcript] = None
    shortcut_used: bool = False
    inconclusive: bool = False

    @model_validator(mode="after")
    def check_negative_verdict(self):
        refuted = any(r.outcome == "Refuted" for r in self.per_point_results)
        if not self.is_vulnerable and not self.inconclusive and not (refuted or self.shortcut_used):
            raise ValueError("a not-vulnerable verdict needs a refuted point or the shortcut")
        return self

    def summary(self) -> str:
        if self.inconclusive:
            head = "inconclusive"
        else:
            head = "vulnerable" if self.is_vulnerable else "not vulnerable"
        if self.shortcut_used:
            head += " (identical-function shortcut)"
        lines = [head] + [f"point {r.point_id}: {r.outcome} {r.evidence}".rstrip() for r in self.per_point_results]
        return "\n".join(lines)


class ConsistencyEntry(BaseModel):
    function_name: str
    comparison: FunctionComparison
    needed_by_patch: bool
    in_source: bool = True


class ConsistencyReport(BaseModel):
    entries: List[ConsistencyEntry] = Field(default_factory=list)
    summary: str = ""

    def missing_substitutes(self) -> List[str]:
        """Symbols the patch calls that exist in the source repository but not in the target."""
        return [e.function_name for e in self.entries
                if e.needed_by_patch and e.in_source and e.comparison.verdict == "MissingInTarget"]

    def render(self) -> str:
        if not self.entries:
            return "(no functions to compare)"
        return "\n".join(
            f"- {e.function_name}: {e.comparison.verdict}" + (f" ({e.comparison.detail})" if e.comparison.detail else "")
            for e in self.entries)


class Substitution(BaseModel):
    missing_symbol: str
    substitute_symbol: str


class PatchProposal(BaseModel):
    finding_ref: str
    file_path: str
    function_name: str
    patched_function_source: str
    unified_diff: str
    rationale: str = ""
    substitutions: List[Substitution] = Field(default_factory=list)
    transcript: Optional[Transcript] = None


class ValidationResult(BaseModel):
    fixed: bool
    detector_flagged: bool
    agent_verdict: Optional[AnalysisVerdict] = None
    feedback: str = ""

    @model_validator(mode="after")
    def check_outcome(self):
        expected = (not self.detector_flagged) or (
            self.agent_verdict is not None and not self.agent_verdict.is_vulnerable)
        if self.fixed != expected:
            raise ValueError("fixed must follow the detector rescan and the validation verdict")
        if self.fixed == bool(self.feedback):
            raise ValueError("feedback is required exactly when the patch is not fixed")
        return self


# -- helpers --------------------------------------------------------------


def session_label(role: str, finding: Finding, round_no: Optional[int] = None) -> str:
    label = f"{role}:{finding.cve_id}:{finding.target_function or 'file-level'}:{finding.file_tag}"
    return f"{label}:{round_no}" if round_no and round_no > 1 else label


def historical_function(record: VulnRecord, name: str) -> Optional[VulnerableFunction]:
    """The record's vulnerable function matching ``name``, else its first one."""
    functions = record.basic.vulnerable_functions
    return record.basic.function(name) or (functions[0] if functions else None)


def _render_points(points: Sequence[AnalysisPoint], excluded: Optional[Dict[int, List[str]]] = None) -> str:
    rendered = []
    for p in points:
        symbols = f" (symbols: {', '.join(p.symbols_of_interest)})" if p.symbols_of_interest else ""
        skipped = (excluded or {}).get(p.point_id)
        if skipped:
            symbols += f" (identical in both repositories, not examined: {', '.join(skipped)})"
        rendered.append(f"{p.point_id}. {p.directive}{symbols}")
    return "\n".join(rendered)


def _report_text(record: VulnRecord, use_vkb: bool) -> str:
    return record.report.render() if use_vkb else "(not available)"


def _source_text(defn: Optional[FunctionDef], fallback: Optional[VulnerableFunction]) -> str:
    if defn is not None:
        return format_function(defn)
    if fallback is not None:
        return f"// {fallback.file_path}\n{fallback.pre_patch_source}"
    return "(not available)"


def called_identifiers(patch_text: str) -> List[str]:
    """Function identifiers called in the added lines of a unified diff, sorted."""
    added = []
    for patch in parse_unified_diff(patch_text):
        for hunk in patch.hunks:
            added.extend(hunk.added())
    code = _LITERAL.sub('""', strip_comments("\n".join(added)))
    names = {m.group(1) for m in _CALL.finditer(code)}
    return sorted(n for n in names if n not in C_KEYWORDS and n not in MACRO_ALLOWLIST)


# -- porting --------------------------------------------------------------


def port_points(record: VulnRecord, finding: Finding, contexts: FunctionContexts, gateway: LLMGateway,
                toolbox: Optional[Toolbox] = None, use_vkb: bool = True) -> PortedPointSet:
    """Re-target the record's analysis points to the flagged function."""
    target = contexts.target_fn
    if use_vkb and not record.points:
        raise PortingError(f"{record.cve_id} has no analysis points")
    historical = historical_function(record, target.name)
    if use_vkb:
        prompt = render_prompt(
            "port",
            cve_id=record.cve_id,
            target_function=target.name,
            target_file=target.file_path,
            report=record.report.render(),
            points=_render_points(record.points),
            source_function=_source_text(contexts.source_fn, historical),
            target_function_source=format_function(target),
        )
    else:
        prompt = render_prompt(
            "port_basic",
            cve_id=record.cve_id,
            description=record.basic.description,
            target_function=target.name,
            target_file=target.file_path,
            patch=record.basic.patch_text(),
            target_function_source=format_function(target),
        )
    session = gateway.session(session_label("port", finding))
    transcript = session.run_tool_loop(
        [system("You adapt vulnerability analysis points to a new code base."), user(prompt)], toolbox or {})
    if transcript.truncated:
        raise PortingError(f"porting session for {finding.slug} hit the tool round limit")

    known = {p.point_id: p for p in record.points} if use_vkb else {}
    ported: Dict[int, AnalysisPoint] = {}
    dropped: Dict[int, str] = {}
    notes = []
    lines = transcript.terminal_text.split("\n")
    for i, line in enumerate(lines):
        if _NOTES.match(line):
            notes.append("\n".join([_NOTES.match(line).group(1)] + lines[i + 1:]).strip())
            break
        match = _PORTED.match(line)
        if match:
            point_id = int(match.group(1)) if use_vkb else len(ported) + 1
            if use_vkb and point_id not in known:
                logger.warning(f"{finding.slug}: porting agent referenced unknown point {point_id}")
                continue
            directive = match.group(2)
            symbols = extract_symbols(directive) or [target.name]
            ported[point_id] = AnalysisPoint(point_id=point_id, directive=directive, symbols_of_interest=symbols)
            continue
        match = _DROPPED.match(line)
        if match and use_vkb:
            dropped[int(match.group(1))] = match.group(2)
    for point_id in known:
        if point_id not in ported and point_id not in dropped:
            dropped[point_id] = "not addressed by the porting agent"
    for point_id, reason in sorted(dropped.items()):
        logger.warning(f"{finding.slug}: point {point_id} dropped: {reason}")
    if not ported:
        raise PortingError(f"no applicable points for {finding.slug}")
    return PortedPointSet(
        finding_ref=finding.slug,
        points=[ported[k] for k in sorted(ported)],
        porting_notes="\n".join(notes),
        dropped=dropped,
        transcript=transcript,
    )


# -- analysis -------------------------------------------------------------


def _already_patched(record: VulnRecord, target_fn: FunctionDef) -> bool:
    normalized = normalize_code(target_fn.body_source)
    return any(normalize_code(f.post_patch_source) == normalized for f in record.basic.vulnerable_functions)


def _identical_helpers(point: AnalysisPoint, target_name: str, source_index: RepoIndex,
                       target_index: RepoIndex) -> List[str]:
    """Helper functions of the point that are Identical across repos; they do not affect the occurrence."""
    identical = []
    for symbol in point.symbols_of_interest:
        if symbol == target_name:
            continue
        if not (source_index.function_named(symbol) and target_index.function_named(symbol)):
            continue
        if compare_function(symbol, source_index, target_index).verdict == "Identical":
            identical.append(symbol)
    return identical


def _examined_points(points: Sequence[AnalysisPoint], target_name: str, source_index: RepoIndex,
                     target_index: RepoIndex) -> Tuple[List[AnalysisPoint], Dict[int, List[str]]]:
    """Points with their identical helpers left out of the symbols to examine."""
    examined, excluded = [], {}
    for point in points:
        helpers = _identical_helpers(point, target_name, source_index, target_index)
        if helpers:
            excluded[point.point_id] = helpers
            point = point.model_copy(update={
                "symbols_of_interest": [s for s in point.symbols_of_interest if s not in helpers]})
        examined.append(point)
    return examined, excluded


def analyze(finding: Finding, ported: PortedPointSet, toolbox: Toolbox, gateway: LLMGateway, *,
            record: VulnRecord, target_fn: FunctionDef, source_index: RepoIndex, target_index: RepoIndex,
            role: str = "analyze", round_no: Optional[int] = None, use_vkb: bool = True,
            inconclusive_is_vulnerable: bool = False) -> AnalysisVerdict:
    """
    Examine each ported point against the target function.

    A target function equal to the historical post-patch function is not vulnerable
    without a model call. Helper functions identical across repositories are left out
    of the examination; every point still goes to the agent.
    """
    if _already_patched(record, target_fn):
        logger.info(f"{finding.slug}: target already matches the historical fix")
        return AnalysisVerdict(
            is_vulnerable=False,
            shortcut_used=True,
            per_point_results=[PointResult(point_id=p.point_id, outcome="Refuted",
                                           evidence="the function already matches the post-patch version")
                               for p in ported.points],
        )

    points, excluded = _examined_points(ported.points, target_fn.name, source_index, target_index)
    for point_id, helpers in excluded.items():
        logger.info(f"{finding.slug}: point {point_id} skips identical helpers {', '.join(helpers)}")
    shortcut = bool(excluded)

    prompt = render_prompt(
        "validate" if role == "validate" else "analyze",
        cve_id=finding.cve_id,
        target_function=target_fn.name,
        target_file=target_fn.file_path,
        report=_report_text(record, use_vkb),
        points=_render_points(points, excluded),
        target_function_source=format_function(target_fn),
    )
    session = gateway.session(session_label(role, finding, round_no))
    transcript = session.run_tool_loop(
        [system("You confirm or refute suspected vulnerabilities in C code."), user(prompt)], toolbox)

    if transcript.truncated:
        logger.warning(f"{finding.slug}: {role} session hit the tool round limit; verdict inconclusive")
        return AnalysisVerdict(is_vulnerable=inconclusive_is_vulnerable, inconclusive=True, transcript=transcript,
                               shortcut_used=shortcut,
                               per_point_results=[PointResult(point_id=p.point_id, outcome="Inconclusive",
                                                              evidence="tool round limit reached")
                                                  for p in points])

    wanted = {p.point_id for p in points}
    results: Dict[int, PointResult] = {}
    for line in transcript.terminal_text.split("\n"):
        match = _POINT.match(line)
        if match and int(match.group(1)) in wanted and int(match.group(1)) not in results:
            results[int(match.group(1))] = PointResult(point_id=int(match.group(1)),
                                                       outcome=match.group(2).capitalize(),
                                                       evidence=match.group(3))
    ordered = [results.get(p.point_id) or PointResult(point_id=p.point_id, outcome="Inconclusive",
                                                      evidence="no conclusion reported")
               for p in points]
    vulnerable = not any(r.outcome == "Refuted" for r in ordered)
    return AnalysisVerdict(is_vulnerable=vulnerable, per_point_results=ordered, transcript=transcript,
                           shortcut_used=shortcut)


# -- consistency ----------------------------------------------------------


def check_consistency(record: VulnRecord, target_index: RepoIndex, source_index: RepoIndex,
                      gateway: Optional[LLMGateway] = None) -> ConsistencyReport:
    """Compare the patched functions and every function the patch's added lines call."""
    patched = sorted({f.function_name for f in record.basic.vulnerable_functions})
    calls = [name for name in called_identifiers(record.basic.patch_text()) if name not in patched]
    entries = []
    for name in patched:
        entries.append(ConsistencyEntry(function_name=name, needed_by_patch=False,
                                        comparison=compare_function(name, source_index, target_index),
                                        in_source=bool(source_index.function_named(name))))
    for name in calls:
        entries.append(ConsistencyEntry(function_name=name, needed_by_patch=True,
                                        comparison=compare_function(name, source_index, target_index),
                                        in_source=bool(source_index.function_named(name))))
    report = ConsistencyReport(entries=entries)
    summary = report.render()
    if gateway is not None and entries:
        session = gateway.session(f"consistency:{record.cve_id}")
        reply = session.complete([system("You review cross-repository API differences."),
                                  user(render_prompt("consistency", cve_id=record.cve_id, entries=summary))])
        summary = reply.content
    return report.model_copy(update={"summary": summary})


# -- fixing ---------------------------------------------------------------


def _parse_fix(text: str, expected_name: str):
    """(code, substitutions, rationale) or raise ValueError."""
    block = _CODE_BLOCK.search(text)
    if block is None:
        raise ValueError("no fenced code block")
    code = block.group(1).strip("\n")
    parsed = parse_single_function(code)
    if parsed.name != expected_name:
        raise ValueError(f"the function is named {parsed.name}, expected {expected_name}")
    outside = text[:block.start()] + text[block.end():]
    substitutions, rationale = [], ""
    lines = outside.split("\n")
    for i, line in enumerate(lines):
        match = _SUBSTITUTE.match(line)
        if match:
            substitutions.append(Substitution(missing_symbol=match.group(1), substitute_symbol=match.group(2)))
            continue
        match = _RATIONALE.match(line)
        if match and not rationale:
            rationale = "\n".join([match.group(1)] + lines[i + 1:]).strip()
    return code, substitutions, rationale


def generate_fix(finding: Finding, verdict: Optional[AnalysisVerdict], record: VulnRecord,
                 consistency: ConsistencyReport, toolbox: Toolbox, gateway: LLMGateway, *,
                 target_fn: FunctionDef, file_text: str, feedback: Optional[str] = None,
                 round_no: int = 1) -> PatchProposal:
    """Ask the fixing agent for a patched function and render it as a diff against ``file_text``."""
    if verdict is not None and not verdict.is_vulnerable:
        raise ValueError("generate_fix requires a vulnerable verdict")
    historical = historical_function(record, target_fn.name)
    missing = consistency.missing_substitutes()
    substitution_request = ""
    if missing:
        substitution_request = (
            "These functions used by the historical fix do not exist in the target repository: "
            + ", ".join(missing)
            + ". Search the target repository for a semantically similar substitute and use it instead.\n")
    feedback_block = f"Validation feedback on the previous patch:\n{feedback}\n" if feedback else ""
    prompt = render_prompt(
        "fix",
        cve_id=finding.cve_id,
        target_function=target_fn.name,
        target_file=target_fn.file_path,
        verdict=verdict.summary() if verdict is not None else "(confirmation skipped)",
        historical_pre=historical.pre_patch_source if historical else "(not available)",
        historical_post=historical.post_patch_source if historical else "(not available)",
        consistency=consistency.summary or consistency.render(),
        substitution_request=substitution_request,
        feedback=feedback_block,
        target_function_source=format_function(target_fn),
    )
    session = gateway.session(session_label("fix", finding, round_no))
    messages = [system("You write minimal, correct security patches for C functions."), user(prompt)]
    for attempt in (1, 2):
        transcript = session.run_tool_loop(messages, toolbox)
        if transcript.truncated:
            raise MalformedPatchError(f"malformed patch: fixing session for {finding.slug} hit the tool round limit")
        try:
            code, substitutions, rationale = _parse_fix(transcript.terminal_text, target_fn.name)
            break
        except ValueError as e:
            if attempt == 2:
                raise MalformedPatchError(f"malformed patch for {finding.slug}: {str(e)}") from e
            logger.warning(f"{finding.slug}: unusable fix output ({str(e)}); asking again")
            messages = transcript.messages + [user(
                f"Your reply could not be used: {str(e)}. Reply with the complete patched function "
                f"{target_fn.name} in a single ```c code block.")]

    for symbol in missing:
        if re.search(rf"\b{re.escape(symbol)}\s*\(", code) and not any(s.missing_symbol == symbol for s in substitutions):
            logger.warning(f"{finding.slug}: patch still calls {symbol}, which the target lacks")

    patched_file = splice_function(file_text, target_fn.file_path, target_fn, code)
    diff = render_unified_diff(file_text, patched_file, target_fn.file_path)
    if apply_unified_diff(file_text, diff) != patched_file:
        raise PatchApplyError(f"rendered diff for {finding.slug} does not reproduce the patched file")
    return PatchProposal(
        finding_ref=finding.slug,
        file_path=target_fn.file_path,
        function_name=target_fn.name,
        patched_function_source=code,
        unified_diff=diff,
        rationale=rationale,
        substitutions=substitutions,
        transcript=transcript,
    )


# -- validation -----------------------------------------------------------


def _feedback(rescan: RescanResult, verdict: AnalysisVerdict) -> str:
    lines = ["The patched function is still flagged by the detector:"]
    lines += [f"- {h.method.value} hit, similarity {h.similarity:.3f}" for h in rescan.details]
    lines.append("The validation agent found the vulnerability still present:")
    lines += [f"- point {r.point_id}: {r.outcome} {r.evidence}".rstrip()
              for r in verdict.per_point_results if r.outcome != "Refuted"]
    return "\n".join(lines)


def validate(proposal: PatchProposal, record: VulnRecord, ported: PortedPointSet, finding: Finding,
             detector_config: DetectorConfig, ws: SandboxWorkspace, toolbox: Toolbox, gateway: LLMGateway, *,
             target_fn: FunctionDef, source_index: RepoIndex, target_index: RepoIndex,
             round_no: int = 1, use_vkb: bool = True) -> ValidationResult:
    """
    Apply the proposal in the sandbox and rescan; only a patched function that is still
    flagged goes to the validation agent.
    """
    ws.reset(proposal.file_path)
    patched_text = apply_function_replacement(ws, proposal.file_path, target_fn, proposal.patched_function_source)
    rescan = rescan_patched(ws, finding, detector_config, record)
    if not rescan.flagged:
        logger.info(f"{finding.slug}: detector no longer flags the patched function")
        return ValidationResult(fixed=True, detector_flagged=False)

    patched_index = RepoIndex.from_sources("target", {proposal.file_path: patched_text})
    patched_fn = next(iter(patched_index.function_named(target_fn.name)), None)
    if patched_fn is None:
        raise PatchApplyError(f"{target_fn.name} not found in the patched {proposal.file_path}")
    verdict = analyze(finding, ported, toolbox, gateway, record=record, target_fn=patched_fn,
                      source_index=source_index, target_index=target_index, role="validate",
                      round_no=round_no, use_vkb=use_vkb, inconclusive_is_vulnerable=True)
    if verdict.is_vulnerable:
        return ValidationResult(fixed=False, detector_flagged=True, agent_verdict=verdict,
                                feedback=_feedback(rescan, verdict))
    return ValidationResult(fixed=True, detector_flagged=True, agent_verdict=verdict)
