"""
Evaluation harness over function-level porting cases.

Dataset layout::

    cases/<name>.json      one PortingCase per file
    vkb/<CVE-ID>.json      knowledge base records for the cases' CVEs
    snapshots/<name>/      target tree at the version preceding the target fix
"""
import difflib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, Field, ValidationError, model_validator

from .code_context import normalize_code, parse_single_function
from .config import PipelineConfig
from .detector import VULNERABLE_STATUSES, tokenize
from .errors import DatasetError
from .llm_gateway import LLMGateway, system, user
from .pipeline import ManagementReport, manage
from .prompts import render_prompt
from .vkb import VkbStore

logger = logging.getLogger(__name__)

PATH_KEYWORDS = ("test", "tests", "version")
_PATH_KEYWORD = re.compile(r"(^|[/_.-])(" + "|".join(PATH_KEYWORDS) + r")([/_.-]|$)")
EquivalenceMode = Literal["strict", "judge"]
_EQUIVALENT = re.compile(r"^\s*EQUIVALENT\s*:\s*(yes|no)\b", re.IGNORECASE | re.MULTILINE)


class PortingCase(BaseModel):
    cve_id: str
    commit_s: str
    commit_t: str
    repo_s: str
    repo_t: str
    f_opre: str
    f_opost: str
    f_tpre: str
    f_tpost: str
    # metadata
    case_id: str = ""
    file_path: str = ""
    function_name: str = ""
    file_paths: List[str] = Field(default_factory=list)
    source_changed_files: Optional[int] = None
    target_changed_files: Optional[int] = None
    orphan: Optional[bool] = None
    source_diff: Optional[str] = None
    target_diff: Optional[str] = None
    snapshot: str = ""
    relation: Optional[Literal["branch", "fork"]] = None

    @model_validator(mode="after")
    def check_pair(self):
        if self.f_tpre == self.f_tpost:
            raise ValueError("target pre- and post-patch functions are identical")
        if not self.function_name:
            try:
                self.function_name = parse_single_function(self.f_tpre).name
            except ValueError:
                pass
        return self

    @property
    def repo_pair(self) -> str:
        return f"{self.repo_s} -> {self.repo_t}"

    def paths(self) -> List[str]:
        return [p for p in [self.file_path, *self.file_paths] if p]


class CaseReject(BaseModel):
    file: str
    reason: str


class CaseVerdict(BaseModel):
    cve_id: str
    file_path: str
    function_name: str
    outcome: Literal["TP", "FP", "FN"]
    patch_correct: Optional[bool] = None
    equivalence_mode: Optional[str] = None
    repo_pair: str = ""
    relation: Optional[str] = None
    note: str = ""


class PairCounts(BaseModel):
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tpc: int = 0


class Metrics(BaseModel):
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None
    repair_accuracy: Optional[float] = None
    tpc_over_tp: Optional[float] = None


class EvalOutcome(BaseModel):
    tp: int
    fp: int
    fn: int
    tpc: int
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None
    repair_accuracy: Optional[float] = None
    tpc_over_tp: Optional[float] = None
    equivalence_mode: str = "strict"
    per_case: List[CaseVerdict] = Field(default_factory=list)
    per_repo_pair: Dict[str, PairCounts] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_formulas(self):
        if self.tpc > self.tp:
            raise ValueError("tpc cannot exceed tp")
        expected = metrics_from_counts(self.tp, self.fp, self.fn, self.tpc)
        if Metrics(**self.model_dump(include=set(Metrics.model_fields))) != expected:
            raise ValueError("metrics do not match the counts")
        return self


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator else None


def metrics_from_counts(tp: int, fp: int, fn: int, tpc: int) -> Metrics:
    """Undefined metrics (zero denominators) are None, never 0."""
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    return Metrics(precision=precision, recall=recall, f1=f1,
                   repair_accuracy=_ratio(tpc, tp + fp), tpc_over_tp=_ratio(tpc, tp))


def outcome_from_counts(tp: int, fp: int, fn: int, tpc: int, **extra) -> EvalOutcome:
    return EvalOutcome(tp=tp, fp=fp, fn=fn, tpc=tpc, **metrics_from_counts(tp, fp, fn, tpc).model_dump(), **extra)


# -- loading and filtering ------------------------------------------------


def _case_files(dataset_dir: Path) -> List[Path]:
    cases_dir = dataset_dir / "cases"
    root = cases_dir if cases_dir.is_dir() else dataset_dir
    return sorted(root.glob("*.json"))


def load_cases(dataset_dir, rejects: Optional[List[CaseReject]] = None) -> List[PortingCase]:
    """Read every case file; malformed ones are appended to ``rejects`` and skipped."""
    dataset_dir = Path(dataset_dir)
    if not dataset_dir.is_dir():
        raise DatasetError(f"Dataset directory {dataset_dir} does not exist")
    cases = []
    for path in _case_files(dataset_dir):
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            data.setdefault("case_id", path.stem)
            cases.append(PortingCase.model_validate(data))
        except (json.JSONDecodeError, ValidationError, UnicodeDecodeError) as e:
            logger.warning(f"Rejected case {path.name}: {str(e)}")
            if rejects is not None:
                rejects.append(CaseReject(file=path.name, reason=str(e)))
    logger.info(f"Loaded {len(cases)} cases from {dataset_dir}")
    return cases


def _changed_lines(diff_text: Optional[str], before: str, after: str) -> List[str]:
    """Normalized +/- lines of a diff (given, or computed from the function pair)."""
    if diff_text is None:
        diff_text = "\n".join(difflib.unified_diff(normalize_code(before).split("\n"),
                                                   normalize_code(after).split("\n"), lineterm=""))
    changed = []
    for line in diff_text.split("\n"):
        if line.startswith(("+++", "---")) or not line[:1] in ("+", "-"):
            continue
        body = normalize_code(line[1:])
        if body:
            changed.append(line[0] + body)
    return changed


def identical_diffs(case: PortingCase) -> bool:
    return (_changed_lines(case.source_diff, case.f_opre, case.f_opost)
            == _changed_lines(case.target_diff, case.f_tpre, case.f_tpost))


def filter_cases(cases: Sequence[PortingCase]) -> List[PortingCase]:
    """
    Drop, in order: trivial ports (identical normalized diffs, or unequal changed-file
    counts), cases touching test or version paths, and orphan commits.
    """
    kept = []
    for case in cases:
        if identical_diffs(case):
            logger.debug(f"Dropping {case.case_id}: source and target diffs are identical")
            continue
        if (case.source_changed_files is not None and case.target_changed_files is not None
                and case.source_changed_files != case.target_changed_files):
            logger.debug(f"Dropping {case.case_id}: changed-file counts differ")
            continue
        if any(_PATH_KEYWORD.search(path.lower()) for path in case.paths()):
            logger.debug(f"Dropping {case.case_id}: test or version path")
            continue
        if case.orphan:
            logger.debug(f"Dropping {case.case_id}: orphan commit")
            continue
        kept.append(case)
    logger.info(f"Filters kept {len(kept)} of {len(cases)} cases")
    return kept


# -- equivalence ----------------------------------------------------------


def judge_equivalence(patched_source: str, ground_truth: str, mode: EquivalenceMode = "strict",
                      gateway: Optional[LLMGateway] = None, description: str = "", label: str = "judge") -> bool:
    for source in (patched_source, ground_truth):
        try:
            parse_single_function(source)
        except ValueError:
            return False
    if mode == "strict":
        return tokenize(patched_source, lowercase=False) == tokenize(ground_truth, lowercase=False)
    if gateway is None:
        raise ValueError("judge mode needs a gateway")
    reply = gateway.session(label).complete([
        system("You compare security patches for semantic equivalence."),
        user(render_prompt("judge", description=description or "(none)", ground_truth=ground_truth,
                           generated=patched_source)),
    ])
    match = _EQUIVALENT.search(reply.content)
    return bool(match and match.group(1).lower() == "yes")


# -- evaluation -----------------------------------------------------------


def _matches(case: PortingCase, file_path: str, function_name: str) -> bool:
    """Same function, and the same file when the case records one."""
    paths = case.paths()
    return function_name == case.function_name and (not paths or file_path in paths)


def _score_group(cases: Sequence[PortingCase], report: ManagementReport, config: PipelineConfig,
                 gateway: Optional[LLMGateway], description: str = "") -> Tuple[List[CaseVerdict], PairCounts]:
    cve_id = cases[0].cve_id
    confirmed = sorted((((e.finding.target_file, e.finding.target_function), e)
                        for e in report.findings if e.finding.status in VULNERABLE_STATUSES),
                       key=lambda item: item[0])
    verdicts, counts = [], PairCounts()
    pair, relation = cases[0].repo_pair, cases[0].relation
    matched: Dict[int, PortingCase] = {}
    for key, entry in confirmed:
        index = next((i for i, c in enumerate(cases) if i not in matched and _matches(c, *key)), None)
        if index is None:
            note = "file-level finding without a file-level ground truth entry" if not key[1] else ""
            verdicts.append(CaseVerdict(cve_id=cve_id, file_path=key[0], function_name=key[1], outcome="FP",
                                        repo_pair=pair, relation=relation, note=note))
            counts.fp += 1
            continue
        case = matched[index] = cases[index]
        correct = None
        if entry.patched_function_source:
            correct = judge_equivalence(entry.patched_function_source, case.f_tpost, config.equivalence_mode,
                                        gateway, description, label=f"judge:{cve_id}:{case.function_name}")
        verdicts.append(CaseVerdict(cve_id=cve_id, file_path=key[0], function_name=key[1], outcome="TP",
                                    patch_correct=correct, equivalence_mode=config.equivalence_mode,
                                    repo_pair=case.repo_pair, relation=case.relation))
        counts.tp += 1
        counts.tpc += int(bool(correct))
    for i, case in enumerate(cases):
        if i in matched:
            continue
        same_function = [k[0] for k, _ in confirmed if k[1] == case.function_name]
        note = f"confirmed under another path: {same_function[0]}" if same_function else ""
        paths = case.paths()
        verdicts.append(CaseVerdict(cve_id=cve_id, file_path=paths[0] if paths else "",
                                    function_name=case.function_name, outcome="FN",
                                    repo_pair=case.repo_pair, relation=case.relation, note=note))
        counts.fn += 1
    return verdicts, counts


def evaluate(cases: Sequence[PortingCase], pipeline_config: PipelineConfig, dataset_dir,
             provider=None, rejects: Optional[List[CaseReject]] = None) -> EvalOutcome:
    """
    Run the pipeline once per (CVE, snapshot) group and fold the per-case results.

    Cases whose snapshot is missing are appended to ``rejects`` and left out of the counts.
    """
    dataset_dir = Path(dataset_dir)
    store = VkbStore(dataset_dir / "vkb")
    groups: Dict[Tuple[str, str], List[PortingCase]] = {}
    for case in cases:
        snapshot_dir = dataset_dir / "snapshots" / case.snapshot
        if not case.snapshot or not snapshot_dir.is_dir():
            reason = f"snapshot '{case.snapshot}' for {case.cve_id} is missing"
            logger.warning(f"Rejected case {case.case_id or case.cve_id}: {reason}")
            if rejects is not None:
                rejects.append(CaseReject(file=f"{case.case_id}.json" if case.case_id else case.cve_id,
                                          reason=reason))
            continue
        groups.setdefault((case.cve_id, case.snapshot), []).append(case)
    gateway = LLMGateway(pipeline_config.llm, provider) if pipeline_config.equivalence_mode == "judge" else None

    def run_group(key: Tuple[str, str]):
        cve_id, snapshot = key
        config = pipeline_config.model_copy(update={
            "cve_filter": [cve_id],
            "output_dir": Path(pipeline_config.output_dir) / "cases" / f"{cve_id}__{snapshot}",
        })
        record = store.load(cve_id)
        report = manage(dataset_dir / "snapshots" / snapshot, store.root, config, provider=provider,
                        records=[record])
        return _score_group(groups[key], report, pipeline_config, gateway, record.basic.description)

    with ThreadPoolExecutor(max_workers=pipeline_config.workers) as pool:
        results = list(pool.map(run_group, sorted(groups)))

    per_case: List[CaseVerdict] = []
    per_pair: Dict[str, PairCounts] = {}
    totals = PairCounts()
    for (verdicts, counts), key in zip(results, sorted(groups)):
        per_case.extend(verdicts)
        pair = per_pair.setdefault(groups[key][0].repo_pair, PairCounts())
        for name in ("tp", "fp", "fn", "tpc"):
            setattr(pair, name, getattr(pair, name) + getattr(counts, name))
            setattr(totals, name, getattr(totals, name) + getattr(counts, name))
    per_case.sort(key=lambda v: (v.cve_id, v.file_path, v.function_name, v.outcome))
    outcome = outcome_from_counts(totals.tp, totals.fp, totals.fn, totals.tpc,
                                  equivalence_mode=pipeline_config.equivalence_mode,
                                  per_case=per_case, per_repo_pair=dict(sorted(per_pair.items())))
    logger.info(f"Evaluation: TP={outcome.tp} FP={outcome.fp} FN={outcome.fn} TPC={outcome.tpc}")
    return outcome
