"""
Vulnerability Knowledge Base.

A record per CVE holds the basic information (NVD attributes, the fixing commit,
its per-file hunks and the vulnerable functions before and after the fix), a
five-section analysis report and the analysis points distilled from it.
"""
import json
import logging
import os
import re
import subprocess
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Tuple

import requests
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .code_context import C_EXTENSIONS, parse_definitions
from .diffs import FilePatch, format_file_patch, parse_unified_diff
from .errors import (
    CommitUnreachableError,
    CveNotFoundError,
    DistillationError,
    IngestError,
    RecordNotFoundError,
    RecordParseError,
    TemplateViolationError,
)
from .llm_gateway import LLMGateway, system, user
from .prompts import render_prompt

logger = logging.getLogger(__name__)

CVE_PATTERN = re.compile(r"^CVE-\d{4}-\d{4,}$")
CWE_PATTERN = re.compile(r"^CWE-\d+$")
COMMIT_URL = re.compile(r"^https?://[^/]+/(?P<repo>[^/]+/[^/]+?)(?:/-)?/commit/(?P<sha>[0-9a-fA-F]{7,40})/?$")

NVD_API_URL = "https://services.nvd.nist.gov/rest/json/cves/2.0"
GITHUB_API_URL = "https://api.github.com"
GITHUB_RAW_URL = "https://raw.githubusercontent.com"
INDEX_FILE = "index.json"

# (field, heading) in template order
REPORT_SECTIONS: List[Tuple[str, str]] = [
    ("vulnerability_description", "Vulnerability Description"),
    ("cwe_category", "CWE Category"),
    ("root_cause", "Root Cause Analysis"),
    ("trigger_chain", "Vulnerability Trigger Chain"),
    ("patch_analysis", "Patch Analysis"),
]


# -- domain types ---------------------------------------------------------


class PatchedFile(BaseModel):
    file_path: str
    patch_hunks: str


class VulnerableFunction(BaseModel):
    file_path: str
    function_name: str
    pre_patch_source: str
    post_patch_source: str


class VulnBasicInfo(BaseModel):
    cve_id: str
    cwe_id: Optional[str] = None
    description: str = ""
    repo_name: str
    commit_url: str
    commit_message: str = ""
    patched_files: List[PatchedFile] = Field(default_factory=list)
    vulnerable_functions: List[VulnerableFunction] = Field(default_factory=list)
    # hunks that fall outside every function, as "path#k"
    file_level_hunks: List[str] = Field(default_factory=list)
    notes: str = ""

    @field_validator("cve_id")
    @classmethod
    def check_cve_id(cls, v):
        if not CVE_PATTERN.match(v):
            raise ValueError(f"Malformed CVE id: {v}")
        return v

    @field_validator("cwe_id")
    @classmethod
    def check_cwe_id(cls, v):
        if v is not None and not CWE_PATTERN.match(v):
            raise ValueError(f"Malformed CWE id: {v}")
        return v

    @model_validator(mode="after")
    def check_functions(self):
        patched = {f.file_path for f in self.patched_files}
        for entry in self.vulnerable_functions:
            if entry.file_path not in patched:
                raise ValueError(f"{entry.function_name}: {entry.file_path} is not among the patched files")
            if entry.pre_patch_source == entry.post_patch_source:
                raise ValueError(f"{entry.function_name}: pre- and post-patch sources are identical")
        return self

    def patch_text(self) -> str:
        return "".join(f.patch_hunks for f in self.patched_files)

    def function(self, name: str) -> Optional[VulnerableFunction]:
        return next((f for f in self.vulnerable_functions if f.function_name == name), None)


class AnalysisReport(BaseModel):
    vulnerability_description: str
    cwe_category: str
    root_cause: str
    trigger_chain: str
    patch_analysis: str
    reprompt_count: int = 0

    @field_validator("vulnerability_description", "cwe_category", "root_cause", "trigger_chain", "patch_analysis")
    @classmethod
    def non_empty(cls, v):
        if not v.strip():
            raise ValueError("report sections must be non-empty")
        return v

    def render(self) -> str:
        return "\n\n".join(f"## {heading}\n{getattr(self, name)}" for name, heading in REPORT_SECTIONS)


class AnalysisPoint(BaseModel):
    point_id: int = Field(ge=1)
    directive: str = Field(min_length=1)
    symbols_of_interest: List[str] = Field(default_factory=list)

    def render(self) -> str:
        return f"{self.point_id}. {self.directive}"


class VulnRecord(BaseModel):
    basic: VulnBasicInfo
    report: AnalysisReport
    points: List[AnalysisPoint] = Field(min_length=1)
    created_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))

    @field_validator("points")
    @classmethod
    def unique_ids(cls, v):
        ids = [p.point_id for p in v]
        if len(ids) != len(set(ids)):
            raise ValueError("point ids must be unique within a record")
        return v

    @property
    def cve_id(self) -> str:
        return self.basic.cve_id


# -- ingestion ------------------------------------------------------------


class CommitData(BaseModel):
    sha: str
    message: str
    diff: str
    parent_files: Dict[str, str] = Field(default_factory=dict)
    child_files: Dict[str, str] = Field(default_factory=dict)


class SourceBundle(Protocol):
    """Where NVD records and commits come from."""

    def nvd_record(self, cve_id: str) -> dict:
        ...

    def commit(self, repo_name: str, sha: str) -> CommitData:
        ...


def parse_commit_url(commit_url: Optional[str]) -> Tuple[str, str]:
    """Split ``https://github.com/owner/repo/commit/sha`` into (owner/repo, sha)."""
    match = COMMIT_URL.match((commit_url or "").strip())
    if not match:
        raise CommitUnreachableError(f"commit unreachable: '{commit_url}' is not a commit URL")
    return match.group("repo"), match.group("sha").lower()


def _unwrap_nvd(payload: dict, cve_id: str) -> dict:
    """Accept an API 2.0 response, a single vulnerability item or a bare cve object."""
    if "vulnerabilities" in payload:
        items = payload["vulnerabilities"]
        if not items:
            raise CveNotFoundError(f"{cve_id} not found in NVD")
        payload = items[0]
    return payload.get("cve", payload)


def extract_cwes(cve: dict) -> List[str]:
    found = []
    for weakness in cve.get("weaknesses", []):
        for d in weakness.get("description", []):
            if d.get("lang") == "en" and d.get("value", "").startswith("CWE-") and d["value"] not in found:
                found.append(d["value"])
    return found


def _english_description(cve: dict) -> str:
    return next((d["value"] for d in cve.get("descriptions", []) if d.get("lang") == "en"), "")


class OfflineBundle:
    """
    Pre-fetched inputs laid out as::

        nvd/<CVE-ID>.json
        commits/<sha>/commit.json      {"message": ...}
        commits/<sha>/diff.patch
        commits/<sha>/parent/<path>    file contents before the commit
        commits/<sha>/child/<path>     file contents after the commit
    """

    def __init__(self, root):
        self.root = Path(root)

    def nvd_record(self, cve_id: str) -> dict:
        path = self.root / "nvd" / f"{cve_id}.json"
        if not path.is_file():
            raise CveNotFoundError(f"{cve_id} not found in NVD bundle {self.root}")
        try:
            return _unwrap_nvd(json.loads(path.read_text(encoding="utf-8")), cve_id)
        except json.JSONDecodeError as e:
            raise IngestError(f"Malformed NVD record {path}: {str(e)}") from e

    def _commit_dir(self, sha: str) -> Path:
        commits = self.root / "commits"
        if commits.is_dir():
            for candidate in sorted(commits.iterdir()):
                name = candidate.name.lower()
                if candidate.is_dir() and (name.startswith(sha) or sha.startswith(name)):
                    return candidate
        raise CommitUnreachableError(f"commit unreachable: {sha} is not in bundle {self.root}")

    @staticmethod
    def _snapshot(root: Path) -> Dict[str, str]:
        if not root.is_dir():
            return {}
        return {
            p.relative_to(root).as_posix(): p.read_bytes().decode("utf-8", errors="replace")
            for p in sorted(root.rglob("*")) if p.is_file()
        }

    def commit(self, repo_name: str, sha: str) -> CommitData:
        directory = self._commit_dir(sha)
        meta_path = directory / "commit.json"
        meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.is_file() else {}
        diff_path = directory / "diff.patch"
        if not diff_path.is_file():
            raise CommitUnreachableError(f"commit unreachable: {directory} has no diff.patch")
        return CommitData(
            sha=directory.name,
            message=meta.get("message", ""),
            diff=diff_path.read_bytes().decode("utf-8", errors="replace"),
            parent_files=self._snapshot(directory / "parent"),
            child_files=self._snapshot(directory / "child"),
        )


class LiveSource:
    """NVD API 2.0 plus the GitHub REST and raw content endpoints."""

    def __init__(self, timeout: float = 30.0):
        self.timeout = timeout
        self.session = requests.Session()
        github_token = os.getenv("GITHUB_TOKEN")
        if github_token:
            self.session.headers["Authorization"] = f"Bearer {github_token}"

    def _get(self, url: str, **kwargs) -> requests.Response:
        try:
            return self.session.get(url, timeout=self.timeout, **kwargs)
        except requests.RequestException as e:
            raise IngestError(f"Request to {url} failed: {str(e)}") from e

    def nvd_record(self, cve_id: str) -> dict:
        headers = {}
        if os.getenv("NVD_API_KEY"):
            headers["apiKey"] = os.getenv("NVD_API_KEY")
        # NVD rejects requests carrying the GitHub token
        try:
            resp = requests.get(NVD_API_URL, params={"cveId": cve_id}, headers=headers, timeout=self.timeout)
        except requests.RequestException as e:
            raise IngestError(f"NVD request failed: {str(e)}") from e
        if resp.status_code == 404:
            raise CveNotFoundError(f"{cve_id} not found in NVD")
        if resp.status_code != 200:
            raise IngestError(f"NVD returned HTTP {resp.status_code} for {cve_id}")
        return _unwrap_nvd(resp.json(), cve_id)

    def _raw(self, repo_name: str, sha: str, path: str) -> Optional[str]:
        resp = self._get(f"{GITHUB_RAW_URL}/{repo_name}/{sha}/{path}")
        if resp.status_code != 200:
            return None
        return resp.content.decode("utf-8", errors="replace")

    def commit(self, repo_name: str, sha: str) -> CommitData:
        url = f"{GITHUB_API_URL}/repos/{repo_name}/commits/{sha}"
        meta = self._get(url)
        if meta.status_code != 200:
            raise CommitUnreachableError(f"commit unreachable: {url} returned HTTP {meta.status_code}")
        payload = meta.json()
        full_sha = payload["sha"]
        parents = payload.get("parents") or []
        if not parents:
            raise CommitUnreachableError(f"commit unreachable: {full_sha} has no parent")
        parent_sha = parents[0]["sha"]
        diff = self._get(url, headers={"Accept": "application/vnd.github.v3.diff"})
        if diff.status_code != 200:
            raise CommitUnreachableError(f"commit unreachable: diff for {full_sha} returned HTTP {diff.status_code}")
        data = CommitData(sha=full_sha, message=payload.get("commit", {}).get("message", ""),
                          diff=diff.content.decode("utf-8", errors="replace"))
        for patch in parse_unified_diff(data.diff):
            before = self._raw(repo_name, parent_sha, patch.old_path) if patch.old_path != "/dev/null" else None
            after = self._raw(repo_name, full_sha, patch.new_path) if patch.new_path != "/dev/null" else None
            if before is not None:
                data.parent_files[patch.old_path] = before
            if after is not None:
                data.child_files[patch.new_path] = after
        return data


class GitCloneSource:
    """A local clone of the source repository; NVD data comes from ``nvd`` (offline or live)."""

    def __init__(self, clone_dir, nvd: Optional[SourceBundle] = None):
        self.clone_dir = Path(clone_dir)
        self.nvd = nvd or LiveSource()

    def nvd_record(self, cve_id: str) -> dict:
        return self.nvd.nvd_record(cve_id)

    def _git(self, *args: str) -> Optional[str]:
        result = subprocess.run(["git", "-C", str(self.clone_dir), *args], capture_output=True)
        if result.returncode != 0:
            return None
        return result.stdout.decode("utf-8", errors="replace")

    def commit(self, repo_name: str, sha: str) -> CommitData:
        message = self._git("show", "-s", "--format=%B", sha)
        diff = self._git("diff", f"{sha}^", sha)
        if message is None or diff is None:
            raise CommitUnreachableError(f"commit unreachable: {sha} not found in {self.clone_dir}")
        data = CommitData(sha=sha, message=message.strip(), diff=diff)
        for patch in parse_unified_diff(diff):
            before = self._git("show", f"{sha}^:{patch.old_path}") if patch.old_path != "/dev/null" else None
            after = self._git("show", f"{sha}:{patch.new_path}") if patch.new_path != "/dev/null" else None
            if before is not None:
                data.parent_files[patch.old_path] = before
            if after is not None:
                data.child_files[patch.new_path] = after
        return data


def _is_c_file(path: str) -> bool:
    return os.path.splitext(path)[1].lower() in C_EXTENSIONS


def _owner_at(functions, line: int):
    return next((fn for fn in functions if fn.line_span.contains(line)), None)


def _vulnerable_functions(patch: FilePatch, parent: str, child: str,
                          cve_id: str) -> Tuple[List[VulnerableFunction], List[str]]:
    before_fns, _, _ = parse_definitions(parent, patch.old_path)
    after_fns, _, _ = parse_definitions(child, patch.new_path)
    names: List[str] = []
    file_level: List[str] = []
    for k, hunk in enumerate(patch.hunks, start=1):
        owners = set()
        old_lines = hunk.removed_line_numbers() or [hunk.old_anchor()]
        for line in old_lines:
            fn = _owner_at(before_fns, line)
            if fn is not None:
                owners.add(fn.name)
        for line in hunk.added_line_numbers():
            fn = _owner_at(after_fns, line)
            if fn is not None:
                owners.add(fn.name)
        if not owners:
            logger.warning(f"{cve_id}: hunk {patch.path}#{k} is not inside any function; recorded at file level")
            file_level.append(f"{patch.path}#{k}")
        names.extend(sorted(n for n in owners if n not in names))
    entries = []
    before_by_name = {fn.name: fn for fn in before_fns}
    after_by_name = {fn.name: fn for fn in after_fns}
    for name in names:
        pre, post = before_by_name.get(name), after_by_name.get(name)
        if pre is None or post is None:
            logger.warning(f"{cve_id}: {name} exists on one side of the commit only; skipped")
            continue
        if pre.body_source == post.body_source:
            continue
        entries.append(VulnerableFunction(file_path=patch.path, function_name=name,
                                          pre_patch_source=pre.body_source, post_patch_source=post.body_source))
    return entries, file_level


def ingest_basic(cve_id: str, commit_url: Optional[str], source_bundle: SourceBundle) -> VulnBasicInfo:
    """Collect NVD attributes and the fixing commit, and extract the vulnerable functions."""
    if not CVE_PATTERN.match(cve_id or ""):
        raise CveNotFoundError(f"Malformed CVE id: {cve_id}")
    repo_name, sha = parse_commit_url(commit_url)
    cve = source_bundle.nvd_record(cve_id)
    cwes = extract_cwes(cve)
    commit = source_bundle.commit(repo_name, sha)

    patched_files, functions, file_level = [], [], []
    for patch in parse_unified_diff(commit.diff):
        patched_files.append(PatchedFile(file_path=patch.path, patch_hunks=format_file_patch(patch)))
        if not _is_c_file(patch.path):
            continue
        parent = commit.parent_files.get(patch.old_path)
        child = commit.child_files.get(patch.new_path)
        if parent is None or child is None:
            logger.warning(f"{cve_id}: no parent/child snapshot of {patch.path}; functions not extracted")
            continue
        entries, unmatched = _vulnerable_functions(patch, parent, child, cve_id)
        functions.extend(entries)
        file_level.extend(unmatched)

    notes = f"additional CWEs: {', '.join(cwes[1:])}" if len(cwes) > 1 else ""
    basic = VulnBasicInfo(
        cve_id=cve_id,
        cwe_id=cwes[0] if cwes else None,
        description=_english_description(cve),
        repo_name=repo_name,
        commit_url=commit_url.strip(),
        commit_message=commit.message,
        patched_files=patched_files,
        vulnerable_functions=functions,
        file_level_hunks=file_level,
        notes=notes,
    )
    logger.info(f"Ingested {cve_id}: {len(patched_files)} files, {len(functions)} vulnerable functions")
    return basic


# -- report and points ----------------------------------------------------

_HEADING = re.compile(r"^\s*(?:#{1,6}\s*|\*\*)\s*(?:\d+[.)]?\s*)?(?P<title>[^*#]+?)\s*:?\s*(?:\*\*)?\s*#*\s*$")


def _canonical_section(title: str) -> Optional[str]:
    title = re.sub(r"[^a-z ]", " ", title.lower())
    title = re.sub(r"\s+", " ", title).strip()
    for name, heading in REPORT_SECTIONS:
        if title == heading.lower():
            return name
    return None


def parse_report_sections(text: str) -> Dict[str, str]:
    """Split text on the template headings; content between headings is kept verbatim."""
    sections: Dict[str, List[str]] = {}
    current: Optional[str] = None
    for line in text.split("\n"):
        match = _HEADING.match(line)
        name = _canonical_section(match.group("title")) if match else None
        if name is not None:
            current = name
            sections[current] = []
            continue
        if current is not None:
            sections[current].append(line)
    return {name: "\n".join(lines).strip("\n") for name, lines in sections.items()}


def _missing_sections(sections: Dict[str, str]) -> List[str]:
    return [heading for name, heading in REPORT_SECTIONS if not sections.get(name, "").strip()]


def _functions_block(basic: VulnBasicInfo) -> str:
    if not basic.vulnerable_functions:
        return "(none extracted)"
    return "\n\n".join(f"// {f.file_path}\n{f.pre_patch_source}" for f in basic.vulnerable_functions)


def generate_report(basic: VulnBasicInfo, gateway: LLMGateway) -> AnalysisReport:
    prompt = render_prompt(
        "report",
        cve_id=basic.cve_id,
        cwe_id=basic.cwe_id or "unknown",
        repo_name=basic.repo_name,
        description=basic.description,
        commit_message=basic.commit_message,
        patch=basic.patch_text(),
        functions=_functions_block(basic),
    )
    session = gateway.session(f"report:{basic.cve_id}")
    messages = [system("You write structured vulnerability analysis reports."), user(prompt)]
    reprompts = 0
    while True:
        reply = session.complete(messages)
        sections = parse_report_sections(reply.content)
        missing = _missing_sections(sections)
        if not missing:
            return AnalysisReport(reprompt_count=reprompts, **sections)
        if reprompts >= 1:
            raise TemplateViolationError(f"template violation: {basic.cve_id} report lacks {', '.join(missing)}")
        reprompts += 1
        logger.warning(f"{basic.cve_id}: report lacks {', '.join(missing)}; asking again")
        messages += [reply, user(
            "Your report is missing these sections: " + ", ".join(missing)
            + ". Reply with the complete report using all five headings.")]


_POINT_LINE = re.compile(r"^\s*(\d+)[.)]\s+(.+?)\s*$")
_BACKTICKED = re.compile(r"`([^`]+)`")
_IDENT = re.compile(r"[A-Za-z_]\w*")


def extract_symbols(directive: str) -> List[str]:
    symbols = []
    for raw in _BACKTICKED.findall(directive):
        raw = re.sub(r"^(struct|union|enum)\s+", "", raw.strip())
        match = _IDENT.match(raw)
        if match and match.group(0) not in symbols:
            symbols.append(match.group(0))
    return symbols


def parse_points(text: str) -> List[AnalysisPoint]:
    points = []
    for line in text.split("\n"):
        match = _POINT_LINE.match(line)
        if match:
            directive = match.group(2)
            points.append(AnalysisPoint(point_id=len(points) + 1, directive=directive,
                                        symbols_of_interest=extract_symbols(directive)))
    return points


def distill_points(report: AnalysisReport, gateway: LLMGateway, label: str = "distill") -> List[AnalysisPoint]:
    session = gateway.session(label)
    reply = session.complete([system("You distill vulnerability reports into checkable analysis points."),
                              user(render_prompt("distill", report=report.render()))])
    points = parse_points(reply.content)
    if not points:
        raise DistillationError("no analysis points could be parsed from the model output")
    return points


def build_record(cve_id: str, commit_url: str, source_bundle: SourceBundle, gateway: LLMGateway) -> VulnRecord:
    basic = ingest_basic(cve_id, commit_url, source_bundle)
    report = generate_report(basic, gateway)
    points = distill_points(report, gateway, label=f"distill:{cve_id}")
    return VulnRecord(basic=basic, report=report, points=points)


# -- persistence ----------------------------------------------------------


class VkbStore:
    """One JSON document per CVE under ``root`` plus an ``index.json`` summary."""

    def __init__(self, root):
        self.root = Path(root)
        self._guard = threading.Lock()
        self._locks: Dict[str, threading.Lock] = {}

    def _lock(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def _path(self, cve_id: str) -> Path:
        return self.root / f"{cve_id}.json"

    @staticmethod
    def _write(path: Path, text: str) -> None:
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)

    def store(self, record: VulnRecord) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self._path(record.cve_id)
        with self._lock(record.cve_id):
            self._write(path, record.model_dump_json(indent=2))
        self._update_index()
        logger.info(f"Stored VKB record {record.cve_id} at {path}")
        return path

    def load(self, cve_id: str) -> VulnRecord:
        path = self._path(cve_id)
        if not path.is_file():
            raise RecordNotFoundError(f"No VKB record for {cve_id}")
        with self._lock(cve_id):
            raw = path.read_text(encoding="utf-8")
        try:
            return VulnRecord.model_validate_json(raw)
        except ValidationError as e:
            raise RecordParseError(f"Corrupt VKB record {path}: {str(e)}") from e

    def list_records(self) -> List[str]:
        if not self.root.is_dir():
            return []
        return sorted(p.stem for p in self.root.glob("CVE-*.json"))

    def load_all(self, cve_ids: Optional[List[str]] = None) -> List[VulnRecord]:
        wanted = cve_ids or self.list_records()
        return [self.load(cve_id) for cve_id in sorted(set(wanted))]

    def _update_index(self) -> None:
        with self._lock(INDEX_FILE):
            entries = []
            for cve_id in self.list_records():
                try:
                    record = self.load(cve_id)
                except RecordParseError as e:
                    logger.warning(f"Skipping unreadable record in index: {str(e)}")
                    continue
                entries.append({
                    "cve_id": cve_id,
                    "cwe_id": record.basic.cwe_id,
                    "repo_name": record.basic.repo_name,
                    "functions": [f.function_name for f in record.basic.vulnerable_functions],
                    "created_at": record.created_at.isoformat(),
                })
            self._write(self.root / INDEX_FILE, json.dumps(entries, indent=2))
