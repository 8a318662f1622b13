"""
Static screening for recurring vulnerabilities.

Two pluggable detectors run over a target RepoIndex:

* CloneDetector flags files containing every window of normalized lines taken from
  a historical patch's deleted and context lines.
* FunctionHashDetector flags functions whose token-shingle set is close (Jaccard)
  to a historical pre-patch function.

``detect`` returns the union, one Finding per (CVE, file, function).
"""
import hashlib
import logging
import re
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Protocol, Sequence, Set, Tuple

from pydantic import BaseModel, ConfigDict, Field

from .code_context import FunctionDef, LineSpan, RepoIndex, split_lines, strip_comments
from .config import DetectorConfig
from .diffs import parse_unified_diff
from .vkb import VulnRecord

logger = logging.getLogger(__name__)

_PROTECTED = "\x00"
_C_TOKEN = re.compile(
    r"""[A-Za-z_]\w*
      | 0[xX][0-9a-fA-F]+[uUlL]*
      | \d+\.?\d*(?:[eE][+-]?\d+)?[uUlLfF]*
      | "(?:\\.|[^"\\\n])*"
      | '(?:\\.|[^'\\\n])*'
      | \.\.\. | <<= | >>= | -> | \+\+ | -- | << | >> | <= | >= | == | != | && | \|\|
      | [-+*/%&|^]= | \#\#
      | \S""",
    re.VERBOSE,
)


class DetectionMethod(str, Enum):
    CLONE = "Clone"
    FUNC_HASH = "FuncHash"
    BOTH = "Both"


class FindingStatus(str, Enum):
    DETECTED = "Detected"
    CONFIRMED = "Confirmed"
    REJECTED = "Rejected"
    PATCHED = "Patched"
    VALIDATED = "Validated"
    QUARANTINED = "Quarantined"
    INCONCLUSIVE = "Inconclusive"


VULNERABLE_STATUSES = {FindingStatus.CONFIRMED, FindingStatus.PATCHED, FindingStatus.VALIDATED}


class Finding(BaseModel):
    model_config = ConfigDict(frozen=True)

    cve_id: str
    target_file: str
    target_function: str = ""
    method: DetectionMethod
    similarity: float = Field(ge=0.0, le=1.0)
    status: FindingStatus = FindingStatus.DETECTED
    line_span: Optional[LineSpan] = None
    reason: str = ""

    @property
    def key(self) -> Tuple[str, str, str]:
        return self.cve_id, self.target_file, self.target_function

    @property
    def file_tag(self) -> str:
        """Short stable hash of the target file; tells same-name functions in different files apart."""
        return hashlib.blake2b(self.target_file.encode("utf-8"), digest_size=3).hexdigest()

    @property
    def slug(self) -> str:
        return f"{self.cve_id}__{self.target_function or 'file-level'}__{self.file_tag}"


class CloneSignature(BaseModel):
    model_config = ConfigDict(frozen=True)

    cve_id: str
    # ordered; one entry per window, so len() == max(0, L - W + 1)
    window_hashes: Tuple[int, ...] = ()
    window_w: int
    line_count: int
    source_hunk_id: str

    @property
    def effective_window(self) -> int:
        return min(self.window_w, self.line_count)


class FunctionFingerprint(BaseModel):
    model_config = ConfigDict(frozen=True)

    cve_id: str = ""
    function_name: str = ""
    shingle_set: FrozenSet[int] = frozenset()


# -- normalization --------------------------------------------------------


def _squeeze(line: str) -> str:
    # a space survives only where dropping it would fuse '/' into a comment opener
    line = re.sub(r"/\s+(?=[/*])", "/" + _PROTECTED, line)
    return re.sub(r"\s+", "", line).replace(_PROTECTED, " ")


def normalize_with_lines(text: str) -> List[Tuple[int, str]]:
    """Normalized lines paired with their 1-based line numbers in ``text``."""
    out = []
    for number, line in enumerate(split_lines(strip_comments(text)), start=1):
        squeezed = _squeeze(line.lower())
        if squeezed:
            out.append((number, squeezed))
    return out


def normalize_source(text: str) -> List[str]:
    """
    Comments and blank lines dropped, each line lowercased with whitespace removed.

    The one exception is a single space kept between ``/`` and a following ``/`` or
    ``*`` (``a / *p`` becomes ``a/ *p``), so normalized text never opens a comment and
    normalizing it again is a no-op.
    """
    return [line for _, line in normalize_with_lines(text)]


def tokenize(text: str, lowercase: bool = True) -> List[str]:
    """C lexemes of the comment-free source."""
    stripped = strip_comments(text)
    return _C_TOKEN.findall(stripped.lower() if lowercase else stripped)


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")


def window_hashes(lines: Sequence[str], width: int) -> List[int]:
    if width <= 0 or len(lines) < width:
        return []
    return [stable_hash("\n".join(lines[i:i + width])) for i in range(len(lines) - width + 1)]


# -- clone signatures -----------------------------------------------------


def build_clone_signature(record: VulnRecord, window_w: int = 4) -> List[CloneSignature]:
    cve_id = record.basic.cve_id
    signatures = []
    for patched in record.basic.patched_files:
        for file_patch in parse_unified_diff(patched.patch_hunks):
            for k, hunk in enumerate(file_patch.hunks, start=1):
                hunk_id = f"{patched.file_path}#{k}"
                lines = normalize_source("\n".join(hunk.old_side()))
                if not hunk.removed() or not lines:
                    logger.warning(f"{cve_id}: hunk {hunk_id} only adds lines; its clone signature is empty")
                    signatures.append(CloneSignature(cve_id=cve_id, window_w=window_w, line_count=0,
                                                     source_hunk_id=hunk_id))
                    continue
                width = min(window_w, len(lines))
                signatures.append(CloneSignature(
                    cve_id=cve_id,
                    window_hashes=tuple(window_hashes(lines, width)),
                    window_w=window_w,
                    line_count=len(lines),
                    source_hunk_id=hunk_id,
                ))
    return signatures


def _file_windows(index: RepoIndex, file_path: str, width: int, cache: Dict) -> Dict[int, List[Tuple[int, ...]]]:
    """hash -> original line numbers of every occurrence of the window, memoised per (file, width)."""
    key = (file_path, width)
    if key not in cache:
        numbered = normalize_with_lines(index.file_text(file_path))
        lines = [line for _, line in numbered]
        table: Dict[int, List[Tuple[int, ...]]] = {}
        for i, h in enumerate(window_hashes(lines, width)):
            table.setdefault(h, []).append(tuple(number for number, _ in numbered[i:i + width]))
        cache[key] = table
    return cache[key]


def _owner(index: RepoIndex, file_path: str, lines: Iterable[int]) -> Optional[FunctionDef]:
    votes: Dict[str, int] = {}
    owners: Dict[str, FunctionDef] = {}
    for line in sorted(set(lines)):
        fn = index.enclosing_function(file_path, line)
        if fn is not None:
            key = f"{fn.line_span.start:09d}:{fn.name}"
            votes[key] = votes.get(key, 0) + 1
            owners[key] = fn
    if not votes:
        return None
    best = max(sorted(votes), key=lambda k: votes[k])
    return owners[best]


def _owned_matches(index: RepoIndex, file_path: str, wanted: Set[int],
                   table: Dict[int, List[Tuple[int, ...]]]) -> List[Tuple[Optional[FunctionDef], List[int]]]:
    """
    Matched lines grouped by the function enclosing each window occurrence.

    Every function holding all wanted windows is its own match. When no single
    function does (a hunk spanning two functions), all matched lines vote for one owner.
    """
    groups: Dict[str, Tuple[Optional[FunctionDef], Set[int], List[int]]] = {}
    for h in sorted(wanted):
        for occurrence in table[h]:
            fn = _owner(index, file_path, occurrence)
            key = f"{fn.line_span.start:09d}:{fn.name}" if fn is not None else ""
            owner, hashes, lines = groups.setdefault(key, (fn, set(), []))
            hashes.add(h)
            lines.extend(occurrence)
    complete = [(owner, lines) for _, (owner, hashes, lines) in sorted(groups.items()) if hashes == wanted]
    if complete:
        return complete
    matched = [line for h in wanted for occurrence in table[h] for line in occurrence]
    return [(_owner(index, file_path, matched), matched)]


def _merge_span(a: Optional[LineSpan], b: Optional[LineSpan]) -> Optional[LineSpan]:
    if a is None or b is None:
        return a or b
    return LineSpan(start=min(a.start, b.start), end=max(a.end, b.end))


def scan_clone(index: RepoIndex, signatures: Sequence[CloneSignature]) -> List[Finding]:
    found: Dict[Tuple[str, str, str], Finding] = {}
    cache: Dict = {}
    usable = [s for s in signatures if s.window_hashes]
    for file_path in index.files:
        for signature in usable:
            table = _file_windows(index, file_path, signature.effective_window, cache)
            wanted = set(signature.window_hashes)
            if not wanted.issubset(table.keys()):
                continue
            for owner, matched in _owned_matches(index, file_path, wanted, table):
                if owner is None:
                    logger.warning(f"{signature.cve_id}: clone hit in {file_path} lies outside any function")
                span = LineSpan(start=min(matched), end=max(matched))
                finding = Finding(
                    cve_id=signature.cve_id,
                    target_file=file_path,
                    target_function=owner.name if owner else "",
                    method=DetectionMethod.CLONE,
                    similarity=1.0,
                    line_span=span,
                )
                previous = found.get(finding.key)
                if previous is not None:
                    finding = previous.model_copy(update={"line_span": _merge_span(previous.line_span, span)})
                found[finding.key] = finding
    return sorted(found.values(), key=lambda f: f.key)


# -- function fingerprints ------------------------------------------------


def shingles(tokens: Sequence[str], n: int) -> FrozenSet[int]:
    if len(tokens) < n:
        return frozenset()
    return frozenset(stable_hash("\x1f".join(tokens[i:i + n])) for i in range(len(tokens) - n + 1))


def build_function_fingerprint(function_source: str, n: int = 5, cve_id: str = "",
                               function_name: str = "") -> FunctionFingerprint:
    return FunctionFingerprint(cve_id=cve_id, function_name=function_name,
                               shingle_set=shingles(tokenize(function_source), n))


def jaccard(a: FrozenSet[int], b: FrozenSet[int]) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def record_fingerprints(record: VulnRecord, n: int = 5) -> List[FunctionFingerprint]:
    prints = []
    for entry in record.basic.vulnerable_functions:
        fp = build_function_fingerprint(entry.pre_patch_source, n, record.basic.cve_id, entry.function_name)
        if fp.shingle_set:
            prints.append(fp)
        else:
            logger.info(f"{record.basic.cve_id}: {entry.function_name} is shorter than {n} tokens; not fingerprinted")
    return prints


def scan_function_hash(index: RepoIndex, fingerprints: Sequence[FunctionFingerprint], theta: float,
                       n: int = 5) -> List[Finding]:
    found: Dict[Tuple[str, str, str], Finding] = {}
    usable = [fp for fp in fingerprints if fp.shingle_set]
    if not usable:
        return []
    for fn in index.functions():
        target = shingles(tokenize(fn.body_source), n)
        if not target:
            continue
        for fp in usable:
            small, large = sorted((len(target), len(fp.shingle_set)))
            # Jaccard never exceeds the size ratio
            if small < theta * large - 1e-9:
                continue
            similarity = jaccard(target, fp.shingle_set)
            if similarity < theta:
                continue
            finding = Finding(cve_id=fp.cve_id, target_file=fn.file_path, target_function=fn.name,
                              method=DetectionMethod.FUNC_HASH, similarity=similarity, line_span=fn.line_span)
            previous = found.get(finding.key)
            if previous is None or previous.similarity < similarity:
                found[finding.key] = finding
    return sorted(found.values(), key=lambda f: f.key)


# -- pluggable detectors --------------------------------------------------


class Detector(Protocol):
    name: str

    def scan(self, index: RepoIndex, records: Sequence[VulnRecord]) -> List[Finding]:
        ...


class CloneDetector:
    name = "clone"

    def __init__(self, window_w: int = 4):
        self.window_w = window_w

    def scan(self, index: RepoIndex, records: Sequence[VulnRecord]) -> List[Finding]:
        signatures = [s for r in records for s in build_clone_signature(r, self.window_w)]
        return scan_clone(index, signatures)


class FunctionHashDetector:
    name = "funchash"

    def __init__(self, shingle_n: int = 5, theta: float = 0.8):
        self.shingle_n = shingle_n
        self.theta = theta

    def scan(self, index: RepoIndex, records: Sequence[VulnRecord]) -> List[Finding]:
        prints = [fp for r in records for fp in record_fingerprints(r, self.shingle_n)]
        return scan_function_hash(index, prints, self.theta, self.shingle_n)


def default_detectors(config: DetectorConfig) -> List[Detector]:
    return [CloneDetector(config.window_w), FunctionHashDetector(config.shingle_n, config.theta)]


def union_findings(results: Iterable[Sequence[Finding]]) -> List[Finding]:
    merged: Dict[Tuple[str, str, str], Finding] = {}
    for findings in results:
        for finding in findings:
            previous = merged.get(finding.key)
            if previous is None:
                merged[finding.key] = finding
                continue
            if previous.method == finding.method:
                best = previous if previous.similarity >= finding.similarity else finding
                merged[finding.key] = best
                continue
            hash_hit = finding if finding.method == DetectionMethod.FUNC_HASH else previous
            clone_hit = previous if hash_hit is finding else finding
            merged[finding.key] = clone_hit.model_copy(update={
                "method": DetectionMethod.BOTH,
                "similarity": hash_hit.similarity,
            })
    return [f.model_copy(update={"status": FindingStatus.DETECTED}) for _, f in sorted(merged.items())]


def detect(target_index: RepoIndex, records: Sequence[VulnRecord], config: Optional[DetectorConfig] = None,
           cve_ids: Optional[Iterable[str]] = None, detectors: Optional[Sequence[Detector]] = None) -> List[Finding]:
    """Union of every detector's findings, sorted by (cve_id, file, function)."""
    config = config or DetectorConfig()
    wanted = set(cve_ids) if cve_ids else None
    selected = [r for r in records if wanted is None or r.basic.cve_id in wanted]
    if not selected:
        return []
    detectors = detectors if detectors is not None else default_detectors(config)
    results = []
    for detector in detectors:
        hits = detector.scan(target_index, selected)
        logger.info(f"Detector {detector.name} reported {len(hits)} findings")
        results.append(hits)
    findings = union_findings(results)
    logger.info(f"Detection over {len(target_index.files)} files found {len(findings)} findings")
    return findings
