"""
Function-level patch application on a copy-on-touch sandbox of the target repository.
"""
import logging
import shutil
import tempfile
from pathlib import Path
from typing import Dict, List, Sequence, Union

from pydantic import BaseModel

from .code_context import (
    FunctionDef,
    LineSpan,
    RepoIndex,
    decode_source,
    encode_source,
    extract_span,
    parse_single_function,
)
from .config import DetectorConfig
from .detector import Finding, detect
from .diffs import apply_file_patch, apply_unified_diff, keep_ends, parse_unified_diff, render_unified_diff
from .errors import PatchApplyError, SpanDriftError
from .vkb import VulnRecord

logger = logging.getLogger(__name__)

__all__ = [
    "AppliedReplacement", "RescanResult", "SandboxWorkspace", "splice_function", "apply_function_replacement",
    "render_unified_diff", "apply_unified_diff", "rescan_patched", "write_patch_file", "apply_to_origin",
]


class AppliedReplacement(BaseModel):
    file_path: str
    function_name: str
    original_span: LineSpan
    replacement_length: int


class RescanResult(BaseModel):
    flagged: bool
    details: List[Finding] = []


class SandboxWorkspace:
    """
    Files are copied from ``origin_root`` the first time they are touched; the origin
    tree is only ever read.
    """

    def __init__(self, origin_root, sandbox_root=None):
        self.origin_root = Path(origin_root)
        self._owns_sandbox = sandbox_root is None
        self.sandbox_root = Path(sandbox_root or tempfile.mkdtemp(prefix="recurvuln-sandbox-"))
        self.applied: List[AppliedReplacement] = []
        self._originals: Dict[str, str] = {}

    def __enter__(self) -> "SandboxWorkspace":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self._owns_sandbox:
            shutil.rmtree(self.sandbox_root, ignore_errors=True)

    def touch(self, file_path: str) -> Path:
        target = self.sandbox_root / file_path
        if not target.exists():
            source = self.origin_root / file_path
            if not source.is_file():
                raise PatchApplyError(f"{file_path} does not exist in {self.origin_root}")
            target.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(source, target)
            self._originals[file_path] = decode_source(source.read_bytes())
        return target

    def read(self, file_path: str) -> str:
        return decode_source(self.touch(file_path).read_bytes())

    def original(self, file_path: str) -> str:
        self.touch(file_path)
        return self._originals[file_path]

    def write(self, file_path: str, text: str) -> None:
        self.touch(file_path).write_bytes(encode_source(text))

    def reset(self, file_path: str) -> None:
        """Restore the sandbox copy to the origin content."""
        self.write(file_path, self.original(file_path))
        self.applied = [a for a in self.applied if a.file_path != file_path]

    def diff(self, file_path: str, context_lines: int = 3) -> str:
        return render_unified_diff(self.original(file_path), self.read(file_path), file_path, context_lines)


def _newline_of(lines: List[str]) -> str:
    for line in lines:
        if line.endswith("\n"):
            return "\r\n" if line.endswith("\r\n") else "\n"
    return "\n"


def splice_function(text: str, file_path: str, function: FunctionDef, new_source: str) -> str:
    """Replace exactly the function's line span in ``text``, keeping the file's newline convention."""
    span = function.line_span
    lines = keep_ends(text)
    if span.end > len(lines) or extract_span(text, span.start, span.end) != function.body_source:
        raise SpanDriftError(f"{file_path}: {function.name} no longer sits at lines {span.start}-{span.end}")
    try:
        parsed = parse_single_function(new_source)
    except ValueError as e:
        raise PatchApplyError(f"Replacement for {function.name} does not parse: {str(e)}") from e
    if parsed.name != function.name:
        raise PatchApplyError(f"Replacement defines {parsed.name}, expected {function.name}")

    newline = _newline_of(lines)
    body = [line.rstrip("\r") for line in new_source.rstrip("\r\n").split("\n")]
    replacement = [line + newline for line in body]
    if not lines[span.end - 1].endswith("\n"):
        replacement[-1] = body[-1]
    return "".join(lines[:span.start - 1] + replacement + lines[span.end:])


def apply_function_replacement(ws: SandboxWorkspace, file_path: str, function: FunctionDef, new_source: str) -> str:
    """Splice ``new_source`` into the sandbox copy; returns the updated file text."""
    patched = splice_function(ws.read(file_path), file_path, function, new_source)
    ws.write(file_path, patched)
    span = function.line_span
    length = len(new_source.rstrip("\r\n").split("\n"))
    ws.applied.append(AppliedReplacement(file_path=file_path, function_name=function.name,
                                         original_span=span, replacement_length=length))
    logger.info(f"Replaced {function.name} in sandbox copy of {file_path} "
                f"({span.end - span.start + 1} -> {length} lines)")
    return patched


def rescan_patched(ws: SandboxWorkspace, finding: Finding, detector_config: DetectorConfig,
                   vkb: Union[VulnRecord, Sequence[VulnRecord]]) -> RescanResult:
    """Run both detectors, restricted to the finding's CVE, over the patched sandbox file."""
    records = [vkb] if isinstance(vkb, VulnRecord) else list(vkb)
    index = RepoIndex.from_sources("target", {finding.target_file: ws.read(finding.target_file)})
    hits = detect(index, records, detector_config, cve_ids=[finding.cve_id])
    if finding.target_function:
        hits = [h for h in hits if h.target_function == finding.target_function]
    logger.info(f"Rescan of {finding.slug}: {len(hits)} remaining hits")
    return RescanResult(flagged=bool(hits), details=hits)


def write_patch_file(output_dir, finding: Finding, diff_text: str) -> Path:
    patches = Path(output_dir) / "patches"
    patches.mkdir(parents=True, exist_ok=True)
    path = patches / f"{finding.slug}.diff"
    path.write_bytes(encode_source(diff_text))
    return path


def apply_to_origin(repo_root, diff_text: str) -> List[str]:
    """
    Apply a (possibly multi-file) unified diff to a checkout.

    Every file is patched in memory first; nothing is written unless all apply.
    """
    root = Path(repo_root)
    results: Dict[str, str] = {}
    for patch in parse_unified_diff(diff_text):
        path = root / patch.path
        if not path.is_file():
            raise PatchApplyError(f"{patch.path} does not exist in {root}")
        current = results.get(patch.path)
        if current is None:
            current = decode_source(path.read_bytes())
        results[patch.path] = apply_file_patch(current, patch)
    for rel, text in results.items():
        (root / rel).write_bytes(encode_source(text))
        logger.info(f"Patched {rel} in {root}")
    return sorted(results)
