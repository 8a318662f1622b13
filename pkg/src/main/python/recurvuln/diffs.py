"""
Unified diff parsing, rendering and application.
"""
import difflib
import re
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .errors import PatchApplyError

HUNK_HEADER = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")
NO_NEWLINE = "\\ No newline at end of file"
DEV_NULL = "/dev/null"


def keep_ends(text: str) -> List[str]:
    """Split after every ``\\n`` and nothing else (form feeds and lone CRs stay inside lines)."""
    lines = [line + "\n" for line in text.split("\n")]
    lines[-1] = lines[-1][:-1]
    if not lines[-1]:
        lines.pop()
    return lines


def line_text(diff_line: str) -> str:
    """Content of a hunk line without its marker and terminator."""
    return diff_line[1:].rstrip("\n").rstrip("\r")


@dataclass(frozen=True)
class Hunk:
    old_start: int
    old_len: int
    new_start: int
    new_len: int
    # each entry keeps its ' ', '+' or '-' marker and its terminator
    lines: Tuple[str, ...] = ()

    def old_side(self) -> List[str]:
        return [line_text(l) for l in self.lines if l[0] in " -"]

    def new_side(self) -> List[str]:
        return [line_text(l) for l in self.lines if l[0] in " +"]

    def added(self) -> List[str]:
        return [line_text(l) for l in self.lines if l[0] == "+"]

    def removed(self) -> List[str]:
        return [line_text(l) for l in self.lines if l[0] == "-"]

    def removed_line_numbers(self) -> List[int]:
        """Old-file line numbers of the deleted lines."""
        numbers, current = [], self.old_start
        for l in self.lines:
            if l[0] == "-":
                numbers.append(current)
            if l[0] in " -":
                current += 1
        return numbers

    def added_line_numbers(self) -> List[int]:
        numbers, current = [], self.new_start
        for l in self.lines:
            if l[0] == "+":
                numbers.append(current)
            if l[0] in " +":
                current += 1
        return numbers

    def old_anchor(self) -> int:
        """Old-file line the hunk is anchored on when it deletes nothing."""
        removed = self.removed_line_numbers()
        if removed:
            return removed[0]
        offset = 0
        for l in self.lines:
            if l[0] == "+":
                break
            offset += 1
        return max(1, self.old_start + offset - 1)


@dataclass(frozen=True)
class FilePatch:
    old_path: str
    new_path: str
    hunks: Tuple[Hunk, ...] = field(default_factory=tuple)

    @property
    def path(self) -> str:
        return self.old_path if self.new_path == DEV_NULL else self.new_path


def _strip_prefix(raw: str) -> str:
    path = raw.split("\t", 1)[0].strip()
    if path != DEV_NULL and path[:2] in ("a/", "b/"):
        path = path[2:]
    return path


def parse_unified_diff(text: str) -> List[FilePatch]:
    """Parse (possibly multi-file, git-style) unified diff text into file patches."""
    patches: List[FilePatch] = []
    old_path: Optional[str] = None
    new_path: Optional[str] = None
    hunks: List[Hunk] = []
    current: Optional[dict] = None

    def close_hunk():
        nonlocal current
        if current is not None:
            hunks.append(Hunk(current["old_start"], current["old_len"], current["new_start"],
                              current["new_len"], tuple(current["lines"])))
            current = None

    def close_file():
        nonlocal hunks, old_path, new_path
        close_hunk()
        if new_path is not None:
            patches.append(FilePatch(old_path or new_path, new_path, tuple(hunks)))
        hunks, old_path, new_path = [], None, None

    for raw in keep_ends(text):
        if current is not None and current["remaining"] > 0 and raw[:1] in (" ", "+", "-", "\n", "\r"):
            line = raw if raw[:1] in (" ", "+", "-") else " " + raw
            current["lines"].append(line)
            if line[0] in " -":
                current["remaining_old"] -= 1
            if line[0] in " +":
                current["remaining_new"] -= 1
            current["remaining"] = max(current["remaining_old"], current["remaining_new"])
            continue
        if raw.startswith("\\"):
            if current is not None and current["lines"]:
                last = current["lines"][-1]
                current["lines"][-1] = last[:-1] if last.endswith("\n") else last
            continue
        if raw.startswith("diff --git "):
            close_file()
            continue
        if raw.startswith("--- "):
            close_file()
            old_path = _strip_prefix(raw[4:])
            continue
        if raw.startswith("+++ "):
            new_path = _strip_prefix(raw[4:])
            continue
        match = HUNK_HEADER.match(raw)
        if match:
            if new_path is None:
                raise PatchApplyError("hunk header before file header")
            close_hunk()
            old_len = int(match.group(2)) if match.group(2) is not None else 1
            new_len = int(match.group(4)) if match.group(4) is not None else 1
            current = {"old_start": int(match.group(1)), "old_len": old_len,
                       "new_start": int(match.group(3)), "new_len": new_len, "lines": [],
                       "remaining_old": old_len, "remaining_new": new_len,
                       "remaining": max(old_len, new_len)}
            continue
        # index lines, mode lines and anything else outside hunks
        close_hunk()
    close_file()
    return patches


def render_unified_diff(original: str, patched: str, path: str = "file", context_lines: int = 3) -> str:
    """Unified diff with ``a/`` and ``b/`` headers; empty when the texts are equal."""
    if original == patched:
        return ""
    out = []
    for line in difflib.unified_diff(keep_ends(original), keep_ends(patched),
                                     fromfile=f"a/{path}", tofile=f"b/{path}", n=context_lines):
        if line.endswith("\n"):
            out.append(line)
        else:
            out.append(line + "\n" + NO_NEWLINE + "\n")
    return "".join(out)


def apply_file_patch(original: str, patch: FilePatch) -> str:
    source = keep_ends(original)
    result: List[str] = []
    position = 0
    for hunk in patch.hunks:
        start = hunk.old_start if hunk.old_len == 0 else hunk.old_start - 1
        if start < position or start > len(source):
            raise PatchApplyError(f"{patch.path}: hunk at line {hunk.old_start} is out of range")
        result.extend(source[position:start])
        position = start
        for line in hunk.lines:
            marker, body = line[0], line[1:]
            if marker in " -":
                if position >= len(source) or source[position] != body:
                    raise PatchApplyError(
                        f"{patch.path}: context mismatch at line {position + 1}")
                if marker == " ":
                    result.append(body)
                position += 1
            else:
                result.append(body)
    result.extend(source[position:])
    return "".join(result)


def apply_unified_diff(original: str, diff_text: str) -> str:
    """Apply a single-file unified diff; an empty diff leaves the text unchanged."""
    patches = parse_unified_diff(diff_text)
    if not patches:
        return original
    if len(patches) > 1:
        raise PatchApplyError(f"expected a single-file diff, got {len(patches)} files")
    return apply_file_patch(original, patches[0])


def format_file_patch(patch: FilePatch) -> str:
    """Render a parsed file patch back to unified diff text."""
    old = patch.old_path if patch.old_path == DEV_NULL else f"a/{patch.old_path}"
    new = patch.new_path if patch.new_path == DEV_NULL else f"b/{patch.new_path}"
    out = [f"--- {old}\n", f"+++ {new}\n"]
    for hunk in patch.hunks:
        out.append(f"@@ -{hunk.old_start},{hunk.old_len} +{hunk.new_start},{hunk.new_len} @@\n")
        for line in hunk.lines:
            out.append(line if line.endswith("\n") else line + "\n" + NO_NEWLINE + "\n")
    return "".join(out)
