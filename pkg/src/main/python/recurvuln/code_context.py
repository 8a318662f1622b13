"""
C repository indexing and context retrieval.

Builds a syntactic symbol table of top-level function and structure definitions
with tree-sitter, and serves the lookups the agents use as tools: function and
structure definitions in the source and target repositories plus a line search.
No macro expansion, type resolution or call graph.
"""
from __future__ import annotations

import logging
import os
import re
import threading
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Literal, Optional, Tuple

import tree_sitter_c
from pydantic import BaseModel, ConfigDict
from tree_sitter import Language, Node, Parser

from .errors import InvalidPatternError
from .llm_gateway import Tool, ToolSchema, Toolbox

logger = logging.getLogger(__name__)

C_LANGUAGE = Language(tree_sitter_c.language())
C_EXTENSIONS = {".c", ".h"}
SKIPPED_DIRS = {".git", ".hg", ".svn", "__pycache__", "node_modules", ".idea", ".vscode"}
MISSING_MARKER = "MISSING:"

RepoLabel = Literal["source", "target"]

_PREPROC_CONTAINERS = {
    "preproc_ifdef", "preproc_if", "preproc_elif", "preproc_else", "preproc_elifdef",
}
_RECORD_SPECIFIERS = {"struct_specifier", "union_specifier"}

_local = threading.local()


def _parser() -> Parser:
    # Parser objects are not shareable across threads
    parser = getattr(_local, "parser", None)
    if parser is None:
        parser = Parser(C_LANGUAGE)
        _local.parser = parser
    return parser


# -- text helpers ---------------------------------------------------------


def decode_source(raw: bytes) -> str:
    """Decode C source bytes; invalid UTF-8 bytes survive as surrogates and re-encode unchanged."""
    return raw.decode("utf-8", errors="surrogateescape")


def encode_source(text: str) -> bytes:
    return text.encode("utf-8", errors="surrogateescape")


def split_lines(text: str) -> List[str]:
    """Split on ``\\n`` only, so numbering agrees with the parser's rows."""
    return [line[:-1] if line.endswith("\r") else line for line in text.split("\n")]


def extract_span(text: str, start: int, end: int) -> str:
    return "\n".join(split_lines(text)[start - 1:end])


def strip_comments(text: str) -> str:
    """
    Remove block and line comments, keeping string and character literals intact.

    Block comments become a single space plus the newlines they spanned, so line
    numbers are preserved.
    """
    out: List[str] = []
    i, n = 0, len(text)
    quote: Optional[str] = None
    while i < n:
        c = text[i]
        if quote:
            out.append(c)
            if c == "\\" and i + 1 < n:
                out.append(text[i + 1])
                i += 2
                continue
            if c == quote or c == "\n":
                quote = None
            i += 1
            continue
        if c == "/" and i + 1 < n and text[i + 1] == "*":
            end = text.find("*/", i + 2)
            end = n if end < 0 else end + 2
            out.append(" " + "\n" * text.count("\n", i, end))
            i = end
            continue
        if c == "/" and i + 1 < n and text[i + 1] == "/":
            end = text.find("\n", i)
            i = n if end < 0 else end
            continue
        if c in "\"'":
            quote = c
        out.append(c)
        i += 1
    return "".join(out)


def normalize_code(text: str) -> str:
    """Comment-free text with whitespace runs collapsed, lines trimmed and blank lines dropped."""
    lines = (re.sub(r"\s+", " ", line).strip() for line in split_lines(strip_comments(text)))
    return "\n".join(line for line in lines if line)


# -- domain types ---------------------------------------------------------


class LineSpan(BaseModel):
    model_config = ConfigDict(frozen=True)

    start: int
    end: int

    def contains(self, line: int) -> bool:
        return self.start <= line <= self.end


class Parameter(BaseModel):
    model_config = ConfigDict(frozen=True)

    type_text: str
    name: str = ""


class FunctionDef(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    return_type: str
    parameters: Tuple[Parameter, ...] = ()
    body_source: str
    file_path: str
    line_span: LineSpan

    def signature(self) -> str:
        params = ", ".join(p.type_text for p in self.parameters)
        return f"{self.return_type} {self.name}({params})"


class StructDef(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    fields_source: str
    file_path: str
    line_span: LineSpan


class DefinitionLocation(BaseModel):
    model_config = ConfigDict(frozen=True)

    file_path: str
    kind: Literal["function", "struct"]
    line_span: LineSpan


class FunctionComparison(BaseModel):
    model_config = ConfigDict(frozen=True)

    verdict: Literal["Identical", "SignatureDiff", "BodyDiff", "MissingInTarget", "MissingInSource"]
    detail: str = ""


class SearchHit(BaseModel):
    model_config = ConfigDict(frozen=True)

    file_path: str
    line_no: int
    line_text: str


# -- tree-sitter extraction -----------------------------------------------


def _text(node: Node, source: bytes) -> str:
    return decode_source(source[node.start_byte:node.end_byte])


def _span(node: Node) -> LineSpan:
    return LineSpan(start=node.start_point[0] + 1, end=node.end_point[0] + 1)


def _function_declarator(declarator: Optional[Node]) -> Optional[Node]:
    node = declarator
    while node is not None and node.type in ("pointer_declarator", "attributed_declarator"):
        node = node.child_by_field_name("declarator")
    if node is not None and node.type == "function_declarator":
        return node
    return None


def _declared_identifier(declarator: Optional[Node]) -> Optional[Node]:
    node = declarator
    while node is not None and node.type not in ("identifier", "type_identifier", "field_identifier"):
        inner = node.child_by_field_name("declarator")
        if inner is None:
            return None
        node = inner
    return node


def _parameters(function_declarator: Node, source: bytes) -> Tuple[Parameter, ...]:
    params: List[Parameter] = []
    plist = function_declarator.child_by_field_name("parameters")
    if plist is None:
        return ()
    for child in plist.named_children:
        if child.type == "variadic_parameter":
            params.append(Parameter(type_text="..."))
            continue
        if child.type != "parameter_declaration":
            continue
        ident = _declared_identifier(child.child_by_field_name("declarator"))
        text = _text(child, source)
        name = ""
        if ident is not None:
            name = _text(ident, source)
            offset = ident.start_byte - child.start_byte
            raw = source[child.start_byte:child.end_byte]
            text = decode_source(raw[:offset] + raw[offset + (ident.end_byte - ident.start_byte):])
        params.append(Parameter(type_text=re.sub(r"\s+", " ", text).strip(), name=name))
    return tuple(params)


def _return_type(node: Node, declarator: Node, source: bytes) -> str:
    parts = [
        _text(child, source)
        for child in node.children
        if child.end_byte <= declarator.start_byte
        and child.type not in ("storage_class_specifier", "comment", "attribute_specifier", "ms_declspec_modifier")
    ]
    stars = ""
    current = declarator
    while current is not None and current.type == "pointer_declarator":
        stars += "*"
        current = current.child_by_field_name("declarator")
    text = " ".join(parts) + (f" {stars}" if stars else "")
    return re.sub(r"\s+", " ", text).strip()


def _function_from_node(node: Node, source: bytes, text: str, file_path: str) -> Optional[FunctionDef]:
    declarator = node.child_by_field_name("declarator")
    fdecl = _function_declarator(declarator)
    if fdecl is None:
        return None
    ident = fdecl.child_by_field_name("declarator")
    if ident is None or ident.type != "identifier":
        return None
    span = _span(node)
    return FunctionDef(
        name=_text(ident, source),
        return_type=_return_type(node, declarator, source),
        parameters=_parameters(fdecl, source),
        body_source=extract_span(text, span.start, span.end),
        file_path=file_path,
        line_span=span,
    )


def _record_defs(node: Node, holder: Node, source: bytes, text: str, file_path: str,
                 typedef_names: Iterable[str] = ()) -> List[StructDef]:
    """Structure definitions for one struct/union specifier; ``holder`` sets the span."""
    if node.child_by_field_name("body") is None:
        return []
    names = []
    tag = node.child_by_field_name("name")
    if tag is not None:
        names.append(_text(tag, source))
    names.extend(typedef_names)
    span = _span(holder)
    body = extract_span(text, span.start, span.end)
    return [StructDef(name=name, fields_source=body, file_path=file_path, line_span=span) for name in names]


def parse_definitions(text: str, file_path: str) -> Tuple[List[FunctionDef], List[StructDef], bool]:
    """
    Extract top-level function and structure definitions from one C file.

    Returns (functions, structs, had_errors). Definitions whose own subtree holds a
    parse error are skipped; the rest of the file is still indexed.
    """
    source = encode_source(text)
    tree = _parser().parse(source)
    functions: List[FunctionDef] = []
    structs: List[StructDef] = []

    def visit(container: Node) -> None:
        for node in container.children:
            if node.type in _PREPROC_CONTAINERS:
                visit(node)
            elif node.has_error:
                continue
            elif node.type == "function_definition":
                found = _function_from_node(node, source, text, file_path)
                if found is not None:
                    functions.append(found)
            elif node.type in _RECORD_SPECIFIERS:
                structs.extend(_record_defs(node, node, source, text, file_path))
            elif node.type == "declaration":
                spec = node.child_by_field_name("type")
                if spec is not None and spec.type in _RECORD_SPECIFIERS:
                    structs.extend(_record_defs(spec, node, source, text, file_path))
            elif node.type == "type_definition":
                spec = node.child_by_field_name("type")
                if spec is not None and spec.type in _RECORD_SPECIFIERS:
                    aliases = []
                    for child in node.children_by_field_name("declarator"):
                        ident = _declared_identifier(child)
                        if ident is not None:
                            aliases.append(_text(ident, source))
                    structs.extend(_record_defs(spec, node, source, text, file_path, aliases))

    visit(tree.root_node)
    return functions, structs, tree.root_node.has_error


def parse_single_function(source_text: str) -> FunctionDef:
    """Parse text that must hold exactly one well-formed function definition."""
    source = encode_source(source_text)
    root = _parser().parse(source).root_node
    if root.has_error:
        raise ValueError("source does not parse as C")
    items = [child for child in root.named_children if child.type != "comment"]
    if len(items) != 1 or items[0].type != "function_definition":
        raise ValueError(f"expected exactly one function definition, found {[i.type for i in items]}")
    found = _function_from_node(items[0], source, source_text, "<snippet>")
    if found is None:
        raise ValueError("function definition has no plain identifier declarator")
    return found


# -- repository index -----------------------------------------------------


class _FileEntry:
    __slots__ = ("text", "functions", "structs", "stamp")

    def __init__(self, text: str, functions: List[FunctionDef], structs: List[StructDef], stamp):
        self.text = text
        self.functions = functions
        self.structs = structs
        self.stamp = stamp


class RepoIndex:
    """Immutable symbol table over the C files of one repository snapshot."""

    def __init__(self, repo_root: Optional[Path], repo_label: RepoLabel, entries: Dict[str, _FileEntry],
                 parse_warnings: Iterable[str] = ()):
        self.repo_root = repo_root
        self.repo_label = repo_label
        self._entries = dict(sorted(entries.items()))
        self.parse_warnings = tuple(parse_warnings)
        self._functions: Dict[str, List[FunctionDef]] = {}
        self._structs: Dict[str, List[StructDef]] = {}
        for entry in self._entries.values():
            for fn in entry.functions:
                self._functions.setdefault(fn.name, []).append(fn)
            for st in entry.structs:
                self._structs.setdefault(st.name, []).append(st)

    @classmethod
    def from_sources(cls, repo_label: RepoLabel, files: Dict[str, str]) -> "RepoIndex":
        """Index in-memory file contents (no backing directory)."""
        entries, warnings = {}, []
        for path, text in files.items():
            functions, structs, had_errors = parse_definitions(text, path)
            if had_errors:
                warnings.append(path)
            entries[path] = _FileEntry(text, functions, structs, None)
        return cls(None, repo_label, entries, warnings)

    @property
    def files(self) -> List[str]:
        return list(self._entries)

    @property
    def symbol_table(self) -> Dict[str, List[DefinitionLocation]]:
        table: Dict[str, List[DefinitionLocation]] = {}
        for name, defs in self._functions.items():
            table.setdefault(name, []).extend(
                DefinitionLocation(file_path=d.file_path, kind="function", line_span=d.line_span) for d in defs)
        for name, defs in self._structs.items():
            table.setdefault(name, []).extend(
                DefinitionLocation(file_path=d.file_path, kind="struct", line_span=d.line_span) for d in defs)
        return dict(sorted(table.items()))

    def file_text(self, file_path: str) -> str:
        return self._entries[file_path].text

    def has_file(self, file_path: str) -> bool:
        return file_path in self._entries

    def functions(self) -> Iterator[FunctionDef]:
        for entry in self._entries.values():
            yield from entry.functions

    def functions_in(self, file_path: str) -> List[FunctionDef]:
        entry = self._entries.get(file_path)
        return list(entry.functions) if entry else []

    def function_named(self, name: str) -> List[FunctionDef]:
        return list(self._functions.get(name, ()))

    def struct_named(self, name: str) -> List[StructDef]:
        return list(self._structs.get(name, ()))

    def enclosing_function(self, file_path: str, line: int) -> Optional[FunctionDef]:
        for fn in self.functions_in(file_path):
            if fn.line_span.contains(line):
                return fn
        return None

    def is_stale(self) -> bool:
        """True when the directory no longer matches what was indexed."""
        if self.repo_root is None:
            return False
        current = dict(_discover(self.repo_root))
        if set(current) != set(self._entries):
            return True
        return any(_stamp(path) != self._entries[rel].stamp for rel, path in current.items())

    def refreshed(self) -> "RepoIndex":
        if self.is_stale():
            logger.info(f"Re-indexing stale {self.repo_label} repository {self.repo_root}")
            return build_index(self.repo_root, self.repo_label)
        return self


def _stamp(path: Path):
    stat = path.stat()
    return stat.st_mtime_ns, stat.st_size


def _discover(root: Path) -> Iterator[Tuple[str, Path]]:
    for current, dirs, filenames in os.walk(root):
        dirs[:] = sorted(d for d in dirs if d not in SKIPPED_DIRS)
        for filename in sorted(filenames):
            if os.path.splitext(filename)[1].lower() in C_EXTENSIONS:
                full = Path(current) / filename
                yield full.relative_to(root).as_posix(), full


def build_index(repo_root, repo_label: RepoLabel, only: Optional[Iterable[str]] = None) -> RepoIndex:
    """Index every .c/.h file under ``repo_root`` (or just the ``only`` relative paths)."""
    root = Path(repo_root)
    if not root.is_dir():
        raise FileNotFoundError(f"Repository root {root} does not exist")
    wanted = set(only) if only is not None else None
    entries: Dict[str, _FileEntry] = {}
    warnings: List[str] = []
    for rel, full in _discover(root):
        if wanted is not None and rel not in wanted:
            continue
        text = decode_source(full.read_bytes())
        try:
            functions, structs, had_errors = parse_definitions(text, rel)
        except Exception as e:
            logger.warning(f"Cannot parse {rel}; indexed for text search only: {str(e)}")
            functions, structs, had_errors = [], [], True
        if had_errors:
            logger.warning(f"Parse errors in {rel}; malformed definitions skipped")
            warnings.append(rel)
        entries[rel] = _FileEntry(text, functions, structs, _stamp(full))
    logger.info(f"Indexed {len(entries)} files of {repo_label} repository {root}")
    return RepoIndex(root, repo_label, entries, warnings)


# -- lookups --------------------------------------------------------------


def find_function_definition(index: RepoIndex, name: str) -> List[FunctionDef]:
    return index.function_named(name)


def find_struct_definition(index: RepoIndex, name: str) -> List[StructDef]:
    return index.struct_named(name)


def _pick_pair(source_defs: List[FunctionDef], target_defs: List[FunctionDef]) -> Tuple[FunctionDef, FunctionDef, str]:
    target_by_path = {d.file_path: d for d in target_defs}
    for candidate in source_defs:
        if candidate.file_path in target_by_path:
            note = ""
            if len(source_defs) > 1 or len(target_defs) > 1:
                note = f"multiple definitions; compared the pair in {candidate.file_path}"
            return candidate, target_by_path[candidate.file_path], note
    key = lambda d: (d.file_path, d.line_span.start)
    src, tgt = min(source_defs, key=key), min(target_defs, key=key)
    note = ""
    if len(source_defs) > 1 or len(target_defs) > 1:
        note = f"multiple definitions; compared {src.file_path} with {tgt.file_path}"
    return src, tgt, note


def _join(*parts: str) -> str:
    return "; ".join(p for p in parts if p)


def compare_function(name: str, source_index: RepoIndex, target_index: RepoIndex) -> FunctionComparison:
    source_defs = source_index.function_named(name)
    target_defs = target_index.function_named(name)
    if not target_defs:
        where = "defined in neither repository" if not source_defs else "absent from the target repository"
        return FunctionComparison(verdict="MissingInTarget", detail=f"{name} is {where}")
    if not source_defs:
        return FunctionComparison(verdict="MissingInSource", detail=f"{name} is absent from the source repository")
    src, tgt, note = _pick_pair(source_defs, target_defs)
    if normalize_code(src.body_source) == normalize_code(tgt.body_source):
        return FunctionComparison(verdict="Identical", detail=note)
    differences = []
    if src.return_type != tgt.return_type:
        differences.append(f"the return type differs: {src.return_type} in source vs {tgt.return_type} in target")
    src_params = [p.type_text for p in src.parameters]
    tgt_params = [p.type_text for p in tgt.parameters]
    if src_params != tgt_params:
        differences.append(
            f"the parameter lists differ: ({', '.join(src_params)}) in source vs ({', '.join(tgt_params)}) in target")
    if differences:
        return FunctionComparison(verdict="SignatureDiff", detail=_join(*differences, note))
    return FunctionComparison(verdict="BodyDiff", detail=_join("signatures match but bodies differ", note))


def text_search(index: RepoIndex, pattern: str, literal: bool = False) -> List[SearchHit]:
    try:
        regex = re.compile(re.escape(pattern) if literal else pattern)
    except re.error as e:
        raise InvalidPatternError(f"Invalid search pattern '{pattern}': {str(e)}") from e
    hits = []
    for path in index.files:
        for number, line in enumerate(split_lines(index.file_text(path)), start=1):
            if regex.search(line):
                hits.append(SearchHit(file_path=path, line_no=number, line_text=line))
    return hits


# -- agent tools ----------------------------------------------------------


def format_function(defn: FunctionDef) -> str:
    return f"// {defn.file_path}:{defn.line_span.start}-{defn.line_span.end}\n{defn.body_source}"


def format_struct(defn: StructDef) -> str:
    return f"// {defn.file_path}:{defn.line_span.start}-{defn.line_span.end}\n{defn.fields_source}"


MAX_SEARCH_HITS = 50


def context_toolbox(source_index: RepoIndex, target_index: RepoIndex) -> Toolbox:
    """The four definition lookups plus text search, keyed by tool name."""
    indexes = {"source": source_index, "target": target_index}

    def function_tool(label: str) -> Tool:
        index = indexes[label]

        def handler(args: Dict[str, str]) -> str:
            name = args.get("name", "").strip()
            found = find_function_definition(index, name)
            if not found:
                return f"{MISSING_MARKER} no function named {name} in the {label} repository"
            return "\n\n".join(format_function(d) for d in found)

        schema = ToolSchema(
            name=f"find_function_in_{label}",
            description=f"Return the definition(s) of a C function in the {label} repository.",
            parameters={"name": "function name"},
        )
        return Tool(schema, handler)

    def struct_tool(label: str) -> Tool:
        index = indexes[label]

        def handler(args: Dict[str, str]) -> str:
            name = args.get("name", "").strip()
            found = find_struct_definition(index, name)
            if not found:
                return f"{MISSING_MARKER} no structure named {name} in the {label} repository"
            return "\n\n".join(format_struct(d) for d in found)

        schema = ToolSchema(
            name=f"find_struct_in_{label}",
            description=f"Return the definition(s) of a C structure (tag or typedef name) in the {label} repository.",
            parameters={"name": "structure name"},
        )
        return Tool(schema, handler)

    def search_handler(args: Dict[str, str]) -> str:
        repo = args.get("repo", "target").strip() or "target"
        if repo not in indexes:
            raise ValueError(f"repo must be 'source' or 'target', got '{repo}'")
        hits = text_search(indexes[repo], args.get("pattern", ""))
        if not hits:
            return f"{MISSING_MARKER} no lines match in the {repo} repository"
        shown = [f"{h.file_path}:{h.line_no}: {h.line_text}" for h in hits[:MAX_SEARCH_HITS]]
        if len(hits) > MAX_SEARCH_HITS:
            shown.append(f"... {len(hits) - MAX_SEARCH_HITS} more matches")
        return "\n".join(shown)

    tools = [function_tool("source"), function_tool("target"), struct_tool("source"), struct_tool("target"),
             Tool(ToolSchema(name="text_search",
                             description="Search lines matching a regular expression in the source or target repository.",
                             parameters={"pattern": "regular expression", "repo": "'source' or 'target'"}),
                  search_handler)]
    return {tool.schema.name: tool for tool in tools}
