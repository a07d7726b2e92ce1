"""Function-level metainfo extraction for a C library source tree.

The scan produces a :class:`LibraryModel`: the public API surface (functions
declared in the configured public headers and not file-local), the typedefs
needed to normalize parameter and return types, the usage files that later
feed usage-example mining, and a static branch count per API body.
"""

from __future__ import annotations

import fnmatch
import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

from tree_sitter import Node

from . import _cparse as cp
from .errors import EmptyModelError, TypeNormalizationError

log = logging.getLogger(__name__)

SCHEMA = "masfuzz.model/1"
VARIADIC = "..."

_QUALIFIERS = {"const", "volatile"}
_IGNORED_QUALIFIERS = {"restrict", "__restrict", "__restrict__", "_Atomic", "inline", "extern", "static", "register"}
_PRIMITIVE_WORDS = {"signed", "unsigned", "short", "long", "int", "char", "float", "double", "void", "_Bool", "bool"}
_PRIMITIVE_NAMES = {
    "size_t", "ssize_t", "ptrdiff_t", "intptr_t", "uintptr_t", "intmax_t", "uintmax_t",
    "off_t", "off64_t", "wchar_t", "char16_t", "char32_t", "socklen_t", "time_t", "pid_t",
    "mode_t", "uid_t", "gid_t", "va_list", "__builtin_va_list",
}
_PRIMITIVE_RE = re.compile(r"^u?int(?:_fast|_least)?\d+_t$|^__u?int\d+_t$|^u_?int\d+_t$")
_TOKEN_RE = re.compile(r"<anon>|<fnptr>|\.\.\.|[A-Za-z_]\w*|\*|\[[^\]]*\]|\(|\)|,|\S")


@dataclass(frozen=True)
class NormalizedType:
    base: str
    pointer_depth: int = 0
    qualifiers: frozenset[str] = frozenset()
    is_primitive: bool = False

    def same_type(self, other: "NormalizedType") -> bool:
        """Equality ignoring qualifiers."""
        return self.base == other.base and self.pointer_depth == other.pointer_depth


@dataclass(frozen=True)
class _Typedef:
    target: str  # raw spelling of the aliased type
    kind: str  # "plain" | "struct" | "enum" | "fnptr"


@dataclass
class TypeTable:
    """Typedefs visible in the parsed headers."""

    typedefs: dict[str, _Typedef] = field(default_factory=dict)

    def add(self, name: str, target: str, kind: str = "plain") -> None:
        self.typedefs.setdefault(name, _Typedef(target, kind))

    def to_json(self) -> dict[str, Any]:
        return {k: {"target": v.target, "kind": v.kind} for k, v in sorted(self.typedefs.items())}

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "TypeTable":
        return cls({k: _Typedef(v["target"], v["kind"]) for k, v in data.items()})


def _canonical_primitive(words: list[str], raw: str) -> str:
    w = set(words)
    if len(words) != len(w) and words.count("long") != 2:
        raise TypeNormalizationError(raw)
    if "void" in w:
        if len(w) > 1:
            raise TypeNormalizationError(raw)
        return "void"
    if w & {"_Bool", "bool"}:
        return "_Bool"
    if "float" in w:
        return "float"
    if "double" in w:
        return "long double" if "long" in w else "double"
    if "char" in w:
        if "unsigned" in w:
            return "unsigned char"
        return "signed char" if "signed" in w else "char"
    sign = "unsigned " if "unsigned" in w else ""
    if words.count("long") == 2:
        size = "long long"
    elif "long" in w:
        size = "long"
    elif "short" in w:
        size = "short"
    else:
        size = "int"
    return sign + size


def _parse_spelling(raw: str) -> tuple[str, int, frozenset[str], str | None, bool]:
    """Split a type spelling into (base, explicit depth, qualifiers, tag kind,
    primitive) without consulting any typedef table."""
    tokens = _TOKEN_RE.findall(raw.strip())
    if not tokens:
        raise TypeNormalizationError(raw)
    if tokens == [VARIADIC]:
        return VARIADIC, 0, frozenset(), None, True
    if "(" in tokens or "<fnptr>" in tokens:
        return "<fnptr>", 1, frozenset(), None, True
    quals: set[str] = set()
    prim: list[str] = []
    base: str | None = None
    tag: str | None = None
    depth = 0
    expect_tag = False
    for tok in tokens:
        if expect_tag:
            if not (tok == "<anon>" or re.fullmatch(r"[A-Za-z_]\w*", tok)):
                raise TypeNormalizationError(raw)
            base, expect_tag = tok, False
        elif tok in _QUALIFIERS:
            quals.add(tok)
        elif tok in _IGNORED_QUALIFIERS:
            continue
        elif tok in ("struct", "union", "enum"):
            if base is not None or prim or tag is not None:
                raise TypeNormalizationError(raw)
            tag, expect_tag = tok, True
        elif tok in _PRIMITIVE_WORDS:
            if base is not None:
                raise TypeNormalizationError(raw)
            prim.append(tok)
        elif tok == "*" or tok.startswith("["):
            if base is None and not prim:
                raise TypeNormalizationError(raw)
            depth += 1
        elif re.fullmatch(r"[A-Za-z_]\w*", tok):
            if base is not None or prim:
                raise TypeNormalizationError(raw)
            base = tok
        else:
            raise TypeNormalizationError(raw)
    if expect_tag:
        raise TypeNormalizationError(raw)
    if prim:
        return _canonical_primitive(prim, raw), depth, frozenset(quals), None, True
    if base is None:
        raise TypeNormalizationError(raw)
    if tag == "enum":
        return base, depth, frozenset(quals), tag, True
    if tag is None and (base in _PRIMITIVE_NAMES or _PRIMITIVE_RE.match(base)):
        return base, depth, frozenset(quals), None, True
    return base, depth, frozenset(quals), tag, False


def normalize_type(raw: str, types: TypeTable | None = None) -> NormalizedType:
    """Normalize a C type spelling.

    Qualifiers are collected into a set, stars and array brackets count as
    pointer levels, and typedef chains visible in ``types`` are followed.  A
    typedef of ``void *`` is kept as an opaque handle named by the typedef;
    struct typedefs resolve to the struct tag (or the typedef name when the
    struct is anonymous); enum typedefs are integral and hence primitive.
    """
    base, depth, quals, tag, prim = _parse_spelling(raw)
    if tag is not None or prim or types is None:
        return NormalizedType(base, depth, quals, prim)
    seen: set[str] = set()
    while base in types.typedefs and base not in seen:
        seen.add(base)
        entry = types.typedefs[base]
        if entry.kind == "fnptr":
            return NormalizedType(base, depth, quals, True)
        if entry.kind == "enum":
            return NormalizedType(base, depth, quals, True)
        t_base, t_depth, t_quals, t_tag, t_prim = _parse_spelling(entry.target)
        if t_tag == "enum":
            return NormalizedType(base, depth, quals, True)
        if t_tag is not None:
            name = base if t_base == "<anon>" else t_base
            return NormalizedType(name, depth + t_depth, quals | t_quals, False)
        if t_prim:
            if t_base == "void" and t_depth > 0:
                return NormalizedType(base, depth + t_depth, quals | t_quals, False)
            return NormalizedType(t_base, depth + t_depth, quals | t_quals, True)
        base, depth, quals = t_base, depth + t_depth, quals | t_quals
    return NormalizedType(base, depth, quals, False)


def _inherent_depth(name: str, types: TypeTable) -> int:
    """Pointer levels a typedef name contributes by itself."""
    total = 0
    seen: set[str] = set()
    while name in types.typedefs and name not in seen:
        seen.add(name)
        entry = types.typedefs[name]
        if entry.kind in ("fnptr", "enum"):
            return total
        t_base, t_depth, _, t_tag, _ = _parse_spelling(entry.target)
        total += t_depth
        if t_tag is not None or t_base in _PRIMITIVE_WORDS or t_base == "void":
            return total
        name = t_base
    return total


def render_type(t: NormalizedType, types: TypeTable | None = None) -> str:
    """Spell a normalized type so that normalizing the spelling gives ``t`` back."""
    quals = " ".join(sorted(t.qualifiers))
    depth = t.pointer_depth
    if t.base == VARIADIC:
        return VARIADIC
    if t.base == "<fnptr>":
        return "<fnptr>"
    if types is not None and t.base in types.typedefs:
        depth -= _inherent_depth(t.base, types)
        head = t.base
    elif t.is_primitive:
        head = t.base
    else:
        head = f"struct {t.base}"
    spelled = f"{quals} {head}".strip()
    return spelled + (" " + "*" * depth if depth > 0 else "")


class BranchCount(int):
    """Static branch count; ``declaration_only`` is set when there was no body."""

    declaration_only: bool

    def __new__(cls, value: int, declaration_only: bool = False):
        obj = super().__new__(cls, value)
        obj.declaration_only = declaration_only
        return obj


@dataclass(frozen=True)
class Param:
    name: str
    type: str


@dataclass(frozen=True)
class ApiMetainfo:
    name: str
    params: tuple[Param, ...]
    return_type: str
    file: str
    line: int
    doc: str | None = None
    body: str | None = None
    is_public: bool = True
    end_line: int | None = None
    needs_oracle: bool = False

    @property
    def declaration_only(self) -> bool:
        return self.body is None

    @property
    def is_variadic(self) -> bool:
        return any(p.type == VARIADIC for p in self.params)

    @property
    def signature(self) -> str:
        args = ", ".join(p.type if p.type == VARIADIC else f"{p.type} {p.name}" for p in self.params)
        return f"{self.return_type} {self.name}({args or 'void'})"

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["params"] = [[p.name, p.type] for p in self.params]
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "ApiMetainfo":
        d = dict(d)
        d["params"] = tuple(Param(n, t) for n, t in d["params"])
        return cls(**d)


def count_branches(api: ApiMetainfo) -> BranchCount:
    """Count outgoing conditional edges in an API body.

    if/while/do/conditional for-loops, ternaries and each ``&&``/``||``
    contribute two edges; a switch contributes one edge per ``case`` label
    plus one for the default path (explicit or implicit).
    """
    if api.body is None:
        return BranchCount(0, declaration_only=True)
    root = cp.parse(b"void __masfuzz_probe(void)\n" + api.body.encode())
    return BranchCount(_count_edges(root))


def _count_edges(root: Node) -> int:
    n = 0
    for node in cp.walk(root):
        t = node.type
        if t in ("if_statement", "while_statement", "do_statement", "conditional_expression"):
            n += 2
        elif t == "for_statement":
            if node.child_by_field_name("condition") is not None:
                n += 2
        elif t == "binary_expression":
            op = node.child_by_field_name("operator")
            if op is not None and op.type in ("&&", "||"):
                n += 2
        elif t == "switch_statement":
            body = node.child_by_field_name("body")
            cases = [c for c in (body.named_children if body else []) if c.type == "case_statement"]
            has_default = any(c.children and c.children[0].type == "default" for c in cases)
            n += len(cases) + (0 if has_default else 1)
    return n


@dataclass
class ScanConfig:
    """Glob patterns are fnmatch-style over root-relative POSIX paths
    (``*`` crosses directory separators)."""

    public_headers: list[str] = field(default_factory=lambda: ["include/*.h"])
    usage_dirs: list[str] = field(
        default_factory=lambda: ["examples/*", "example/*", "tests/*", "test/*", "fuzz/*"]
    )
    exclude: list[str] = field(default_factory=list)
    macros: list[str] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> "ScanConfig":
        return cls(**(d or {}))


@dataclass
class LibraryModel:
    apis: list[ApiMetainfo]
    headers: list[str]
    usage_files: list[str]
    branch_totals: dict[str, int]
    types: TypeTable = field(default_factory=TypeTable)
    library_files: list[str] = field(default_factory=list)
    root: str = ""

    def __post_init__(self) -> None:
        self._by_name = {a.name: a for a in self.apis}

    def api(self, name: str) -> ApiMetainfo:
        return self._by_name[name]

    def __contains__(self, name: object) -> bool:
        return name in self._by_name

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.apis]

    def normalize(self, raw: str) -> NormalizedType:
        return normalize_type(raw, self.types)

    def return_type_of(self, name: str) -> NormalizedType:
        return self.normalize(self._by_name[name].return_type)

    def param_types_of(self, name: str) -> list[NormalizedType]:
        out = []
        for p in self._by_name[name].params:
            try:
                out.append(self.normalize(p.type))
            except TypeNormalizationError:
                log.debug("skipping unparsable parameter type %r of %s", p.type, name)
        return out

    def to_json(self) -> dict[str, Any]:
        return {
            "schema": SCHEMA,
            "apis": [a.to_json() for a in self.apis],
            "headers": self.headers,
            "usage_files": self.usage_files,
            "library_files": self.library_files,
            "branch_totals": dict(sorted(self.branch_totals.items())),
            "typedefs": self.types.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict[str, Any], root: str = "") -> "LibraryModel":
        if d.get("schema") != SCHEMA:
            raise ValueError(f"not a library model document (schema {d.get('schema')!r})")
        return cls(
            apis=[ApiMetainfo.from_json(a) for a in d["apis"]],
            headers=list(d["headers"]),
            usage_files=list(d["usage_files"]),
            branch_totals=dict(d["branch_totals"]),
            types=TypeTable.from_json(d.get("typedefs", {})),
            library_files=list(d.get("library_files", [])),
            root=root,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path, root: str = "") -> "LibraryModel":
        return cls.from_json(json.loads(Path(path).read_text()), root=root)


def _matches(rel: str, patterns: Iterable[str]) -> bool:
    return any(fnmatch.fnmatchcase(rel, p) for p in patterns)


def _list_sources(root: Path, exclude: list[str]) -> list[str]:
    out = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for fn in sorted(filenames):
            if not fn.endswith((".c", ".h")):
                continue
            rel = (Path(dirpath) / fn).relative_to(root).as_posix()
            if not _matches(rel, exclude):
                out.append(rel)
    return sorted(out)


@dataclass
class _Decl:
    name: str
    params: tuple[Param, ...]
    return_type: str
    file: str
    line: int
    doc: str | None
    needs_oracle: bool
    static: bool


def _param_list(fdecl: Node) -> tuple[tuple[Param, ...], bool]:
    params: list[Param] = []
    plist = fdecl.child_by_field_name("parameters")
    if plist is None:
        return (), True
    bad = plist.has_error
    for i, p in enumerate(plist.named_children):
        if p.type == "variadic_parameter":
            params.append(Param(VARIADIC, VARIADIC))
            continue
        if p.type != "parameter_declaration":
            continue
        decl = p.child_by_field_name("declarator")
        base = cp.type_spelling(p)
        depth, fnptr = cp.declarator_shape(decl)
        if base == "void" and decl is None:
            continue  # (void)
        if not base:
            bad = True
            continue
        spelled = "<fnptr>" if fnptr else base + (" " + "*" * depth if depth else "")
        params.append(Param(cp.declarator_name(decl) or f"arg{i}", spelled))
    return tuple(params), bad


def _function_decl(item: Node, rel: str) -> _Decl | None:
    if item.type not in ("declaration", "function_definition"):
        return None
    declarator = item.child_by_field_name("declarator")
    fdecl, ret_depth = cp.find_function_declarator(declarator) if declarator is not None else (None, 0)
    if fdecl is None:
        return None
    name = cp.declarator_name(fdecl.child_by_field_name("declarator"))
    if not name:
        return None
    base = cp.type_spelling(item)
    params, bad = _param_list(fdecl)
    needs_oracle = bad or item.has_error or not base
    ret = base + (" " + "*" * ret_depth if ret_depth else "") if base else "<unknown>"
    if needs_oracle:
        params = ()
    return _Decl(
        name=name,
        params=params,
        return_type=ret,
        file=rel,
        line=item.start_point[0] + 1,
        doc=cp.leading_comment(item),
        needs_oracle=needs_oracle,
        static="static" in cp.storage_classes(item),
    )


def _collect_typedefs(root_node: Node, table: TypeTable) -> None:
    for item in cp.walk(root_node):
        if item.type != "type_definition":
            continue
        type_node = item.child_by_field_name("type")
        spelled = cp.type_spelling(item)
        kind = "plain"
        if type_node is not None and type_node.type in ("struct_specifier", "union_specifier"):
            kind = "struct"
        elif type_node is not None and type_node.type == "enum_specifier":
            kind = "enum"
        for decl in item.children_by_field_name("declarator"):
            depth, fnptr = cp.declarator_shape(decl)
            name = cp.declarator_name(decl)
            if not name:
                continue
            if fnptr:
                table.add(name, "<fnptr>", "fnptr")
            elif spelled:
                table.add(name, spelled + (" " + "*" * depth if depth else ""), kind)


def _has_entry_point(root_node: Node) -> bool:
    for item in cp.top_level(root_node):
        if item.type == "function_definition":
            d = _function_decl(item, "")
            if d is not None and d.name in ("main", "LLVMFuzzerTestOneInput"):
                return True
    return False


def scan_library(root: str | Path, config: ScanConfig | None = None) -> LibraryModel:
    """Parse a library source tree into a :class:`LibraryModel`.

    Raises ``NotADirectoryError``/``FileNotFoundError`` for an unreadable root
    and :class:`EmptyModelError` when no public API is found.
    """
    config = config or ScanConfig()
    rootp = Path(root)
    if not rootp.exists():
        raise FileNotFoundError(str(root))
    if not rootp.is_dir():
        raise NotADirectoryError(str(root))
    if not os.access(rootp, os.R_OK | os.X_OK):
        raise PermissionError(str(root))

    files = _list_sources(rootp, config.exclude)
    macros = tuple(config.macros)
    trees: dict[str, Node] = {}
    for rel in files:
        try:
            trees[rel] = cp.parse((rootp / rel).read_bytes(), macros)
        except OSError as exc:
            log.warning("cannot read %s: %s", rel, exc)

    types = TypeTable()
    for rel in files:
        if rel.endswith(".h") and rel in trees:
            _collect_typedefs(trees[rel], types)

    headers = [f for f in files if f.endswith(".h") and _matches(f, config.public_headers)]
    usage = [
        f for f in files
        if f.endswith(".c") and f in trees
        and (_matches(f, config.usage_dirs) or _has_entry_point(trees[f]))
    ]
    impl = [f for f in files if f.endswith(".c") and f not in usage]

    declared: dict[str, _Decl] = {}
    for rel in headers:
        for item in cp.top_level(trees[rel]):
            d = _function_decl(item, rel)
            if d is None or d.static or d.name in declared:
                continue
            declared[d.name] = d

    # Bodies: public header inline definitions first, then implementation files.
    bodies: dict[str, tuple[str, int, int, str, str | None]] = {}
    for rel in headers + impl:
        for item in cp.top_level(trees[rel]):
            if item.type != "function_definition":
                continue
            d = _function_decl(item, rel)
            if d is None or d.static or d.name not in declared or d.name in bodies:
                continue
            body = item.child_by_field_name("body")
            bodies[d.name] = (
                rel, item.start_point[0] + 1, item.end_point[0] + 1, cp.text(body), d.doc,
            )

    apis: list[ApiMetainfo] = []
    for name, d in declared.items():
        if name in bodies:
            file, line, end, body, def_doc = bodies[name]
        else:
            file, line, end, body, def_doc = d.file, d.line, d.line, None, None
        apis.append(ApiMetainfo(
            name=name,
            params=d.params,
            return_type=d.return_type,
            file=file,
            line=line,
            doc=d.doc or def_doc,
            body=body,
            is_public=True,
            end_line=end,
            needs_oracle=d.needs_oracle,
        ))
    if not apis:
        raise EmptyModelError(f"no public API found under {root} (headers: {config.public_headers})")
    apis.sort(key=lambda a: (a.file, a.line, a.name))
    totals = {a.name: int(count_branches(a)) for a in apis}
    return LibraryModel(
        apis=apis,
        headers=headers,
        usage_files=usage,
        branch_totals=totals,
        types=types,
        library_files=impl,
        root=str(rootp),
    )
