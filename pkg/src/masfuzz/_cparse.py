"""Thin helpers over the tree-sitter C grammar."""

from __future__ import annotations

import re
from functools import lru_cache
from typing import Iterator

import tree_sitter_c
from tree_sitter import Language, Node, Parser

# Export/visibility macros that precede a declaration, e.g. ``PLIST_API`` or
# ``LXW_EXPORT``.  Blanked out (same length) so byte offsets and lines survive.
_EXPORT_MACRO = re.compile(
    rb"\b[A-Z][A-Z0-9_]*_(?:API|EXPORT|EXTERN|PUBLIC_API|DECL|DLL|CALL)\b(?!\s*\()"
)
_EXTRA_BLANKS = (rb"__declspec\s*\(\s*\w+\s*\)", rb"\bWINAPI\b", rb"\b__cdecl\b")


@lru_cache(maxsize=1)
def _language() -> Language:
    return Language(tree_sitter_c.language())


def parser() -> Parser:
    return Parser(_language())


def _blank(match: re.Match) -> bytes:
    return b" " * (match.end() - match.start())


def preprocess(src: bytes, extra_macros: tuple[str, ...] = ()) -> bytes:
    """Blank out attribute-like macros the grammar cannot see through."""
    out = _EXPORT_MACRO.sub(_blank, src)
    for pat in _EXTRA_BLANKS:
        out = re.sub(pat, _blank, out)
    for name in extra_macros:
        out = re.sub(rb"\b" + re.escape(name.encode()) + rb"\b", _blank, out)
    return out


def parse(src: bytes, extra_macros: tuple[str, ...] = ()) -> Node:
    return parser().parse(preprocess(src, extra_macros)).root_node


def text(node: Node | None) -> str:
    if node is None:
        return ""
    return node.text.decode("utf-8", errors="replace")


def walk(node: Node) -> Iterator[Node]:
    """Pre-order traversal."""
    stack = [node]
    while stack:
        n = stack.pop()
        yield n
        stack.extend(reversed(n.children))


def top_level(root: Node) -> Iterator[Node]:
    """Top-level items, descending into extern "C" blocks and preprocessor guards."""
    for child in root.children:
        if child.type in ("linkage_specification", "declaration_list"):
            yield from top_level(child)
        elif child.type.startswith("preproc_") and child.type not in (
            "preproc_include", "preproc_def", "preproc_function_def", "preproc_call",
        ):
            yield from top_level(child)
        else:
            yield child


def find_function_declarator(decl: Node) -> tuple[Node | None, int]:
    """Return the function declarator inside ``decl`` and the pointer depth
    wrapped around it (the return type's extra indirection)."""
    depth = 0
    node = decl
    while node is not None:
        if node.type == "function_declarator":
            inner = node.child_by_field_name("declarator")
            # ``int (*fp)(void)`` declares a variable, not a function
            if inner is not None and inner.type == "parenthesized_declarator":
                return None, 0
            return node, depth
        if node.type == "pointer_declarator":
            depth += 1
            node = node.child_by_field_name("declarator")
        elif node.type in ("parenthesized_declarator", "attributed_declarator"):
            node = next((c for c in node.named_children if c.type.endswith("declarator")), None)
        else:
            return None, 0
    return None, 0


def declarator_name(node: Node | None) -> str:
    """Identifier declared by a (possibly nested) declarator."""
    if node is None:
        return ""
    if node.type in ("identifier", "type_identifier", "field_identifier"):
        return text(node)
    inner = node.child_by_field_name("declarator")
    if inner is not None:
        return declarator_name(inner)
    for c in node.named_children:
        name = declarator_name(c)
        if name:
            return name
    return ""


def declarator_shape(node: Node | None) -> tuple[int, bool]:
    """(pointer depth, is-function-pointer) of a parameter/typedef declarator.
    Arrays decay to one pointer level."""
    depth = 0
    fnptr = False
    while node is not None:
        t = node.type
        if t in ("pointer_declarator", "abstract_pointer_declarator"):
            depth += 1
        elif t in ("array_declarator", "abstract_array_declarator"):
            depth += 1
        elif t in ("function_declarator", "abstract_function_declarator"):
            fnptr = True
        elif t in ("identifier", "type_identifier", "field_identifier"):
            break
        nxt = node.child_by_field_name("declarator")
        if nxt is None:
            nxt = next((c for c in node.named_children if "declarator" in c.type), None)
        node = nxt
    return depth, fnptr


def has_error(node: Node) -> bool:
    return node.has_error


def storage_classes(decl: Node) -> set[str]:
    return {text(c) for c in decl.children if c.type == "storage_class_specifier"}


def type_spelling(decl: Node) -> str:
    """Spell the base type of a declaration/parameter: qualifiers plus the type
    specifier, without declarator stars."""
    parts: list[str] = []
    for i, c in enumerate(decl.children):
        if decl.field_name_for_child(i) == "declarator":
            continue
        if c.type == "type_qualifier":
            parts.append(text(c))
        elif c.type in ("struct_specifier", "union_specifier", "enum_specifier"):
            kw = c.type.split("_")[0]
            name = c.child_by_field_name("name")
            parts.append(f"{kw} {text(name)}" if name is not None else f"{kw} <anon>")
        elif c.type == "macro_type_specifier":
            desc = c.child_by_field_name("type")
            inner = type_spelling(desc) if desc is not None else ""
            depth, _ = declarator_shape(desc.child_by_field_name("declarator")) if desc is not None else (0, False)
            parts.append(inner + " *" * depth)
        elif c.type in ("primitive_type", "type_identifier", "sized_type_specifier"):
            parts.append(" ".join(text(c).split()))
    return " ".join(p for p in parts if p)


def leading_comment(node: Node) -> str | None:
    """Comment block immediately preceding ``node`` (no code in between)."""
    chunks: list[str] = []
    prev = node.prev_sibling
    expected_row = node.start_point[0]
    while prev is not None and prev.type == "comment" and prev.end_point[0] >= expected_row - 1:
        chunks.append(text(prev))
        expected_row = prev.start_point[0]
        prev = prev.prev_sibling
    if not chunks:
        return None
    return clean_comment("\n".join(reversed(chunks)))


def clean_comment(raw: str) -> str:
    lines = []
    for line in raw.splitlines():
        s = line.strip()
        s = re.sub(r"^(/\*\*?|//+!?|\*/|\*)", "", s).strip()
        s = re.sub(r"\*/$", "", s).strip()
        lines.append(s)
    while lines and not lines[0]:
        lines.pop(0)
    while lines and not lines[-1]:
        lines.pop()
    return "\n".join(lines)


def callee_name(call: Node) -> str | None:
    fn = call.child_by_field_name("function")
    if fn is not None and fn.type == "identifier":
        return text(fn)
    return None


def calls_in_order(body: Node) -> list[tuple[str, int]]:
    """Call expressions in evaluation order: arguments before the call that
    consumes them, siblings in textual order.  Returns (callee, line)."""
    out: list[tuple[str, int]] = []

    def visit(n: Node) -> None:
        for c in n.children:
            visit(c)
        if n.type == "call_expression":
            name = callee_name(n)
            if name:
                out.append((name, n.start_point[0] + 1))

    visit(body)
    return out
