"""Template rendering of fuzz drivers from an API sequence.

This is the offline generation backend: given an ordered API list it emits a
single-file libFuzzer driver.  Scalars are taken from the tail of the input
(FuzzedDataProvider style), the remaining prefix becomes a NUL-terminated
buffer, and handles returned by earlier calls are threaded into later
parameters of a compatible type.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

from .errors import TypeNormalizationError
from .metainfo import VARIADIC, ApiMetainfo, NormalizedType, TypeTable, normalize_type

ENTRY_POINT = "LLVMFuzzerTestOneInput"

_CHARLIKE = {"char", "signed char", "unsigned char", "uint8_t", "int8_t", "void"}
_LENGTH_NAME = re.compile(r"(^|_)(len|length|size|sz|n|nbytes|count|bytes)$", re.I)
_FREE_HINT = re.compile(r"\bfree\s*\(|\bfree\(\)|\bmust be freed\b|\brelease with free\b", re.I)


def _role(name: str) -> str:
    from .semantics import guess_role  # deferred: semantics registers stub rules

    return guess_role(name)


def prelude() -> str:
    return resources.files("masfuzz").joinpath("templates/prelude.c").read_text()


@dataclass
class _Var:
    name: str
    ctype: str
    nt: NormalizedType
    producer: str
    owned: bool  # produced by a constructor-role API


@dataclass
class _Arg:
    text: str
    guard: str | None = None
    var: _Var | None = None


def _strip_const(raw: str) -> str:
    out = re.sub(r"\bconst\b", " ", raw)
    return " ".join(out.replace("*", " * ").split()).replace("* *", "**")


def _spell_decl(ctype: str, name: str) -> str:
    ctype = ctype.strip()
    if ctype.endswith("*"):
        return f"{ctype}{name}"
    return f"{ctype} {name}"


class DriverRenderer:
    """Render drivers for one library (API table + typedefs + headers)."""

    def __init__(self, apis: Iterable[ApiMetainfo], types: TypeTable, headers: Sequence[str]):
        self.apis = {a.name: a for a in apis}
        self.types = types
        self.headers = list(headers)

    # -- type helpers ---------------------------------------------------------------

    def _nt(self, raw: str) -> NormalizedType | None:
        if raw in (VARIADIC, "<fnptr>", "<unknown>"):
            return None
        try:
            return normalize_type(raw, self.types)
        except TypeNormalizationError:
            return None

    def _is_fnptr(self, nt: NormalizedType) -> bool:
        td = self.types.typedefs.get(nt.base)
        return nt.base == "<fnptr>" or (td is not None and td.kind == "fnptr")

    def param_kind(self, raw: str) -> str:
        nt = self._nt(raw)
        if raw == VARIADIC:
            return "variadic"
        if nt is None or self._is_fnptr(nt):
            return "null"
        if not nt.is_primitive:
            return {0: "struct_value", 1: "handle", 2: "handle_out"}.get(nt.pointer_depth, "null")
        if nt.pointer_depth == 0:
            return "null" if nt.base == "void" else "scalar"
        if nt.base in _CHARLIKE:
            if nt.pointer_depth == 1:
                return "buffer"
            if nt.pointer_depth == 2 and nt.base != "void":
                return "out_buffer"
            return "null"
        if nt.pointer_depth == 1:
            return "scalar_in" if "const" in nt.qualifiers else "scalar_out"
        return "null"

    def destructor_for(self, nt: NormalizedType) -> str | None:
        for name in sorted(self.apis):
            api = self.apis[name]
            if _role(name) != "destructor":
                continue
            params = [p for p in api.params if p.type != VARIADIC]
            if len(params) != 1:
                continue
            pt = self._nt(params[0].type)
            if pt is not None and not pt.is_primitive and pt.base == nt.base and pt.pointer_depth == nt.pointer_depth:
                return name
        return None

    # -- rendering ------------------------------------------------------------------

    def render(self, sequence: Sequence[str], *, title: str = "") -> str:
        """C source of a driver invoking ``sequence`` in order."""
        decls: list[str] = []
        takes: list[str] = []
        body: list[str] = []
        handles: list[_Var] = []
        out_buffers: list[tuple[str, str]] = []  # (var, api)
        counter = 0

        def fresh(prefix: str) -> str:
            nonlocal counter
            counter += 1
            return f"{prefix}{counter}"

        def find_handle(nt: NormalizedType) -> tuple[_Var, str] | None:
            for v in reversed(handles):
                if v.nt.base != nt.base:
                    continue
                if v.nt.pointer_depth == nt.pointer_depth:
                    return v, v.name
                if v.nt.pointer_depth == 0 and nt.pointer_depth == 1:
                    return v, f"&{v.name}"
            return None

        for api_name in sequence:
            api = self.apis[api_name]
            args: list[_Arg] = []
            saw_buffer = False
            for p in api.params:
                kind = self.param_kind(p.type)
                cast = f"({p.type})" if kind not in ("variadic", "null") else ""
                if kind == "variadic":
                    continue
                if kind == "null":
                    args.append(_Arg("NULL"))
                elif kind == "handle" or kind == "struct_value":
                    nt = self._nt(p.type)
                    hit = find_handle(nt)
                    if hit is None:
                        if kind == "struct_value":
                            v = fresh("v")
                            decls.append(f"{_spell_decl(_strip_const(p.type), v)};")
                            takes.append(f"masfuzz_take(&in, &{v}, sizeof({v}));")
                            args.append(_Arg(v))
                        else:
                            args.append(_Arg(f"{cast}NULL"))
                    else:
                        var, expr = hit
                        guard = var.name if expr == var.name and var.nt.pointer_depth > 0 else None
                        args.append(_Arg(f"{cast}{expr}", guard, var))
                elif kind == "handle_out":
                    raw = _strip_const(p.type)
                    v = fresh("h")
                    ctype = raw[:-1].rstrip() if raw.endswith("*") else raw
                    nt = self._nt(p.type)
                    decls.append(f"{_spell_decl(ctype, v)} = NULL;")
                    args.append(_Arg(f"&{v}"))
                    handles.append(_Var(v, ctype, NormalizedType(nt.base, 1, frozenset(), False), api_name,
                                        _role(api_name) == "constructor"))
                elif kind == "buffer":
                    saw_buffer = True
                    args.append(_Arg(f"{cast}buf"))
                elif kind == "out_buffer":
                    v = fresh("o")
                    decls.append(f"{_spell_decl(_strip_const(p.type)[:-1].rstrip(), v)} = NULL;")
                    args.append(_Arg(f"&{v}"))
                    out_buffers.append((v, api_name))
                elif kind == "scalar":
                    if saw_buffer and _LENGTH_NAME.search(p.name):
                        args.append(_Arg(f"({_strip_const(p.type)})buf_len"))
                    else:
                        v = fresh("s")
                        decls.append(f"{_spell_decl(_strip_const(p.type), v)};")
                        takes.append(f"masfuzz_take(&in, &{v}, sizeof({v}));")
                        args.append(_Arg(v))
                elif kind in ("scalar_in", "scalar_out"):
                    v = fresh("s")
                    ctype = _strip_const(p.type)[:-1].rstrip()
                    decls.append(f"{_spell_decl(ctype, v)};")
                    if kind == "scalar_in":
                        takes.append(f"masfuzz_take(&in, &{v}, sizeof({v}));")
                    else:
                        takes.append(f"memset(&{v}, 0, sizeof({v}));")
                    args.append(_Arg(f"&{v}"))

            call = f"{api_name}({', '.join(a.text for a in args)})"
            ret_nt = self._nt(api.return_type)
            role = _role(api_name)
            if ret_nt is not None and not ret_nt.is_primitive and ret_nt.pointer_depth <= 1:
                v = fresh("h")
                ctype = _strip_const(api.return_type)
                init = " = NULL" if ret_nt.pointer_depth else ""
                decls.append(f"{_spell_decl(ctype, v)}{init};")
                stmt = f"{v} = {call};"
                handles.append(_Var(v, ctype, ret_nt, api_name, role == "constructor"))
            elif (
                ret_nt is not None and ret_nt.is_primitive and ret_nt.pointer_depth == 1
                and ret_nt.base in _CHARLIKE and "const" not in ret_nt.qualifiers
                and api.doc and _FREE_HINT.search(api.doc)
            ):
                v = fresh("o")
                decls.append(f"{_spell_decl(_strip_const(api.return_type), v)} = NULL;")
                stmt = f"{v} = {call};"
                out_buffers.append((v, api_name))
            elif api.return_type == "void":
                stmt = f"{call};"
            else:
                stmt = f"(void){call};"

            guards = sorted({a.guard for a in args if a.guard})
            lines = [stmt]
            if role == "destructor":
                for a in args:
                    if a.var is not None and a.guard:
                        lines.append(f"{a.var.name} = NULL;")
            if guards:
                cond = " && ".join(f"{g} != NULL" for g in guards)
                body.append(f"    if ({cond}) {{")
                body.extend(f"        {ln}" for ln in lines)
                body.append("    }")
            else:
                body.extend(f"    {ln}" for ln in lines)

        cleanup: list[str] = []
        for v in reversed(handles):
            if not v.owned or v.nt.pointer_depth != 1:
                continue
            dtor = self.destructor_for(v.nt)
            if dtor is None:
                continue
            ptype = self.apis[dtor].params[0].type
            cleanup.append(f"    if ({v.name} != NULL)")
            cleanup.append(f"        {dtor}(({ptype}){v.name});")
        for v, api_name in out_buffers:
            doc = self.apis[api_name].doc or ""
            if _FREE_HINT.search(doc):
                cleanup.append(f"    free({v});")

        header = [f"/* {title} */"] if title else []
        header += [
            "#include <stddef.h>",
            "#include <stdint.h>",
            "#include <stdlib.h>",
            "#include <string.h>",
            "",
        ]
        header += [f'#include "{h.rsplit("/", 1)[-1]}"' for h in self.headers]
        out = header + ["", prelude().rstrip(), ""]
        out.append(f"int {ENTRY_POINT}(const uint8_t *data, size_t size)")
        out.append("{")
        out.append("    masfuzz_input_t in = {data, size};")
        out.append("    char *buf;")
        out.append("    size_t buf_len;")
        out.extend(f"    {d}" for d in decls)
        out.append("")
        out.extend(f"    {t}" for t in takes)
        out.append("    buf = masfuzz_rest(&in, &buf_len);")
        out.append("    if (buf == NULL)")
        out.append("        return 0;")
        out.append("")
        out.extend(body)
        if cleanup:
            out.append("")
            out.extend(cleanup)
        out.append("    free(buf);")
        out.append("    return 0;")
        out.append("}")
        return "\n".join(out) + "\n"


def merge_sequences(
    backbone: Sequence[str] | None,
    others: Iterable[Sequence[str] | None],
    consumes: "dict[str, set[str]]",
    produces: "dict[str, set[str]]",
) -> list[str]:
    """Ordered union of prompt sequences.

    The backbone (or the first available sequence) fixes the order.  Each
    missing API of a later sequence goes right after its predecessor in that
    sequence when the predecessor is already placed, otherwise after the
    first placed API producing a type it consumes, otherwise first.
    """
    seqs = [s for s in [backbone, *others] if s]
    if not seqs:
        return []
    merged = list(seqs[0])
    for seq in seqs[1:]:
        for k, api in enumerate(seq):
            if api in merged:
                continue
            pos = 0
            if k > 0 and seq[k - 1] in merged:
                pos = merged.index(seq[k - 1]) + 1
            else:
                for i, placed in enumerate(merged):
                    if produces.get(placed, set()) & consumes.get(api, set()):
                        pos = i + 1
                        break
            merged.insert(pos, api)
    return merged
