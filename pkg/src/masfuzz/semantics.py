"""Semantic (SEM) sequence mining: describe each API, infer
predecessor/successor relations between APIs, and chain the relations into
sequences."""

from __future__ import annotations

import json
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable

from .errors import OracleError
from .metainfo import ApiMetainfo, LibraryModel
from .oracles import ChatOracle, ask, parse_json_reply, stub_rule
from .sequences import ApiSequence, Dimension, MinerConfig

log = logging.getLogger(__name__)

_SYSTEM = (
    "You are a C library analyst. Answer with a single JSON document and no prose."
)


@dataclass
class SemanticDescription:
    api: str
    summary: str
    role: str
    preconditions: list[str] = field(default_factory=list)
    available: bool = True
    transcript: str = ""

    def to_json(self) -> dict[str, Any]:
        return {
            "api": self.api, "summary": self.summary, "role": self.role,
            "preconditions": self.preconditions, "available": self.available,
            "transcript": self.transcript,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "SemanticDescription":
        return cls(**d)


@dataclass(frozen=True)
class SemanticRelation:
    predecessor: str
    successor: str
    rationale: str = ""
    transcript: str = ""

    def to_json(self) -> dict[str, Any]:
        return {"predecessor": self.predecessor, "successor": self.successor,
                "rationale": self.rationale, "transcript": self.transcript}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "SemanticRelation":
        return cls(**d)


# -- stage 1: per-API descriptions ----------------------------------------------


def _describe_messages(api: ApiMetainfo) -> list[dict[str, str]]:
    body = (api.body or "")[:4000]
    user = (
        "Describe the following C API. Reply with JSON "
        '{"summary": str, "role": str, "preconditions": [str]} where role is one of '
        "global-init, constructor, operation, destructor, global-cleanup.\n\n"
        f"Signature: {api.signature}\nFile: {api.file}:{api.line}\n"
        f"Documentation:\n{api.doc or '(none)'}\n\nBody:\n{body or '(not available)'}"
    )
    return [{"role": "system", "content": _SYSTEM}, {"role": "user", "content": user}]


def _parse_description(reply: str) -> dict[str, Any]:
    d = parse_json_reply(reply)
    if not isinstance(d, dict):
        raise OracleError("description must be a JSON object")
    if not isinstance(d.get("summary"), str) or not isinstance(d.get("role"), str):
        raise OracleError("description needs string 'summary' and 'role'")
    pre = d.get("preconditions", [])
    if not isinstance(pre, list) or not all(isinstance(p, str) for p in pre):
        raise OracleError("'preconditions' must be a list of strings")
    return d


def extract_semantics(api: ApiMetainfo, oracle: ChatOracle, retries: int = 1) -> SemanticDescription:
    """Structured description of one API.  After ``retries`` failed retries
    the description is returned with ``available=False``."""
    payload = {"api": api.to_json()}
    try:
        d, tid = ask(oracle, "describe_api", _describe_messages(api), payload, _parse_description, retries)
    except OracleError as exc:
        log.warning("semantic description unavailable for %s: %s", api.name, exc)
        return SemanticDescription(api.name, "", "unknown", [], available=False)
    return SemanticDescription(api.name, d["summary"], d["role"], list(d.get("preconditions", [])), True, tid)


def describe_all(
    model: LibraryModel, oracle: ChatOracle, retries: int = 1, max_in_flight: int = 4
) -> dict[str, SemanticDescription]:
    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        descs = list(pool.map(lambda a: extract_semantics(a, oracle, retries), model.apis))
    return {d.api: d for d in descs}


# -- stage 2: relations ---------------------------------------------------------


def _relation_messages(focus: list[SemanticDescription], all_descs: list[SemanticDescription]) -> list[dict[str, str]]:
    catalog = "\n".join(f"- {d.api} [{d.role}]: {d.summary}" for d in all_descs)
    names = ", ".join(d.api for d in focus)
    user = (
        "Given these API descriptions:\n"
        f"{catalog}\n\n"
        f"List semantically required orderings that involve any of: {names}. "
        'Reply with JSON [{"predecessor": str, "successor": str, "rationale": str}]. '
        "Include an ordering only when the successor depends on state established by the "
        "predecessor."
    )
    return [{"role": "system", "content": _SYSTEM}, {"role": "user", "content": user}]


def _parse_relations(reply: str) -> list[dict[str, Any]]:
    d = parse_json_reply(reply)
    if isinstance(d, dict) and "relations" in d:
        d = d["relations"]
    if not isinstance(d, list):
        raise OracleError("relations reply must be a JSON list")
    for r in d:
        if not isinstance(r, dict) or not isinstance(r.get("predecessor"), str) or not isinstance(r.get("successor"), str):
            raise OracleError(f"malformed relation record: {r!r}")
    return d


def infer_relations(
    descs: Iterable[SemanticDescription],
    oracle: ChatOracle,
    batch_size: int = 16,
    retries: int = 1,
    diagnostics: list[str] | None = None,
) -> list[SemanticRelation]:
    """Predecessor/successor relations among the described APIs.  Relations
    naming unknown APIs, or an API as its own predecessor, are dropped."""
    descs = sorted((d for d in descs if d.available), key=lambda d: d.api)
    if len(descs) < 2:
        return []
    known = {d.api for d in descs}
    out: dict[tuple[str, str], SemanticRelation] = {}
    for i in range(0, len(descs), batch_size):
        focus = descs[i:i + batch_size]
        payload = {"focus": [d.to_json() for d in focus], "descriptions": [d.to_json() for d in descs]}
        try:
            recs, tid = ask(oracle, "infer_relations", _relation_messages(focus, descs), payload, _parse_relations, retries)
        except OracleError as exc:
            log.warning("relation inference failed for batch %d: %s", i // batch_size, exc)
            continue
        for r in recs:
            pred, succ = r["predecessor"], r["successor"]
            if pred not in known or succ not in known or pred == succ:
                msg = f"dropping relation {pred} -> {succ}: unknown or self-referential API"
                log.info(msg)
                if diagnostics is not None:
                    diagnostics.append(msg)
                continue
            out.setdefault((pred, succ), SemanticRelation(pred, succ, str(r.get("rationale", "")), tid))
    return [out[k] for k in sorted(out)]


# -- stage 3: sequence synthesis -------------------------------------------------


def _find_cycle(adj: dict[str, list[str]]) -> list[tuple[str, str]] | None:
    color: dict[str, int] = {}
    parent_path: list[str] = []

    def dfs(u: str) -> list[tuple[str, str]] | None:
        color[u] = 1
        parent_path.append(u)
        for v in adj.get(u, ()):
            if color.get(v, 0) == 1:
                cyc = parent_path[parent_path.index(v):] + [v]
                return list(zip(cyc, cyc[1:]))
            if color.get(v, 0) == 0:
                found = dfs(v)
                if found:
                    return found
        parent_path.pop()
        color[u] = 2
        return None

    for n in sorted(adj):
        if color.get(n, 0) == 0:
            found = dfs(n)
            if found:
                return found
    return None


def break_cycles(edges: Iterable[tuple[str, str]]) -> tuple[set[tuple[str, str]], list[tuple[str, str]]]:
    """Drop, from each remaining cycle, the edge whose (predecessor,
    successor) pair sorts last.  Returns (acyclic edges, dropped edges)."""
    kept = set(edges)
    dropped = []
    while True:
        adj: dict[str, list[str]] = {}
        for a, b in sorted(kept):
            adj.setdefault(a, []).append(b)
            adj.setdefault(b, [])
        cycle = _find_cycle(adj)
        if cycle is None:
            return kept, dropped
        worst = max(cycle)
        kept.discard(worst)
        dropped.append(worst)


def synthesize_sem_sequences(relations: Iterable[SemanticRelation], cfg: MinerConfig) -> list[ApiSequence]:
    """Maximal chains through the (cycle-broken) precedence graph, capped at
    ``cfg.max_len`` and down-sampled per source node."""
    rels = {(r.predecessor, r.successor): r for r in relations}
    if not rels:
        return []
    edges, dropped = break_cycles(rels)
    for e in dropped:
        log.info("broke semantic cycle by dropping %s -> %s", *e)
    adj: dict[str, list[str]] = {}
    indeg: dict[str, int] = {}
    for a, b in sorted(edges):
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, [])
        indeg[b] = indeg.get(b, 0) + 1
        indeg.setdefault(a, 0)
    sources = sorted(n for n in adj if indeg.get(n, 0) == 0)
    out: list[ApiSequence] = []
    for src in sources:
        chains: list[tuple[str, ...]] = []
        stack: list[tuple[str, ...]] = [(src,)]
        while stack:
            path = stack.pop()
            succ = adj[path[-1]]
            if not succ or len(path) >= cfg.max_len:
                chains.append(path)
                continue
            for nxt in reversed(succ):
                stack.append(path + (nxt,))
        if len(chains) > cfg.sem_sample_size:
            rng = random.Random(f"{cfg.rng_seed}/sem/{src}")
            keep = sorted(rng.sample(range(len(chains)), cfg.sem_sample_size))
            chains = [chains[i] for i in keep]
        for chain in chains:
            tids = sorted({rels[e].transcript for e in zip(chain, chain[1:]) if rels[e].transcript})
            out.append(ApiSequence(chain, Dimension.SEM, {"transcripts": tids}))
    return out


def mine_semantic_sequences(
    model: LibraryModel, oracle: ChatOracle, cfg: MinerConfig, max_in_flight: int = 4
) -> tuple[list[ApiSequence], dict[str, SemanticDescription], list[SemanticRelation]]:
    descs = describe_all(model, oracle, max_in_flight=max_in_flight)
    rels = infer_relations(descs.values(), oracle, cfg.sem_batch_size)
    return synthesize_sem_sequences(rels, cfg), descs, rels


# -- stub rules -------------------------------------------------------------------

_ROLE_PATTERNS = [
    ("global-init", re.compile(r"(library|global|lib)_?init|init_?(library|global)")),
    ("global-cleanup", re.compile(r"(library|global|lib)_?(cleanup|shutdown|fini)")),
    ("destructor", re.compile(r"(free|destroy|delete|release|close|dispose|cleanup|unref|fini)$|_(free|destroy|delete|release|close)_")),
    ("constructor", re.compile(r"(^|_)(new|create|init|open|alloc|copy|dup|duplicate|clone|parse|from|load)(_|$)|_init$")),
]
ROLE_RANK = {"global-init": 0, "constructor": 1, "operation": 2, "destructor": 3, "global-cleanup": 4}


def guess_role(name: str) -> str:
    lowered = name.lower()
    for role, pat in _ROLE_PATTERNS:
        if pat.search(lowered):
            return role
    return "operation"


def _first_sentence(text: str) -> str:
    flat = " ".join(text.split())
    m = re.match(r"(.+?[.!?])(\s|$)", flat)
    return m.group(1) if m else flat


@stub_rule("describe_api")
def _stub_describe(payload: dict[str, Any]) -> str:
    api = ApiMetainfo.from_json(payload["api"])
    if api.doc:
        summary = _first_sentence(api.doc)
        pre = [s for s in re.split(r"(?<=[.!?])\s+", " ".join(api.doc.split()))
               if re.search(r"\b(must|before|after|should|only)\b", s, re.I)]
    else:
        summary = f"{api.name}: {api.signature}."
        pre = []
    return json.dumps({"summary": summary, "role": guess_role(api.name), "preconditions": pre})


@stub_rule("infer_relations")
def _stub_relations(payload: dict[str, Any]) -> str:
    descs = payload["descriptions"]
    focus = {d["api"] for d in payload["focus"]}
    by_rank: dict[int, list[str]] = {}
    for d in descs:
        rank = ROLE_RANK.get(d["role"], ROLE_RANK["operation"])
        by_rank.setdefault(rank, []).append(d["api"])
    ranks = sorted(by_rank)
    rels = []
    for lo, hi in zip(ranks, ranks[1:]):
        for a in sorted(by_rank[lo]):
            for b in sorted(by_rank[hi]):
                if a in focus or b in focus:
                    rels.append({"predecessor": a, "successor": b,
                                 "rationale": f"role order: {lo} before {hi}"})
    return json.dumps(rels)
