"""Domain records and strict JSONL codecs.

Every record family is decoded against a closed schema: unknown keys, missing
required keys, wrong JSON types and bad enum values are all rejected with a
:class:`DecodeError` naming the field path (and the line number when the
caller supplies one).  Encoding emits fields in schema-declaration order so
that ``encode_record(decode_record(kind, line))`` is byte-stable.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from graphlib import CycleError, TopologicalSorter
from typing import Any, Iterable, Iterator, Mapping, Sequence, Union

STAGES = ("PREP", "PROBE", "EXECUTE", "OUTCOME")
STAGE_ORDER = {s: i for i, s in enumerate(STAGES)}
ROLES = ("Agent", "Target", "Context")
SPLITS = ("train", "dev", "test")
EVIDENCE_KINDS = ("trigger", "arg")

_SPAN_TEXT = re.compile(r"^[0-9]+-[0-9]+$")
_EPOCH = date(1970, 1, 1)


class DecodeError(ValueError):
    """A record failed to parse or to satisfy its schema."""

    def __init__(self, message: str, *, path: str = "", line: int | None = None,
                 category: str = "schema"):
        self.message = message
        self.path = path
        self.line = line
        self.category = category
        super().__init__(str(self))

    def __str__(self) -> str:
        where = []
        if self.line is not None:
            where.append(f"line {self.line}")
        if self.path:
            where.append(self.path)
        prefix = f"{', '.join(where)}: " if where else ""
        return f"{prefix}{self.category} error: {self.message}"

    def at_line(self, line: int) -> "DecodeError":
        return DecodeError(self.message, path=self.path, line=line, category=self.category)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Span:
    """Half-open character interval ``[start, end)`` inside ``doc_id``."""

    doc_id: str
    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start

    def intersection(self, other: "Span") -> int:
        if self.doc_id != other.doc_id:
            return 0
        return max(0, min(self.end, other.end) - max(self.start, other.start))

    def overlaps(self, other: "Span") -> bool:
        return self.intersection(other) > 0

    def to_json(self) -> list[int]:
        return [self.start, self.end]


@dataclass(frozen=True)
class EvidenceRef:
    span: Span
    kind: str
    role: str | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"doc_id": self.span.doc_id, "span": self.span.to_json(),
                               "kind": self.kind}
        if self.role is not None:
            out["role"] = self.role
        return out


@dataclass(frozen=True)
class ArgumentMention:
    role: str
    entity_id: str
    span: Span

    def to_dict(self) -> dict[str, Any]:
        return {"role": self.role, "entity_id": self.entity_id,
                "doc_id": self.span.doc_id, "span": self.span.to_json()}


def parse_time(value: Any) -> tuple[str, float] | None:
    """Return ``(unit, value)`` for a usable timestamp, else ``None``.

    ISO dates become integer days since 1970-01-01, ISO datetimes fractional
    days, bare numbers are taken verbatim.  Anything else counts as absent.
    """
    if value is None or isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return ("numeric", float(value)) if math.isfinite(value) else None
    if isinstance(value, str):
        text = value.strip()
        try:
            return ("days", float((date.fromisoformat(text) - _EPOCH).days))
        except ValueError:
            pass
        try:
            stamp = datetime.fromisoformat(text)
        except ValueError:
            return None
        if stamp.tzinfo is None:
            stamp = stamp.replace(tzinfo=timezone.utc)
        delta = stamp - datetime(1970, 1, 1, tzinfo=timezone.utc)
        return ("days", delta.total_seconds() / 86400.0)
    return None


@dataclass(frozen=True)
class Event:
    event_id: str
    etype_raw: str
    skeleton_hits: tuple[str, ...]
    etype_primary: str
    order_index: float
    trigger: Span
    arguments: tuple[ArgumentMention, ...] = ()
    time: Any = None

    @property
    def time_key(self) -> tuple[str, float] | None:
        return parse_time(self.time)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "event_id": self.event_id,
            "etype_raw": self.etype_raw,
            "skeleton_hits": list(self.skeleton_hits),
            "etype_primary": self.etype_primary,
        }
        if self.time is not None:
            out["time"] = self.time
        out["order_index"] = self.order_index
        out["trigger"] = {"doc_id": self.trigger.doc_id, "span": self.trigger.to_json()}
        out["arguments"] = [a.to_dict() for a in self.arguments]
        return out


def shared_time_unit(events: Sequence[Event]) -> str | None:
    """The common time unit when every event carries a usable time, else None."""
    if not events:
        return None
    units = set()
    for ev in events:
        key = ev.time_key
        if key is None:
            return None
        units.add(key[0])
    return units.pop() if len(units) == 1 else None


def sort_events(events: Iterable[Event]) -> tuple[Event, ...]:
    """Sort by absolute time when every event has one, else by order_index.

    ``order_index`` is the stable tie-breaker; mixed time units fall back to
    ``order_index`` alone.
    """
    events = list(events)
    if shared_time_unit(events) is not None:
        return tuple(sorted(events, key=lambda e: (e.time_key[1], e.order_index)))
    return tuple(sorted(events, key=lambda e: e.order_index))


@dataclass(frozen=True)
class Trajectory:
    window_id: str
    candidate_id: str
    trajectory_id: str
    events: tuple[Event, ...] = ()
    meta: Mapping[str, Any] | None = None

    def event_by_id(self, event_id: str) -> Event | None:
        for ev in self.events:
            if ev.event_id == event_id:
                return ev
        return None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "window_id": self.window_id,
            "candidate_id": self.candidate_id,
            "trajectory_id": self.trajectory_id,
            "events": [e.to_dict() for e in self.events],
        }
        if self.meta is not None:
            out["meta"] = dict(self.meta)
        return out


@dataclass(frozen=True)
class SkeletonStep:
    step_id: str
    stage: str
    required_roles: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"step_id": self.step_id, "etype": self.stage,
                "required_roles": list(self.required_roles)}


@dataclass(frozen=True)
class Skeleton:
    skeleton_id: str
    intent_id: str
    steps: tuple[SkeletonStep, ...]
    precedence: tuple[tuple[str, str], ...] = ()

    @property
    def step_ids(self) -> tuple[str, ...]:
        return tuple(s.step_id for s in self.steps)

    def step_index(self, step_id: str) -> int | None:
        for i, s in enumerate(self.steps):
            if s.step_id == step_id:
                return i
        return None

    def to_dict(self) -> dict[str, Any]:
        return {"skeleton_id": self.skeleton_id, "intent_id": self.intent_id,
                "steps": [s.to_dict() for s in self.steps],
                "precedence": [list(e) for e in self.precedence]}


@dataclass(frozen=True)
class WindowInput:
    window_id: str
    intent_id: str
    skeleton_id: str
    doc_ids: tuple[str, ...]
    candidate_ids: tuple[str, ...]
    snippet_ids: tuple[str, ...] | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"window_id": self.window_id, "intent_id": self.intent_id,
                               "skeleton_id": self.skeleton_id, "doc_ids": list(self.doc_ids)}
        if self.snippet_ids is not None:
            out["snippet_ids"] = list(self.snippet_ids)
        out["candidate_ids"] = list(self.candidate_ids)
        return out


@dataclass(frozen=True)
class DocMeta:
    doc_id: str
    length: int

    def to_dict(self) -> dict[str, Any]:
        return {"doc_id": self.doc_id, "length": self.length}


@dataclass(frozen=True)
class WindowLabel:
    window_id: str
    positive_ids: tuple[str, ...]
    split: str

    def to_dict(self) -> dict[str, Any]:
        return {"window_id": self.window_id, "positive_ids": list(self.positive_ids),
                "split": self.split}


@dataclass(frozen=True)
class PreferencePair:
    window_id: str
    better: str
    worse: str
    intent_id: str | None = None
    reason: str | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"window_id": self.window_id}
        if self.intent_id is not None:
            out["intent_id"] = self.intent_id
        out["better"] = self.better
        out["worse"] = self.worse
        if self.reason is not None:
            out["reason"] = self.reason
        return out


@dataclass(frozen=True)
class CertStep:
    step_id: str
    etype: str
    matched: bool
    event_id: str | None = None
    evidence: tuple[EvidenceRef, ...] = ()
    notes: str | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"step_id": self.step_id, "etype": self.etype,
                               "matched": self.matched, "event_id": self.event_id,
                               "evidence": [e.to_dict() for e in self.evidence]}
        if self.notes is not None:
            out["notes"] = self.notes
        return out


Certificate = tuple[CertStep, ...]


@dataclass(frozen=True)
class PolicyOutput:
    window_id: str
    topk: tuple[str, ...]
    certificates: tuple[Certificate, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"window_id": self.window_id, "topk": list(self.topk),
                "certificates": [{"steps": [s.to_dict() for s in cert]}
                                 for cert in self.certificates]}


@dataclass(frozen=True)
class ParseFailure:
    """A policy output that could not be decoded; counted by ParseRate."""

    reason: str  # "not-parseable" | "schema-violation"
    detail: str = ""
    window_id: str | None = None


@dataclass(frozen=True)
class WindowContext:
    """Everything needed to judge one output for one window (no labels)."""

    window: WindowInput
    skeleton: Skeleton
    doc_meta: Mapping[str, DocMeta]
    trajectories: Mapping[str, Trajectory]

    @property
    def window_id(self) -> str:
        return self.window.window_id

    @property
    def roster(self) -> tuple[str, ...]:
        return self.window.candidate_ids

    def k_window(self, k: int) -> int:
        return min(k, len(self.window.candidate_ids))

    def trajectory(self, candidate_id: str) -> Trajectory | None:
        return self.trajectories.get(candidate_id)


class ContextError(ValueError):
    """Joined record files are inconsistent for a window."""


def build_context(window: WindowInput, skeletons: Mapping[str, Skeleton],
                  doc_meta: Mapping[str, DocMeta],
                  trajectories: Mapping[str, Trajectory]) -> WindowContext:
    skeleton = skeletons.get(window.skeleton_id)
    if skeleton is None:
        raise ContextError(f"{window.window_id}: unknown skeleton_id {window.skeleton_id!r}")
    if skeleton.intent_id != window.intent_id:
        raise ContextError(f"{window.window_id}: skeleton intent {skeleton.intent_id!r} "
                           f"!= window intent {window.intent_id!r}")
    missing = [c for c in window.candidate_ids if c not in trajectories]
    if missing:
        raise ContextError(f"{window.window_id}: no trajectory record for {missing}")
    docs = {d: doc_meta[d] for d in window.doc_ids if d in doc_meta}
    trajs = {c: trajectories[c] for c in window.candidate_ids}
    return WindowContext(window=window, skeleton=skeleton, doc_meta=docs, trajectories=trajs)


Record = Union[Trajectory, WindowInput, Skeleton, DocMeta, WindowLabel, PreferencePair]


# ---------------------------------------------------------------------------
# strict JSON


def _reject_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in pairs:
        if key in out:
            raise DecodeError(f"duplicate key {key!r}", category="parse")
        out[key] = value
    return out


def _reject_constant(name: str) -> Any:
    raise DecodeError(f"non-standard constant {name}", category="parse")


def strict_loads(text: str) -> Any:
    """``json.loads`` without duplicate keys, NaN/Infinity or trailing content."""
    try:
        return json.loads(text, object_pairs_hook=_reject_duplicates,
                          parse_constant=_reject_constant)
    except DecodeError:
        raise
    except (json.JSONDecodeError, RecursionError) as exc:
        raise DecodeError(str(exc), category="parse") from None


def canonical_dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


# ---------------------------------------------------------------------------
# schema helpers


def _obj(value: Any, path: str, required: Sequence[str], optional: Sequence[str] = ()) -> dict:
    if not isinstance(value, dict):
        raise DecodeError("expected object", path=path)
    allowed = set(required) | set(optional)
    for key in value:
        if key not in allowed:
            raise DecodeError(f"unknown field {key!r}", path=path)
    for key in required:
        if key not in value:
            raise DecodeError(f"missing required field {key!r}", path=path)
    return value


def _str(value: Any, path: str) -> str:
    if not isinstance(value, str):
        raise DecodeError("expected string", path=path)
    return value


def _int(value: Any, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise DecodeError("expected integer", path=path)
    return value


def _num(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DecodeError("expected number", path=path)
    return value


def _bool(value: Any, path: str) -> bool:
    if not isinstance(value, bool):
        raise DecodeError("expected boolean", path=path)
    return value


def _list(value: Any, path: str) -> list:
    if not isinstance(value, list):
        raise DecodeError("expected array", path=path)
    return value


def _enum(value: Any, options: Sequence[str], path: str) -> str:
    text = _str(value, path)
    if text not in options:
        raise DecodeError(f"{text!r} not in {list(options)}", path=path)
    return text


def _str_list(value: Any, path: str, *, unique: bool = False) -> tuple[str, ...]:
    items = tuple(_str(v, f"{path}[{i}]") for i, v in enumerate(_list(value, path)))
    if unique and len(set(items)) != len(items):
        raise DecodeError("duplicate items", path=path)
    return items


def parse_span(raw: Any, doc_id: str, *, path: str = "span", strict: bool = True) -> Span:
    """Decode either ``"l-r"`` or ``[l, r]`` into the half-open span ``[l, r)``.

    With ``strict`` (record files) negative bounds and ``l > r`` are rejected.
    Policy outputs decode with ``strict=False``: only the serialization shape is
    checked and bound violations are left to the feasibility validator.
    """
    if isinstance(raw, str):
        if not _SPAN_TEXT.match(raw):
            raise DecodeError(f"malformed span text {raw!r}", path=path)
        left, right = (int(p) for p in raw.split("-"))
    elif isinstance(raw, list):
        if len(raw) != 2:
            raise DecodeError("span array must have exactly 2 members", path=path)
        left = _int(raw[0], f"{path}[0]")
        right = _int(raw[1], f"{path}[1]")
    else:
        raise DecodeError("span must be 'l-r' text or a two-integer array", path=path)
    if strict:
        if left < 0 or right < 0:
            raise DecodeError("negative span bound", path=path)
        if left > right:
            raise DecodeError(f"span start {left} > end {right}", path=path)
    return Span(doc_id, left, right)


def _stage_set(value: Any, path: str) -> tuple[str, ...]:
    items = _list(value, path)
    if not items:
        raise DecodeError("must be non-empty", path=path)
    stages = tuple(_enum(v, STAGES, f"{path}[{i}]") for i, v in enumerate(items))
    if len(set(stages)) != len(stages):
        raise DecodeError("duplicate stages", path=path)
    return stages


def _decode_event(value: Any, path: str) -> Event:
    d = _obj(value, path, ("event_id", "etype_raw", "skeleton_hits", "etype_primary",
                           "order_index", "trigger", "arguments"), ("time",))
    hits = _stage_set(d["skeleton_hits"], f"{path}.skeleton_hits")
    primary = _enum(d["etype_primary"], STAGES, f"{path}.etype_primary")
    if primary not in hits:
        raise DecodeError("etype_primary not in skeleton_hits", path=f"{path}.etype_primary")
    time = d.get("time")
    if time is not None and (isinstance(time, bool) or not isinstance(time, (str, int, float))):
        raise DecodeError("time must be string, number or null", path=f"{path}.time")
    trig = _obj(d["trigger"], f"{path}.trigger", ("doc_id", "span"))
    trig_doc = _str(trig["doc_id"], f"{path}.trigger.doc_id")
    args = []
    for i, a in enumerate(_list(d["arguments"], f"{path}.arguments")):
        ap = f"{path}.arguments[{i}]"
        a = _obj(a, ap, ("role", "entity_id", "doc_id", "span"))
        doc = _str(a["doc_id"], f"{ap}.doc_id")
        args.append(ArgumentMention(role=_enum(a["role"], ROLES, f"{ap}.role"),
                                    entity_id=_str(a["entity_id"], f"{ap}.entity_id"),
                                    span=parse_span(a["span"], doc, path=f"{ap}.span")))
    return Event(
        event_id=_str(d["event_id"], f"{path}.event_id"),
        etype_raw=_str(d["etype_raw"], f"{path}.etype_raw"),
        skeleton_hits=hits,
        etype_primary=primary,
        order_index=_num(d["order_index"], f"{path}.order_index"),
        trigger=parse_span(trig["span"], trig_doc, path=f"{path}.trigger.span"),
        arguments=tuple(args),
        time=time,
    )


def _decode_trajectory(d: Any) -> Trajectory:
    d = _obj(d, "$", ("window_id", "candidate_id", "trajectory_id", "events"), ("meta",))
    events = [_decode_event(e, f"$.events[{i}]")
              for i, e in enumerate(_list(d["events"], "$.events"))]
    ids = [e.event_id for e in events]
    if len(set(ids)) != len(ids):
        raise DecodeError("duplicate event_id", path="$.events")
    meta = None
    if "meta" in d:
        m = _obj(d["meta"], "$.meta", (), ("graph_nodes", "graph_edges"))
        meta = {}
        if "graph_nodes" in m:
            meta["graph_nodes"] = list(_str_list(m["graph_nodes"], "$.meta.graph_nodes"))
        if "graph_edges" in m:
            edges = _list(m["graph_edges"], "$.meta.graph_edges")
            for i, e in enumerate(edges):
                _list(e, f"$.meta.graph_edges[{i}]")
            meta["graph_edges"] = edges
    return Trajectory(window_id=_str(d["window_id"], "$.window_id"),
                      candidate_id=_str(d["candidate_id"], "$.candidate_id"),
                      trajectory_id=_str(d["trajectory_id"], "$.trajectory_id"),
                      events=sort_events(events), meta=meta)


def _decode_skeleton(d: Any) -> Skeleton:
    d = _obj(d, "$", ("skeleton_id", "intent_id", "steps", "precedence"))
    steps = []
    for i, s in enumerate(_list(d["steps"], "$.steps")):
        sp = f"$.steps[{i}]"
        s = _obj(s, sp, ("step_id", "etype", "required_roles"))
        roles = tuple(_enum(r, ROLES, f"{sp}.required_roles[{j}]")
                      for j, r in enumerate(_list(s["required_roles"],
                                                  f"{sp}.required_roles")))
        if len(set(roles)) != len(roles):
            raise DecodeError("duplicate roles", path=f"{sp}.required_roles")
        steps.append(SkeletonStep(_str(s["step_id"], f"{sp}.step_id"),
                                  _enum(s["etype"], STAGES, f"{sp}.etype"), roles))
    if not steps:
        raise DecodeError("skeleton needs at least one step", path="$.steps")
    ids = [s.step_id for s in steps]
    if len(set(ids)) != len(ids):
        raise DecodeError("duplicate step_id", path="$.steps")
    edges = []
    for i, e in enumerate(_list(d["precedence"], "$.precedence")):
        ep = f"$.precedence[{i}]"
        pair = _str_list(e, ep)
        if len(pair) != 2:
            raise DecodeError("edge must be [step_id, step_id]", path=ep)
        for p in pair:
            if p not in ids:
                raise DecodeError(f"unknown step {p!r}", path=ep)
        edges.append((pair[0], pair[1]))
    graph: dict[str, set[str]] = {s: set() for s in ids}
    for a, b in edges:
        graph[b].add(a)
    try:
        tuple(TopologicalSorter(graph).static_order())
    except CycleError:
        raise DecodeError("precedence graph has a cycle", path="$.precedence") from None
    return Skeleton(_str(d["skeleton_id"], "$.skeleton_id"), _str(d["intent_id"], "$.intent_id"),
                    tuple(steps), tuple(edges))


def _decode_window_input(d: Any) -> WindowInput:
    d = _obj(d, "$", ("window_id", "intent_id", "skeleton_id", "doc_ids", "candidate_ids"),
             ("snippet_ids",))
    cands = _str_list(d["candidate_ids"], "$.candidate_ids", unique=True)
    if not cands:
        raise DecodeError("candidate roster must be non-empty", path="$.candidate_ids")
    snippets = None
    if "snippet_ids" in d:
        snippets = _str_list(d["snippet_ids"], "$.snippet_ids")
    return WindowInput(window_id=_str(d["window_id"], "$.window_id"),
                       intent_id=_str(d["intent_id"], "$.intent_id"),
                       skeleton_id=_str(d["skeleton_id"], "$.skeleton_id"),
                       doc_ids=_str_list(d["doc_ids"], "$.doc_ids", unique=True),
                       candidate_ids=cands, snippet_ids=snippets)


def _decode_doc_meta(d: Any) -> DocMeta:
    d = _obj(d, "$", ("doc_id", "length"))
    length = _int(d["length"], "$.length")
    if length < 0:
        raise DecodeError("length must be >= 0", path="$.length")
    return DocMeta(_str(d["doc_id"], "$.doc_id"), length)


def _decode_window_label(d: Any) -> WindowLabel:
    d = _obj(d, "$", ("window_id", "positive_ids", "split"))
    return WindowLabel(_str(d["window_id"], "$.window_id"),
                       _str_list(d["positive_ids"], "$.positive_ids", unique=True),
                       _enum(d["split"], SPLITS, "$.split"))


def _decode_pair(d: Any) -> PreferencePair:
    d = _obj(d, "$", ("window_id", "better", "worse"), ("intent_id", "reason"))
    better = _str(d["better"], "$.better")
    worse = _str(d["worse"], "$.worse")
    if better == worse:
        raise DecodeError("better and worse must differ", path="$.worse")
    return PreferencePair(window_id=_str(d["window_id"], "$.window_id"), better=better,
                          worse=worse,
                          intent_id=_str(d["intent_id"], "$.intent_id") if "intent_id" in d else None,
                          reason=_str(d["reason"], "$.reason") if "reason" in d else None)


_DECODERS = {
    "trajectory": _decode_trajectory,
    "window_input": _decode_window_input,
    "skeleton": _decode_skeleton,
    "doc_meta": _decode_doc_meta,
    "window_label": _decode_window_label,
    "pair": _decode_pair,
}
RECORD_KINDS = tuple(_DECODERS)


def decode_record(kind: str, text: str, *, line: int | None = None) -> Record:
    """Decode one line of a record file of the given ``kind``."""
    try:
        decoder = _DECODERS[kind]
    except KeyError:
        raise ValueError(f"unknown record kind {kind!r}") from None
    try:
        return decoder(strict_loads(text))
    except DecodeError as exc:
        raise exc.at_line(line) if line is not None else exc


def encode_record(record: Any) -> str:
    return canonical_dumps(record.to_dict())


def iter_records(kind: str, lines: Iterable[str]) -> Iterator[Record]:
    """Decode a JSONL stream; blank lines are skipped, numbering is 1-based."""
    for number, text in enumerate(lines, start=1):
        if text.strip():
            yield decode_record(kind, text, line=number)


# ---------------------------------------------------------------------------
# policy outputs


def _decode_evidence(value: Any, path: str) -> EvidenceRef:
    d = _obj(value, path, ("doc_id", "span", "kind"), ("role",))
    doc = _str(d["doc_id"], f"{path}.doc_id")
    return EvidenceRef(span=parse_span(d["span"], doc, path=f"{path}.span", strict=False),
                       kind=_enum(d["kind"], EVIDENCE_KINDS, f"{path}.kind"),
                       role=_str(d["role"], f"{path}.role") if "role" in d else None)


def _decode_step(value: Any, path: str) -> CertStep:
    d = _obj(value, path, ("step_id", "etype", "matched", "event_id", "evidence"), ("notes",))
    event_id = d["event_id"]
    if event_id is not None:
        _str(event_id, f"{path}.event_id")
    evidence = tuple(_decode_evidence(e, f"{path}.evidence[{i}]")
                     for i, e in enumerate(_list(d["evidence"], f"{path}.evidence")))
    return CertStep(step_id=_str(d["step_id"], f"{path}.step_id"),
                    etype=_enum(d["etype"], STAGES, f"{path}.etype"),
                    matched=_bool(d["matched"], f"{path}.matched"),
                    event_id=event_id, evidence=evidence,
                    notes=_str(d["notes"], f"{path}.notes") if "notes" in d else None)


def policy_output_from_obj(obj: Any) -> PolicyOutput:
    d = _obj(obj, "$", ("window_id", "topk", "certificates"))
    certs = []
    for i, c in enumerate(_list(d["certificates"], "$.certificates")):
        cp = f"$.certificates[{i}]"
        c = _obj(c, cp, ("steps",))
        certs.append(tuple(_decode_step(s, f"{cp}.steps[{j}]")
                           for j, s in enumerate(_list(c["steps"], f"{cp}.steps"))))
    # topk length, uniqueness and membership are validator rules (R2), not decode rules
    return PolicyOutput(window_id=_str(d["window_id"], "$.window_id"),
                        topk=_str_list(d["topk"], "$.topk"), certificates=tuple(certs))


def decode_policy_output(text: str) -> PolicyOutput | ParseFailure:
    """Strictly decode one policy output; failures are returned, never raised."""
    if not isinstance(text, str):
        return ParseFailure("not-parseable", "input is not text")
    try:
        obj = strict_loads(text)
    except DecodeError as exc:
        return ParseFailure("not-parseable", exc.message)
    try:
        return policy_output_from_obj(obj)
    except DecodeError as exc:
        window_id = obj.get("window_id") if isinstance(obj, dict) else None
        return ParseFailure("schema-violation", str(exc),
                            window_id if isinstance(window_id, str) else None)


def encode_policy_output(output: PolicyOutput) -> str:
    return canonical_dumps(output.to_dict())
