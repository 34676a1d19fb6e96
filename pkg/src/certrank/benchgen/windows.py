"""Ranking-window construction from source and predicted event records.

Rosters come from an identifier-only projection of the source records (entity
ids, types and roles, nothing else); trajectories come only from predicted
records.  Positive labels and reference chains are derived afterwards and kept
in their own record families.
"""
from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from ..aligner import AlignParams, align, extract_certificate
from ..records import (
    SPLITS,
    ArgumentMention,
    DecodeError,
    DocMeta,
    Event,
    Skeleton,
    Span,
    Trajectory,
    WindowInput,
    WindowLabel,
    parse_span,
    canonical_dumps,
    sort_events,
    strict_loads,
)
from ..seeding import substream
from .stages import map_stage, normalize_role, primary_stage

log = logging.getLogger(__name__)

CANDIDATE_ROLES = ("Agent", "Target")


@dataclass(frozen=True)
class SourceArgument:
    role: str  # dataset-native role name
    entity_id: str
    span: Span
    entity_type: str = "PER"

    def to_dict(self) -> dict[str, Any]:
        return {"role": self.role, "entity_id": self.entity_id,
                "entity_type": self.entity_type, "span": self.span.to_json()}


@dataclass(frozen=True)
class SourceEvent:
    """An event record before window construction (source or predicted)."""

    event_id: str
    doc_id: str
    etype_raw: str
    trigger: Span
    arguments: tuple[SourceArgument, ...]
    order_index: float
    time: Any = None
    trigger_text: str | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"event_id": self.event_id, "doc_id": self.doc_id,
                               "etype_raw": self.etype_raw}
        if self.trigger_text is not None:
            out["trigger_text"] = self.trigger_text
        if self.time is not None:
            out["time"] = self.time
        out["order_index"] = self.order_index
        out["trigger"] = self.trigger.to_json()
        out["arguments"] = [a.to_dict() for a in self.arguments]
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SourceEvent":
        allowed = {"event_id", "doc_id", "etype_raw", "trigger_text", "time", "order_index",
                   "trigger", "arguments"}
        extra = set(d) - allowed
        if extra:
            raise DecodeError(f"unknown fields {sorted(extra)}")
        try:
            doc = d["doc_id"]
            args = tuple(SourceArgument(a["role"], a["entity_id"], parse_span(a["span"], doc),
                                        a.get("entity_type", "PER")) for a in d["arguments"])
            return cls(d["event_id"], doc, d["etype_raw"], parse_span(d["trigger"], doc), args,
                       d["order_index"], d.get("time"), d.get("trigger_text"))
        except (KeyError, TypeError) as exc:
            raise DecodeError(f"bad source event: {exc}") from None


@dataclass(frozen=True)
class DocInfo:
    doc_id: str
    length: int
    group: str
    split: str

    def to_dict(self) -> dict[str, Any]:
        return {"doc_id": self.doc_id, "length": self.length, "group": self.group,
                "split": self.split}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DocInfo":
        if d.get("split") not in SPLITS:
            raise DecodeError(f"doc {d.get('doc_id')!r}: bad split {d.get('split')!r}")
        return cls(str(d["doc_id"]), int(d["length"]), str(d["group"]), d["split"])


def load_jsonl(lines: Iterable[str]) -> list[Any]:
    out = []
    for n, text in enumerate(lines, start=1):
        if text.strip():
            try:
                out.append(strict_loads(text))
            except DecodeError as exc:
                raise exc.at_line(n) from None
    return out


@dataclass
class WindowBundle:
    window_inputs: list[WindowInput] = field(default_factory=list)
    trajectories: list[Trajectory] = field(default_factory=list)
    labels: list[WindowLabel] = field(default_factory=list)
    audit_refs: list[dict[str, Any]] = field(default_factory=list)
    id_map: list[dict[str, str]] = field(default_factory=list)
    doc_meta: list[DocMeta] = field(default_factory=list)
    doc_splits: dict[str, list[str]] = field(default_factory=dict)
    window_splits: dict[str, list[str]] = field(default_factory=dict)
    dropped: list[dict[str, str]] = field(default_factory=list)


class _IdFactory:
    """Random window-local identifiers, unique across the whole corpus."""

    def __init__(self, seed: int):
        self._rng = substream(seed, "window-local-ids")
        self._used: set[str] = set()

    def new(self, prefix: str) -> str:
        while True:
            token = f"{prefix}_{int(self._rng.integers(0, 16 ** 8)):08x}"
            if token not in self._used:
                self._used.add(token)
                return token


def _to_event(src: SourceEvent, event_id: str, local_ids: Mapping[str, str],
              dataset_flag: str, override, role_table) -> Event:
    args = tuple(ArgumentMention(normalize_role(dataset_flag, a.role, role_table),
                                 local_ids[a.entity_id], a.span) for a in src.arguments)
    hits = map_stage(dataset_flag, src.etype_raw, src.trigger_text, override)
    primary = primary_stage(dataset_flag, src.etype_raw, src.trigger_text, override)
    return Event(event_id=event_id, etype_raw=src.etype_raw, skeleton_hits=tuple(hits),
                 etype_primary=primary, order_index=src.order_index, trigger=src.trigger,
                 arguments=args, time=src.time)


def resolve_roster(src_events: Sequence[SourceEvent], dataset_flag: str,
                   eligible_types: frozenset[str], role_table=None) -> list[str]:
    """Identifier-only projection: role-bearing entities of an eligible type."""
    ids = set()
    for ev in src_events:
        for a in ev.arguments:
            if (a.entity_type in eligible_types
                    and normalize_role(dataset_flag, a.role, role_table) in CANDIDATE_ROLES):
                ids.add(a.entity_id)
    return sorted(ids)


def _resolve_split(docs: Sequence[DocInfo], mode: str) -> tuple[str | None, str]:
    counts = Counter(d.split for d in docs)
    if len(counts) == 1:
        return next(iter(counts)), ""
    if mode == "drop":
        return None, f"documents span splits {sorted(counts)}"
    ranked = counts.most_common()
    if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
        return None, f"no majority split among {dict(counts)}"
    return ranked[0][0], ""


def build_windows(src_events: Sequence[SourceEvent], pred_events: Sequence[SourceEvent],
                  docs: Sequence[DocInfo], skeletons: Mapping[str, Skeleton],
                  intent_of: Mapping[str, str] | Callable[[str], str], seed: int,
                  dataset_flag: str = "synthetic",
                  eligible_types: Iterable[str] = ("PER",),
                  cross_split: str = "repair",
                  override: Mapping[str, Sequence[str]] | None = None,
                  role_table: Mapping[str, str] | None = None,
                  params: AlignParams = AlignParams()) -> WindowBundle:
    """One window per document group.

    Cross-split groups are repaired by keeping the majority split's documents
    (``cross_split="repair"``) or dropped (``"drop"``); a group without a
    strict majority is always dropped.  Skeletons are keyed by intent_id.
    """
    if cross_split not in ("repair", "drop"):
        raise ValueError("cross_split must be 'repair' or 'drop'")
    eligible = frozenset(eligible_types)
    mapper = intent_of if callable(intent_of) else intent_of.__getitem__
    ids = _IdFactory(seed)
    src_by_doc: dict[str, list[SourceEvent]] = defaultdict(list)
    pred_by_doc: dict[str, list[SourceEvent]] = defaultdict(list)
    for ev in src_events:
        src_by_doc[ev.doc_id].append(ev)
    for ev in pred_events:
        pred_by_doc[ev.doc_id].append(ev)
    groups: dict[str, list[DocInfo]] = defaultdict(list)
    for d in docs:
        groups[d.group].append(d)

    out = WindowBundle(doc_splits={s: [] for s in SPLITS}, window_splits={s: [] for s in SPLITS})
    kept_docs: dict[str, DocInfo] = {}
    n = 0
    for q in sorted(groups):
        gdocs = sorted(groups[q], key=lambda d: d.doc_id)
        split, reason = _resolve_split(gdocs, cross_split)
        if split is None:
            log.info("dropping window group %s: %s", q, reason)
            out.dropped.append({"group": q, "reason": reason})
            continue
        gdocs = [d for d in gdocs if d.split == split]
        doc_ids = [d.doc_id for d in gdocs]
        src_w = [e for d in doc_ids for e in src_by_doc.get(d, ())]
        pred_w = [e for d in doc_ids for e in pred_by_doc.get(d, ())]
        roster_src = resolve_roster(src_w, dataset_flag, eligible, role_table)
        if not roster_src:
            reason = "empty candidate roster"
            log.info("dropping window group %s: %s", q, reason)
            out.dropped.append({"group": q, "reason": reason})
            continue
        intent = mapper(q)
        skeleton = skeletons.get(intent)
        if skeleton is None:
            raise KeyError(f"no skeleton for intent {intent!r}")
        n += 1
        wid = f"w_{n:05d}"

        local: dict[str, str] = {}
        for sid in roster_src:
            local[sid] = ids.new("c")
        for ev in src_w + pred_w:
            for a in ev.arguments:
                if a.entity_id not in local:
                    local[a.entity_id] = ids.new("x")
        for sid in sorted(local):
            out.id_map.append({"window_id": wid, "local_id": local[sid], "source_id": sid})

        roster = sorted(local[s] for s in roster_src)
        src_of = {local[s]: s for s in roster_src}
        # event ids are window-local and follow document order
        pred_sorted = sorted(pred_w, key=lambda e: (e.order_index, e.doc_id, e.event_id))
        src_sorted = sorted(src_w, key=lambda e: (e.order_index, e.doc_id, e.event_id))
        pred_ids = {id(e): f"e{i + 1}" for i, e in enumerate(pred_sorted)}
        src_ids = {id(e): f"r{i + 1}" for i, e in enumerate(src_sorted)}

        positives = []
        for cid in roster:
            sid = src_of[cid]
            pred_c = [_to_event(e, pred_ids[id(e)], local, dataset_flag, override, role_table)
                      for e in pred_sorted if any(a.entity_id == sid for a in e.arguments)]
            out.trajectories.append(Trajectory(wid, cid, f"{wid}::{cid}", sort_events(pred_c)))
            src_c = [_to_event(e, src_ids[id(e)], local, dataset_flag, override, role_table)
                     for e in src_sorted if any(a.entity_id == sid for a in e.arguments)]
            ref = Trajectory(wid, cid, f"{wid}::{cid}", sort_events(src_c))
            res = align(skeleton, ref, cid, params)
            st = res.stats
            if (st.hits == len(skeleton.steps) and st.arg_viol_total == 0
                    and st.precedence_violations == 0):
                positives.append(cid)
                cert = extract_certificate(skeleton, ref, res, cid)
                out.audit_refs.append({"window_id": wid, "candidate_id": cid,
                                       "steps": [s.to_dict() for s in cert]})
        out.window_inputs.append(WindowInput(wid, intent, skeleton.skeleton_id, tuple(doc_ids),
                                             tuple(roster)))
        out.labels.append(WindowLabel(wid, tuple(positives), split))
        out.window_splits[split].append(wid)
        for d in gdocs:
            kept_docs[d.doc_id] = d

    for doc_id in sorted(kept_docs):
        d = kept_docs[doc_id]
        out.doc_meta.append(DocMeta(d.doc_id, d.length))
        out.doc_splits[d.split].append(d.doc_id)
    # documents outside any kept window still keep their split assignment
    for d in sorted(docs, key=lambda d: d.doc_id):
        if d.doc_id not in kept_docs and d.doc_id not in out.doc_splits[d.split]:
            out.doc_splits[d.split].append(d.doc_id)
    for s in SPLITS:
        out.doc_splits[s].sort()
    return out


def bundle_files(bundle: WindowBundle, skeletons: Mapping[str, Skeleton]) -> dict[str, str]:
    """Relative path -> text for every record family and split list of a bundle."""
    def jsonl(rows) -> str:
        return "".join(canonical_dumps(r) + "\n" for r in rows)

    files = {
        "window_input.jsonl": jsonl(x.to_dict() for x in bundle.window_inputs),
        "traj_pred.jsonl": jsonl(t.to_dict() for t in bundle.trajectories),
        "skeleton.jsonl": jsonl(skeletons[k].to_dict() for k in sorted(skeletons)),
        "doc_meta.jsonl": jsonl(d.to_dict() for d in bundle.doc_meta),
        "window_label.jsonl": jsonl(x.to_dict() for x in bundle.labels),
        "audit_ref.jsonl": jsonl(bundle.audit_refs),
        "id_map.secret.jsonl": jsonl(bundle.id_map),
    }
    for s in SPLITS:
        files[f"splits/doc_{s}.txt"] = "".join(d + "\n" for d in bundle.doc_splits[s])
        files[f"splits/window_{s}.txt"] = "".join(x + "\n" for x in bundle.window_splits[s])
    return files
