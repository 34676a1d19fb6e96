"""Seeded synthetic corpus standing in for non-redistributable raw text.

Each window is a small cluster of documents.  Planted positives carry a
complete, correctly ordered chain in which they are the Agent of every step.
Distractors share the documents and event types but break at least one of
stage coverage, role identity or order:

* ``partial``: some steps, always including one Agent-bearing step, are absent;
* ``role``: the candidate is only ever the Target, another entity acts;
* ``order``: the chain's timestamps run backwards;
* ``victim``: no own chain, the candidate only appears as a Target in other
  candidates' chains.

Predicted records are noisy copies of the source records (event drop, role
corruption, time jitter).  Noise draws come from their own random substream,
so the corpus structure for a seed does not depend on the noise rates.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from typing import Any, Sequence

import numpy as np

from ..records import SPLITS, Skeleton, SkeletonStep, Span, canonical_dumps
from ..seeding import substream
from .stages import map_stage
from .windows import (
    DocInfo,
    SourceArgument,
    SourceEvent,
    WindowBundle,
    build_windows,
    bundle_files,
)


def jsonl_text(rows) -> str:
    return "".join(canonical_dumps(r) + "\n" for r in rows)

STAGE_TYPES: dict[str, tuple[tuple[str, tuple[str, ...]], ...]] = {
    "PREP": (("Arranging", ("planned", "arranged", "prepared")),
             ("Preparing", ("readied", "gathered"))),
    "PROBE": (("Know", ("reported", "learned")),
              ("Statement", ("said", "warned")),
              ("Reporting", ("according",))),
    "EXECUTE": (("Attack", ("attack", "struck")),
                ("Hostile_encounter", ("fought", "battle")),
                ("Destroying", ("destroyed",))),
    "OUTCOME": (("Transaction", ("paid", "sold")),
                ("Process_end", ("ended",)),
                ("Commerce_buy", ("bought",))),
}
RAW_ROLES = {
    "Agent": ("attacker", "speaker", "buyer", "sender", "mover"),
    "Target": ("victim", "recipient", "target", "object"),
    "Context": ("place", "instrument", "origin"),
}
SKELETON_TEMPLATES = (
    (("s1", "PREP", ("Agent",)), ("s2", "PROBE", ("Agent",)),
     ("s3", "EXECUTE", ("Agent", "Target")), ("s4", "OUTCOME", ("Agent",))),
    (("s1", "PREP", ("Agent",)), ("s2", "EXECUTE", ("Agent", "Target")),
     ("s3", "OUTCOME", ())),
    (("s1", "PROBE", ("Agent",)), ("s2", "EXECUTE", ("Agent", "Target")),
     ("s3", "OUTCOME", ("Target",))),
)
DISTRACTOR_KINDS = ("partial", "role", "order", "victim")
BASE_DATE = date(2021, 1, 1)


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_intents: int = 3
    n_windows: int = 200
    roster_size: int = 10
    roster_size_max: int | None = None
    positives_per_window: int = 1
    docs_per_window: int = 2
    drop_rate: float = 0.0
    role_corruption: float = 0.0
    time_jitter: float = 0.0
    doc_padding: tuple[int, int] = (20, 80)
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    entity_reuse: float = 0.0
    cross_split_rate: float = 0.0

    def validate(self) -> None:
        if self.n_intents < 1 or self.n_windows < 0 or self.docs_per_window < 1:
            raise SynthConfigError("n_intents and docs_per_window must be >= 1")
        hi = self.roster_size_max if self.roster_size_max is not None else self.roster_size
        if self.roster_size < 1 or hi < self.roster_size:
            raise SynthConfigError("roster size range must satisfy 1 <= min <= max")
        if self.positives_per_window < 0 or self.positives_per_window > self.roster_size:
            raise SynthConfigError(
                f"positives_per_window {self.positives_per_window} exceeds roster size "
                f"{self.roster_size}")
        for name in ("drop_rate", "role_corruption", "entity_reuse", "cross_split_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SynthConfigError(f"{name} must lie in [0, 1]")
        if self.time_jitter < 0:
            raise SynthConfigError("time_jitter must be >= 0")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1) > 1e-9 \
                or min(self.split_fractions) < 0:
            raise SynthConfigError("split_fractions must be three non-negatives summing to 1")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["doc_padding"] = list(self.doc_padding)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise SynthConfigError(f"unknown synth config keys {sorted(extra)}")
        d = dict(d)
        for key in ("doc_padding", "split_fractions"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def make_skeletons(n_intents: int) -> dict[str, Skeleton]:
    out = {}
    for i in range(n_intents):
        tmpl = SKELETON_TEMPLATES[i % len(SKELETON_TEMPLATES)]
        steps = tuple(SkeletonStep(sid, stage, roles) for sid, stage, roles in tmpl)
        edges = tuple((a.step_id, b.step_id) for a, b in zip(steps, steps[1:]))
        intent = f"intent_{i:02d}"
        out[intent] = Skeleton(f"sk_{i:02d}", intent, steps, edges)
    return out


@dataclass
class _Planned:
    stage: str
    day: int
    agent: str | None
    target: str | None
    context: str | None
    owner: str


@dataclass
class SynthCorpus:
    config: SynthConfig
    docs: list[DocInfo]
    src_events: list[SourceEvent]
    pred_events: list[SourceEvent]
    skeletons: dict[str, Skeleton]
    intent_map: dict[str, str]
    windows: WindowBundle
    kinds: dict[str, str] = field(default_factory=dict)  # source entity id -> role kind

    def files(self) -> dict[str, str]:
        """Relative path -> file content for the whole bundle."""
        files = bundle_files(self.windows, self.skeletons)
        files.update({
            "doc_index.jsonl": jsonl_text(d.to_dict() for d in self.docs),
            "src_events.jsonl": jsonl_text(e.to_dict() for e in self.src_events),
            "pred_events.jsonl": jsonl_text(e.to_dict() for e in self.pred_events),
            "intent_map.json": canonical_dumps(self.intent_map) + "\n",
            "synth_config.json": canonical_dumps(self.config.to_dict()) + "\n",
        })
        return dict(sorted(files.items()))


def _iso(day: int) -> str:
    return (BASE_DATE + timedelta(days=int(day))).isoformat()


def _assign_splits(n: int, fractions: Sequence[float], seed: int) -> list[str]:
    rng = substream(seed, "splits")
    order = rng.permutation(n)
    cuts = np.floor(np.cumsum(fractions) * n + 1e-9).astype(int)
    labels = [""] * n
    for rank, w in enumerate(order):
        labels[int(w)] = SPLITS[int(np.searchsorted(cuts, rank, side="right"))]
    return labels


class _Ids:
    def __init__(self):
        self.counts: dict[str, int] = {}

    def new(self, prefix: str) -> str:
        n = self.counts.get(prefix, 0) + 1
        self.counts[prefix] = n
        return f"{prefix}_{n:05d}"


def _plan_window(rng: np.random.Generator, skeleton: Skeleton, candidates: list[str],
                 n_pos: int, ids: _Ids, kinds_out: dict[str, str]) -> list[_Planned]:
    steps = skeleton.steps
    m = len(steps)
    distractors = candidates[n_pos:]
    start = int(rng.integers(0, len(DISTRACTOR_KINDS)))
    kind = {c: DISTRACTOR_KINDS[(start + i) % len(DISTRACTOR_KINDS)]
            for i, c in enumerate(distractors)}
    for c in candidates[:n_pos]:
        kind[c] = "positive"

    def chain_days() -> list[int]:
        day = int(rng.integers(0, 30))
        days = []
        for _ in range(m):
            day += int(rng.integers(1, 6))
            days.append(day)
        return days

    planned: list[_Planned] = []
    for c in candidates:
        k = kind[c]
        if k == "victim":
            continue
        days = chain_days()
        keep = list(range(m))
        if k == "partial":
            agent_steps = [i for i, s in enumerate(steps) if "Agent" in s.required_roles]
            must_drop = int(rng.choice(agent_steps))
            keep = [i for i in keep if i != must_drop and rng.random() >= 0.3]
            if not keep:
                keep = [int(rng.choice([i for i in range(m) if i != must_drop]))] if m > 1 else []
            if not keep:
                kind[c] = "victim"
                continue
        if k == "order":
            days = days[::-1]
        for i in keep:
            s = steps[i]
            if k == "role":
                agent, target = ids.new("ORG"), c
            else:
                agent, target = c, None
            planned.append(_Planned(s.stage, days[i], agent, target,
                                    ids.new("LOC") if rng.random() < 0.5 else None, c))

    # Target fillers come from distractors; victims are placed first
    victims = [c for c in distractors if kind[c] == "victim"]
    slots = [p for p in planned if p.target is None and any(
        s.stage == p.stage and "Target" in s.required_roles for s in steps)]
    optional = [p for p in planned if p.target is None and p not in slots]
    rng.shuffle(slots)
    for p in slots:
        pool = victims if victims else [d for d in distractors if d != p.owner]
        if pool:
            p.target = victims.pop(0) if victims else str(rng.choice(pool))
    for p in optional:
        if rng.random() < 0.5:
            pool = victims if victims else [d for d in distractors if d != p.owner]
            if pool:
                p.target = victims.pop(0) if victims else str(rng.choice(pool))
    for v in victims:
        # nowhere to stand as a Target: fall back to a one-step partial chain
        kind[v] = "partial"
        s = next((s for s in steps if "Agent" not in s.required_roles), steps[-1])
        planned.append(_Planned(s.stage, int(rng.integers(0, 60)), v, None, None, v))
    kinds_out.update(kind)
    return planned


def synthesize_corpus(config: SynthConfig) -> SynthCorpus:
    config.validate()
    seed = config.seed
    skeletons = make_skeletons(config.n_intents)
    intents = sorted(skeletons)
    splits = _assign_splits(config.n_windows, config.split_fractions, seed)
    ids = _Ids()
    people: list[str] = []
    docs: list[DocInfo] = []
    src: list[SourceEvent] = []
    pred: list[SourceEvent] = []
    intent_map: dict[str, str] = {}
    kinds: dict[str, str] = {}

    for w in range(config.n_windows):
        rng = substream(seed, f"window-{w}")
        noise = substream(seed, f"noise-{w}")
        group = f"g_{w:05d}"
        intent = intents[int(rng.integers(0, len(intents)))]
        intent_map[group] = intent
        skeleton = skeletons[intent]
        hi = config.roster_size_max or config.roster_size
        size = int(rng.integers(config.roster_size, hi + 1))
        n_pos = min(config.positives_per_window, size)

        candidates: list[str] = []
        while len(candidates) < size:
            if people and rng.random() < config.entity_reuse:
                pick = people[int(rng.integers(0, len(people)))]
                if pick in candidates:
                    continue
            else:
                pick = ids.new("P")
                people.append(pick)
            candidates.append(pick)

        planned = _plan_window(rng, skeleton, candidates, n_pos, ids, kinds)
        doc_ids = [f"d_{w:05d}_{j}" for j in range(config.docs_per_window)]
        extra_doc = None
        if config.cross_split_rate and rng.random() < config.cross_split_rate:
            extra_doc = f"d_{w:05d}_x"
        all_docs = doc_ids + ([extra_doc] if extra_doc else [])

        # document-local layout of non-overlapping spans
        cursor = {d: int(rng.integers(0, 10)) for d in all_docs}

        def take(doc: str, length: int) -> Span:
            start = cursor[doc] + int(rng.integers(1, 8))
            cursor[doc] = start + length
            return Span(doc, start, start + length)

        planned.sort(key=lambda p: p.day)
        events: list[tuple[SourceEvent, int]] = []
        for n, p in enumerate(planned):
            doc = doc_ids[int(rng.integers(0, len(doc_ids)))]
            if extra_doc and n == len(planned) - 1:
                doc = extra_doc
            etype, triggers = STAGE_TYPES[p.stage][int(rng.integers(0, len(STAGE_TYPES[p.stage])))]
            trig_text = triggers[int(rng.integers(0, len(triggers)))]
            assert p.stage in map_stage("synthetic", etype, trig_text)
            trig = take(doc, len(trig_text))
            args = []
            for role, ent in (("Agent", p.agent), ("Target", p.target), ("Context", p.context)):
                if ent is None:
                    continue
                raw = RAW_ROLES[role][int(rng.integers(0, len(RAW_ROLES[role])))]
                etype_ent = "PER" if ent.startswith("P_") else ent.split("_")[0]
                args.append(SourceArgument(raw, ent, take(doc, int(rng.integers(4, 12))),
                                           etype_ent))
            events.append((SourceEvent(f"s{w:05d}_{n}", doc, etype, trig, tuple(args), n,
                                       _iso(p.day), trig_text), p.day))

        for d in all_docs:
            pad = int(rng.integers(config.doc_padding[0], config.doc_padding[1] + 1))
            split = splits[w]
            if d == extra_doc:
                split = SPLITS[(SPLITS.index(split) + 1) % len(SPLITS)]
            docs.append(DocInfo(d, cursor[d] + pad, group, split))

        for ev, day in events:
            src.append(ev)
            if noise.random() < config.drop_rate:
                continue
            new_args = []
            for a in ev.arguments:
                if noise.random() < config.role_corruption:
                    a = SourceArgument(RAW_ROLES["Context"][0], a.entity_id, a.span, a.entity_type)
                new_args.append(a)
            shift = int(round(noise.normal(0.0, config.time_jitter))) if config.time_jitter else 0
            pred.append(SourceEvent("p" + ev.event_id[1:], ev.doc_id, ev.etype_raw, ev.trigger,
                                    tuple(new_args), ev.order_index, _iso(day + shift),
                                    ev.trigger_text))

    bundle = build_windows(src, pred, docs, skeletons, intent_map, seed)
    return SynthCorpus(config, docs, src, pred, skeletons, intent_map, bundle, kinds)
