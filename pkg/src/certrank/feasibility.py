"""Deterministic feasibility validator and label-free minor repair.

Rules are evaluated R1 through R7 without short-circuiting so a report lists
every problem in an output.  Violations tied to one certificate carry its slot
index, which lets callers ask whether an individual rank's certificate is
valid even when the output as a whole is not.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any

from .records import (
    ROLES,
    CertStep,
    EvidenceRef,
    Event,
    ParseFailure,
    PolicyOutput,
    WindowContext,
)

RULES = ("R1", "R2", "R3", "R4", "R5", "R6", "R7")
CERT_RULES = frozenset({"R3", "R4", "R5", "R6", "R7"})


@dataclass(frozen=True)
class Violation:
    rule: str
    path: str
    detail: str
    slot: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"rule": self.rule, "path": self.path, "detail": self.detail}


@dataclass(frozen=True)
class ValidationReport:
    feasible: bool
    violations: tuple[Violation, ...]
    k_expected: int
    k_returned: int
    n_certificates: int = 0

    @property
    def rules(self) -> frozenset[str]:
        return frozenset(v.rule for v in self.violations)

    def certificate_valid(self, slot: int) -> bool:
        """Whether the certificate at ``slot`` individually passes R3 to R7."""
        if slot >= self.n_certificates:
            return False
        return not any(v.slot == slot and v.rule in CERT_RULES for v in self.violations)

    def to_dict(self, window_id: str) -> dict[str, Any]:
        return {"window_id": window_id, "feasible": self.feasible,
                "violations": [v.to_dict() for v in self.violations],
                "k_expected": self.k_expected, "k_returned": self.k_returned}


def check_span_bounds(ev: EvidenceRef, ctx: WindowContext) -> str | None:
    """R6 failure detail for one evidence span, or None when it is in bounds."""
    meta = ctx.doc_meta.get(ev.span.doc_id)
    if meta is None:
        return f"no length metadata for {ev.span.doc_id!r}"
    s = ev.span
    if not (0 <= s.start < s.end <= meta.length):
        return f"span [{s.start},{s.end}) outside 0 <= l < r <= {meta.length}"
    return None


def evidence_traces_event(ev: EvidenceRef, event: Event) -> bool:
    """Trigger evidence overlaps the trigger; arg evidence a same-role argument."""
    if ev.kind == "trigger":
        return ev.span.overlaps(event.trigger)
    return any(a.role == ev.role and ev.span.overlaps(a.span) for a in event.arguments)


def _resolve(ctx: WindowContext, candidate_id: str | None, event_id: str | None) -> Event | None:
    if candidate_id is None or event_id is None:
        return None
    traj = ctx.trajectory(candidate_id) if candidate_id in ctx.roster else None
    return traj.event_by_id(event_id) if traj is not None else None


def _evidence_problems(ev: EvidenceRef, ctx: WindowContext, step: CertStep,
                       candidate_id: str | None) -> list[tuple[str, str]]:
    """(rule, detail) pairs for R5, R6, R7 on one evidence entry."""
    problems = []
    doc_ok = ev.span.doc_id in ctx.window.doc_ids
    if not doc_ok:
        problems.append(("R5", f"doc_id {ev.span.doc_id!r} not in window documents"))
    else:
        bound = check_span_bounds(ev, ctx)
        if bound is not None:
            problems.append(("R6", bound))
    if step.matched:
        event = _resolve(ctx, candidate_id, step.event_id)
        if event is not None and not evidence_traces_event(ev, event):
            problems.append(("R7", f"{ev.kind} evidence does not overlap event {step.event_id!r}"))
    return problems


def validate_output(output: PolicyOutput | ParseFailure, ctx: WindowContext,
                    k: int) -> ValidationReport:
    k_w = ctx.k_window(k)
    if isinstance(output, ParseFailure):
        v = Violation("R1", "$", f"{output.reason}: {output.detail}")
        return ValidationReport(False, (v,), k_w, 0, 0)

    found: list[Violation] = []
    add = found.append
    skeleton = ctx.skeleton
    roster = set(ctx.roster)

    # R1: structural types beyond what decoding guarantees
    if output.window_id != ctx.window_id:
        add(Violation("R1", "$.window_id",
                      f"window_id {output.window_id!r} != {ctx.window_id!r}"))
    for j, cert in enumerate(output.certificates):
        for i, step in enumerate(cert):
            for e, ev in enumerate(step.evidence):
                if ev.kind == "arg" and ev.role not in ROLES:
                    add(Violation("R1", f"$.certificates[{j}].steps[{i}].evidence[{e}].role",
                                  f"arg evidence needs a normalized role, got {ev.role!r}", j))

    # R2: roster membership, uniqueness, exact length
    seen: set[str] = set()
    for i, cid in enumerate(output.topk):
        if cid not in roster:
            add(Violation("R2", f"$.topk[{i}]", f"{cid!r} not in roster"))
        if cid in seen:
            add(Violation("R2", f"$.topk[{i}]", f"duplicate id {cid!r}"))
        seen.add(cid)
    if len(output.topk) != k_w:
        add(Violation("R2", "$.topk", f"length {len(output.topk)} != K_w {k_w}"))

    # R3: one certificate per rank, one step per skeleton step
    if len(output.certificates) != len(output.topk):
        add(Violation("R3", "$.certificates",
                      f"{len(output.certificates)} certificates for {len(output.topk)} ids"))
    m = len(skeleton.steps)
    for j, cert in enumerate(output.certificates):
        if len(cert) != m:
            add(Violation("R3", f"$.certificates[{j}].steps",
                          f"{len(cert)} steps, skeleton has {m}", j))

    # R4: step identity, stage label, matched/evidence consistency
    for j, cert in enumerate(output.certificates):
        for i, step in enumerate(cert):
            path = f"$.certificates[{j}].steps[{i}]"
            if i < m:
                want = skeleton.steps[i]
                if step.step_id != want.step_id:
                    add(Violation("R4", f"{path}.step_id",
                                  f"{step.step_id!r} != skeleton {want.step_id!r}", j))
                if step.etype != want.stage:
                    add(Violation("R4", f"{path}.etype",
                                  f"{step.etype!r} != skeleton stage {want.stage!r}", j))
            if step.matched:
                if step.event_id is None:
                    add(Violation("R4", f"{path}.event_id", "matched step has null event_id", j))
                if not step.evidence:
                    add(Violation("R4", f"{path}.evidence", "matched step has no evidence", j))
            else:
                if step.event_id is not None:
                    add(Violation("R4", f"{path}.event_id", "unmatched step has event_id", j))
                if step.evidence:
                    add(Violation("R4", f"{path}.evidence", "unmatched step cites evidence", j))

    # R5-R7 gathered per evidence, then emitted in rule order
    per_rule: dict[str, list[Violation]] = {"R5": [], "R6": [], "R7": []}
    for j, cert in enumerate(output.certificates):
        candidate = output.topk[j] if j < len(output.topk) else None
        for i, step in enumerate(cert):
            path = f"$.certificates[{j}].steps[{i}]"
            if step.matched and step.event_id is not None:
                if candidate is None:
                    per_rule["R7"].append(Violation("R7", path, "no rank-aligned candidate", j))
                elif _resolve(ctx, candidate, step.event_id) is None:
                    per_rule["R7"].append(Violation(
                        "R7", f"{path}.event_id",
                        f"event {step.event_id!r} not in trajectory of {candidate!r}", j))
            for e, ev in enumerate(step.evidence):
                for rule, detail in _evidence_problems(ev, ctx, step, candidate):
                    per_rule[rule].append(Violation(rule, f"{path}.evidence[{e}]", detail, j))
    for rule in ("R5", "R6", "R7"):
        found.extend(per_rule[rule])

    order = {r: i for i, r in enumerate(RULES)}
    found.sort(key=lambda v: order[v.rule])  # stable: keeps path order within a rule
    return ValidationReport(not found, tuple(found), k_w, len(output.topk),
                            len(output.certificates))


@dataclass(frozen=True)
class RepairResult:
    output: PolicyOutput
    repair_count: int
    repairable: bool


def repair_minor(output: PolicyOutput, ctx: WindowContext, k: int) -> RepairResult:
    """Apply deterministic label-free edits; never inserts ids or evidence.

    Each dropped id, dropped certificate, dropped evidence entry and demoted
    step counts as one edit.  Outputs with R1 problems are returned unchanged
    and flagged not repairable, as are outputs that still cannot meet R2 or R3
    after editing.
    """
    report = validate_output(output, ctx, k)
    if "R1" in report.rules:
        return RepairResult(output, 0, False)
    k_w = report.k_expected
    roster = set(ctx.roster)
    edits = 0

    topk: list[str] = []
    certs: list[tuple[CertStep, ...]] = []
    seen: set[str] = set()
    for i, cid in enumerate(output.topk):
        if cid in seen or cid not in roster:
            edits += 1
            continue
        seen.add(cid)
        topk.append(cid)
        if i < len(output.certificates):
            certs.append(output.certificates[i])
    # certificates beyond the id list belong to no rank
    extra = len(output.certificates) - len(output.topk)
    if extra > 0:
        edits += extra
    if len(topk) > k_w:
        edits += len(topk) - k_w
        topk = topk[:k_w]
        certs = certs[:k_w]

    fixed_certs = []
    for j, cert in enumerate(certs):
        candidate = topk[j]
        steps = []
        for step in cert:
            keep = []
            for ev in step.evidence:
                if _evidence_problems(ev, ctx, step, candidate) or (
                        step.matched and _resolve(ctx, candidate, step.event_id) is None):
                    edits += 1
                else:
                    keep.append(ev)
            new = step
            if len(keep) != len(step.evidence):
                new = replace(step, evidence=tuple(keep))
                if step.matched and not keep:
                    new = replace(new, matched=False, event_id=None)
                    edits += 1
            steps.append(new)
        fixed_certs.append(tuple(steps))

    repaired = PolicyOutput(output.window_id, tuple(topk), tuple(fixed_certs))
    ok = len(topk) == k_w and len(fixed_certs) == len(topk)
    return RepairResult(repaired, edits, ok)


def valid_prefix(output: PolicyOutput, ctx: WindowContext, k: int) -> tuple[str, ...]:
    """Longest prefix of distinct roster ids, capped at K_w."""
    roster = set(ctx.roster)
    k_w = ctx.k_window(k)
    prefix: list[str] = []
    for cid in output.topk[:k_w]:
        if cid not in roster or cid in prefix:
            break
        prefix.append(cid)
    return tuple(prefix)


def step_coverage(cert: tuple[CertStep, ...] | None, candidate_id: str,
                  ctx: WindowContext) -> float:
    """Fraction of skeleton steps backed by valid, traceable, stage-compatible evidence.

    A step counts when its certificate entry is matched, cites at least one
    span, every span is in-window and in bounds, the event resolves in the
    candidate's trajectory, every span traces that event, and the event is
    compatible with the step's stage.
    """
    m = len(ctx.skeleton.steps)
    if cert is None or m == 0:
        return 0.0
    by_id = {s.step_id: s for s in cert}
    good = 0
    for sk in ctx.skeleton.steps:
        step = by_id.get(sk.step_id)
        if step is None or not step.matched or not step.evidence:
            continue
        event = _resolve(ctx, candidate_id, step.event_id)
        if event is None or sk.stage not in event.skeleton_hits:
            continue
        if all(ev.span.doc_id in ctx.window.doc_ids and check_span_bounds(ev, ctx) is None
               and evidence_traces_event(ev, event) for ev in step.evidence):
            good += 1
    return good / m
