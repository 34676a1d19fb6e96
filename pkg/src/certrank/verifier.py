"""Label-free evidence-only verifier.

Certificates are stripped of candidate claims and event ids, every bundle is
scored against every roster candidate from the cited spans alone, and a
thresholded maximum-weight matching recovers which candidate each slot's
evidence supports.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .feasibility import check_span_bounds, evidence_traces_event
from .records import Event, EvidenceRef, PolicyOutput, WindowContext

BELOW_THRESHOLD = "below-threshold"
MARGIN_FAIL = "margin-fail"
UNASSIGNED = "unassigned"


@dataclass(frozen=True)
class VerifierConfig:
    alpha_cov: float = 1.0
    alpha_role: float = 0.5
    alpha_trace: float = 1.0
    alpha_prec: float = 0.25
    alpha_bad: float = 0.5
    support_threshold: float = 0.5
    margin: float = 0.1

    def __post_init__(self) -> None:
        for name in ("alpha_cov", "alpha_role", "alpha_trace", "alpha_prec", "alpha_bad"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def unweighted(cls, support_threshold: float = 0.5, margin: float = 0.1) -> "VerifierConfig":
        return cls(1.0, 1.0, 1.0, 1.0, 1.0, support_threshold, margin)

    def to_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("alpha_cov", "alpha_role", "alpha_trace",
                                              "alpha_prec", "alpha_bad", "support_threshold",
                                              "margin")}


@dataclass(frozen=True)
class BundleStep:
    step_id: str
    stage: str
    evidence: tuple[EvidenceRef, ...]


@dataclass(frozen=True)
class StrippedBundle:
    slot_index: int
    steps: tuple[BundleStep, ...]


def strip_bundles(output: PolicyOutput) -> tuple[StrippedBundle, ...]:
    """One bundle per certificate slot, without candidate ids or event ids."""
    return tuple(
        StrippedBundle(j, tuple(BundleStep(s.step_id, s.etype, s.evidence) for s in cert))
        for j, cert in enumerate(output.certificates))


@dataclass(frozen=True)
class SupportScore:
    total: float
    step_cov: float
    role_sat: float
    trace: float
    prec: float
    bad_span: float

    def components(self) -> dict[str, float]:
        return {"step_cov": self.step_cov, "role_sat": self.role_sat, "trace": self.trace,
                "prec": self.prec, "bad_span": self.bad_span}


def _span_valid(ev: EvidenceRef, ctx: WindowContext) -> bool:
    return ev.span.doc_id in ctx.window.doc_ids and check_span_bounds(ev, ctx) is None


def _evidence_key(ev: EvidenceRef) -> tuple:
    return (ev.span.doc_id, ev.span.start, ev.span.end, ev.kind,
            ev.role if ev.kind == "arg" else None)


def support_score(bundle: StrippedBundle, candidate_id: str, ctx: WindowContext,
                  config: VerifierConfig = VerifierConfig()) -> SupportScore:
    skeleton = ctx.skeleton
    traj = ctx.trajectory(candidate_id)
    events: Sequence[Event] = traj.events if traj is not None else ()
    stage_of = {s.step_id: s for s in skeleton.steps}

    n_cited = n_traced = 0
    bad = 0.0
    seen: set[tuple] = set()
    covered: dict[str, int] = {}  # step_id -> trajectory position of first compatible trace
    role_total = role_ok = 0

    for bstep in bundle.steps:
        sk = stage_of.get(bstep.step_id)
        if bstep.evidence and sk is not None:
            role_total += len(sk.required_roles)
        supported_roles: set[str] = set()
        for ev in bstep.evidence:
            n_cited += 1
            key = _evidence_key(ev)
            if key in seen:
                bad += 1
            seen.add(key)
            if not _span_valid(ev, ctx):
                bad += 1
                continue
            traced = [p for p, e in enumerate(events) if evidence_traces_event(ev, e)]
            if not traced:
                bad += 1
                continue
            n_traced += 1
            compat = ([p for p in traced if sk.stage in events[p].skeleton_hits]
                      if sk is not None else [])
            if not compat:
                bad += 1
                continue
            covered.setdefault(sk.step_id, compat[0])
            if ev.kind == "arg" and ev.role in sk.required_roles:
                for p in compat:
                    if any(a.role == ev.role and ev.span.overlaps(a.span)
                           and (ev.role != "Agent" or a.entity_id == candidate_id)
                           for a in events[p].arguments):
                        supported_roles.add(ev.role)
                        break
        role_ok += len(supported_roles)

    m = len(skeleton.steps)
    step_cov = len(covered) / m if m else 0.0
    role_sat = role_ok / role_total if role_total else 0.0
    trace = n_traced / n_cited if n_cited else 0.0
    edges = [(a, b) for a, b in skeleton.precedence if a in covered and b in covered]
    prec = (sum(covered[a] <= covered[b] for a, b in edges) / len(edges)) if edges else 0.0
    total = (config.alpha_cov * step_cov + config.alpha_role * role_sat
             + config.alpha_trace * trace + config.alpha_prec * prec - config.alpha_bad * bad)
    return SupportScore(total, step_cov, role_sat, trace, prec, bad)


def max_weight_assignment(weights) -> tuple[float, tuple[int | None, ...]]:
    """Maximum-weight assignment of rows to distinct columns.

    Every row is assigned when columns suffice; otherwise exactly
    ``n_cols`` rows are.  Among optimal assignments the lexicographically
    smallest (row order, then column order) is returned, so ties never depend
    on anything but position.  Returns ``(total, column per row or None)``.
    """
    w = np.asarray(weights, dtype=float)
    n_rows, n_cols = w.shape
    if n_rows == 0 or n_cols == 0:
        return 0.0, (None,) * n_rows
    big = 1.0 + 2.0 * max(n_rows, n_cols) * (float(np.max(np.abs(w))) + 1.0)
    pad = max(0, n_rows - n_cols)
    full = np.hstack([w, np.full((n_rows, pad), -big)]) if pad else w.copy()

    def best(sub_rows, sub_cols) -> float:
        if not sub_rows:
            return 0.0
        m = full[np.ix_(sub_rows, sub_cols)]
        r, c = linear_sum_assignment(m, maximize=True)
        return float(m[r, c].sum())

    rows = list(range(n_rows))
    cols = list(range(full.shape[1]))
    target = best(rows, cols)
    tol = 1e-9 * (1.0 + abs(target))
    chosen: list[int | None] = [None] * n_rows
    fixed = 0.0
    for i in range(n_rows):
        rest_rows = rows[i + 1:]
        for j in sorted(cols):
            value = fixed + full[i, j] + best(rest_rows, [c for c in cols if c != j])
            if value >= target - tol:
                chosen[i] = j
                fixed += full[i, j]
                cols.remove(j)
                break
    total = sum(w[i, j] for i, j in enumerate(chosen) if j is not None and j < n_cols)
    return float(total), tuple(j if j is not None and j < n_cols else None for j in chosen)


@dataclass(frozen=True)
class Reconstruction:
    roster: tuple[str, ...]
    recovered: tuple[str | None, ...]
    reasons: tuple[str | None, ...]
    scores: np.ndarray
    components: tuple[tuple[SupportScore, ...], ...]
    assignment_total: float

    def to_dict(self, window_id: str) -> dict[str, Any]:
        return {
            "window_id": window_id,
            "roster": list(self.roster),
            "scores": [[float(x) for x in row] for row in self.scores],
            "slots": [{"slot": j, "recovered": r, "reason": why}
                      for j, (r, why) in enumerate(zip(self.recovered, self.reasons))],
            "assignment_total": self.assignment_total,
        }


def assign_from_scores(scores, config: VerifierConfig = VerifierConfig()
                       ) -> tuple[tuple[int | None, ...], tuple[str | None, ...], float]:
    """Threshold, margin and matching over a bundles x candidates score matrix.

    Returns the recovered column per bundle (or None), the failure reason per
    bundle, and the summed score of the assigned cells.
    """
    scores = np.asarray(scores, dtype=float)
    n_bundles, n_cand = scores.shape
    reasons: list[str | None] = [None] * n_bundles
    eligible = []
    for b in range(n_bundles):
        row = np.sort(scores[b])[::-1]
        top = row[0] if n_cand else -np.inf
        second = row[1] if n_cand > 1 else -np.inf
        if top < config.support_threshold:
            reasons[b] = BELOW_THRESHOLD
        elif top - second < config.margin:
            reasons[b] = MARGIN_FAIL
        else:
            eligible.append(b)

    recovered: list[int | None] = [None] * n_bundles
    total = 0.0
    if eligible:
        sub = scores[eligible]
        big = 1.0 + 2.0 * (len(eligible) + n_cand) * (float(np.max(np.abs(sub))) + 1.0)
        allowed = np.where(sub >= config.support_threshold, sub, -big)
        # one zero-weight dummy column per bundle lets a bundle stay unassigned
        padded = np.hstack([allowed, np.zeros((len(eligible), len(eligible)))])
        _, cols = max_weight_assignment(padded)
        for row, (b, j) in enumerate(zip(eligible, cols)):
            if j is not None and j < n_cand and sub[row, j] >= config.support_threshold:
                recovered[b] = j
                total += float(scores[b, j])
            else:
                reasons[b] = UNASSIGNED
    return tuple(recovered), tuple(reasons), total


def reconstruct(bundles: Sequence[StrippedBundle], ctx: WindowContext,
                config: VerifierConfig = VerifierConfig()) -> Reconstruction:
    roster = ctx.roster
    comps = tuple(tuple(support_score(b, c, ctx, config) for c in roster) for b in bundles)
    scores = np.array([[s.total for s in row] for row in comps], dtype=float).reshape(
        len(bundles), len(roster))
    cols, reasons, total = assign_from_scores(scores, config)
    recovered = tuple(roster[j] if j is not None else None for j in cols)
    return Reconstruction(tuple(roster), recovered, reasons, scores, comps, total)


@dataclass(frozen=True)
class CycleResult:
    slot_wise: float
    set_overlap: float
    rank_prefix: float
    slot_recovered: tuple[bool, ...]


def cycle_scores(output: PolicyOutput, reconstruction: Reconstruction, k_w: int) -> CycleResult:
    if k_w <= 0:
        return CycleResult(0.0, 0.0, 0.0, ())
    claimed = output.topk[:k_w]
    hits = []
    for j in range(k_w):
        rec = reconstruction.recovered[j] if j < len(reconstruction.recovered) else None
        hits.append(j < len(claimed) and rec is not None and rec == claimed[j])
    recovered_set = {r for r in reconstruction.recovered[:k_w] if r is not None}
    overlap = len(set(claimed) & recovered_set) / k_w
    prefix = 0
    while prefix < k_w and hits[prefix]:
        prefix += 1
    return CycleResult(sum(hits) / k_w, overlap, prefix / k_w, tuple(hits))


def cycle_reward(output: PolicyOutput, reconstruction: Reconstruction, k_w: int) -> float:
    """Slot-wise agreement between recovered and claimed candidates."""
    return cycle_scores(output, reconstruction, k_w).slot_wise


def verify_output(output: PolicyOutput, ctx: WindowContext, k: int,
                  config: VerifierConfig = VerifierConfig()) -> tuple[Reconstruction, CycleResult]:
    rec = reconstruct(strip_bundles(output), ctx, config)
    return rec, cycle_scores(output, rec, ctx.k_window(k))
