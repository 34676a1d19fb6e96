"""Ordinary ranking metrics, certified metrics and evidence audit metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .aligner import role_terms
from .feasibility import (
    ValidationReport,
    check_span_bounds,
    step_coverage,
    valid_prefix,
    validate_output,
)
from .records import (
    Event,
    EvidenceRef,
    ParseFailure,
    PolicyOutput,
    SkeletonStep,
    WindowContext,
    WindowLabel,
)
from .verifier import VerifierConfig, verify_output

DEFAULT_K = 10
DEFAULT_TAU_OV = 0.5


def _discount(rank: int) -> float:
    """1 / log2(rank + 1) for 1-based ranks."""
    return 1.0 / math.log2(rank + 1)


def ideal_dcg(n_positive: int, k: int) -> float:
    return sum(_discount(i) for i in range(1, min(n_positive, k) + 1))


def ranking_metrics(ranked: Sequence[str], positives: Iterable[str], k: int) -> dict[str, float]:
    """Hit@k, MAP@k (normalized by min(|P|, k)) and NDCG@k with binary gains."""
    pos = set(positives)
    top = list(ranked)[:k]
    if not pos or k <= 0:
        return {"hit": 0.0, "map": 0.0, "ndcg": 0.0}
    rel = [c in pos for c in top]
    hits = 0
    precision_sum = 0.0
    for i, r in enumerate(rel, start=1):
        if r:
            hits += 1
            precision_sum += hits / i
    dcg = sum(_discount(i) for i, r in enumerate(rel, start=1) if r)
    idcg = ideal_dcg(len(pos), k)
    return {"hit": float(any(rel)), "map": precision_sum / min(len(pos), k),
            "ndcg": dcg / idcg if idcg > 0 else 0.0}


def certified_ndcg(relevance: Sequence[bool], z: Sequence[bool], n_positive: int, k: int) -> float:
    """DCG with every gain masked by z, over the ordinary ideal DCG."""
    idcg = ideal_dcg(n_positive, k)
    if idcg <= 0:
        return 0.0
    cdcg = sum(_discount(i) for i, (r, ok) in enumerate(zip(relevance[:k], z[:k]), start=1)
               if r and ok)
    return cdcg / idcg


def overlap_ratio(cited: EvidenceRef | Any, target) -> float:
    span = cited.span if isinstance(cited, EvidenceRef) else cited
    return span.intersection(target) / span.length if span.length > 0 else 0.0


def map_span_to_event(ev: EvidenceRef, events: Sequence[Event],
                      tau_ov: float) -> tuple[int, str] | None:
    """Map a cited span to an event: trigger overlap first, then same-role arguments.

    Returns ``(event position, "trigger" | "arg")`` for the best ratio above
    ``tau_ov`` (earliest event on ties), or None.
    """
    best, best_ratio = None, tau_ov
    for p, e in enumerate(events):
        r = overlap_ratio(ev, e.trigger)
        if r > best_ratio:
            best, best_ratio = (p, "trigger"), r
    if best is not None:
        return best
    best_ratio = tau_ov
    for p, e in enumerate(events):
        for a in e.arguments:
            if ev.kind == "arg" and a.role != ev.role:
                continue
            r = overlap_ratio(ev, a.span)
            if r > best_ratio:
                best, best_ratio = (p, "arg"), r
    return best


@dataclass
class WindowEval:
    window_id: str
    k_w: int
    parse_ok: bool
    feasible: bool
    ranked: tuple[str, ...]
    relevance: tuple[bool, ...]
    z: tuple[bool, ...]
    n_positive: int
    n_positive_labeled: int
    hit: float = 0.0
    map: float = 0.0
    ndcg: float = 0.0
    cert_ndcg: float = 0.0
    evid_cons_slot: float = 0.0
    evid_cons_set: float = 0.0
    audited: bool = False
    certs_returned: int = 0
    certs_span_valid: int = 0
    step_coverage: float = 0.0
    spans_cited: int = 0
    spans_faithful: int = 0
    reextract_pass: int = 0
    violations: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "window_id": self.window_id, "k_w": self.k_w, "parse_ok": self.parse_ok,
            "feasible": self.feasible, "ranked": list(self.ranked),
            "relevance": [int(r) for r in self.relevance], "z": [int(x) for x in self.z],
            "n_positive": self.n_positive, "hit": self.hit, "map": self.map,
            "ndcg": self.ndcg, "cert_ndcg": self.cert_ndcg,
            "evid_cons_slot": self.evid_cons_slot, "evid_cons_set": self.evid_cons_set,
            "audited": self.audited, "certs_returned": self.certs_returned,
            "certs_span_valid": self.certs_span_valid, "step_coverage": self.step_coverage,
            "spans_cited": self.spans_cited, "spans_faithful": self.spans_faithful,
            "violations": list(self.violations),
        }


def _span_ok(ev: EvidenceRef, ctx: WindowContext) -> bool:
    return ev.span.doc_id in ctx.window.doc_ids and check_span_bounds(ev, ctx) is None


def _faithful(ev: EvidenceRef, sk: SkeletonStep, candidate_id: str,
              ctx: WindowContext, tau_ov: float) -> bool:
    """Span maps to an event of the candidate that is consistent with the step."""
    if not _span_ok(ev, ctx):
        return False
    traj = ctx.trajectory(candidate_id)
    events = traj.events if traj is not None else ()
    hit = map_span_to_event(ev, events, tau_ov)
    if hit is None:
        return False
    event = events[hit[0]]
    if sk.stage not in event.skeleton_hits:
        return False
    sat, viol = role_terms(sk, event, candidate_id)
    return sat == 1.0 and viol == 0


def evaluate_window(output: PolicyOutput | ParseFailure | None, ctx: WindowContext,
                    label: WindowLabel | None, k: int = DEFAULT_K,
                    vcfg: VerifierConfig = VerifierConfig(),
                    tau_ov: float = DEFAULT_TAU_OV,
                    reextract: Mapping[tuple, bool] | None = None) -> WindowEval:
    """Evaluate one window's output.  A missing output counts as unparseable."""
    if output is None:
        output = ParseFailure("not-parseable", "no output for window", ctx.window_id)
    k_w = ctx.k_window(k)
    labeled = set(label.positive_ids) if label is not None else set()
    positives = labeled & set(ctx.roster)
    report: ValidationReport = validate_output(output, ctx, k)
    parse_ok = not isinstance(output, ParseFailure)
    ev = WindowEval(ctx.window_id, k_w, parse_ok, report.feasible, (), (), (),
                    len(positives), len(labeled),
                    violations=tuple(sorted(report.rules)))
    if not parse_ok:
        return ev

    if not ({"R1", "R2"} & report.rules):
        ranked = output.topk
        rec, cyc = verify_output(output, ctx, k, vcfg)
        ev.ranked = tuple(ranked)
        ev.relevance = tuple(c in positives for c in ranked)
        ev.z = tuple(report.certificate_valid(j) and cyc.slot_recovered[j]
                     for j in range(len(ranked)))
        rm = ranking_metrics(ranked, positives, k_w)
        ev.hit, ev.map, ev.ndcg = rm["hit"], rm["map"], rm["ndcg"]
        ev.cert_ndcg = certified_ndcg(ev.relevance, ev.z, len(positives), k_w)
        ev.evid_cons_slot, ev.evid_cons_set = cyc.slot_wise, cyc.set_overlap

    # audit metrics over the certificates of the valid prefix
    prefix = valid_prefix(output, ctx, k)
    if not prefix:
        return ev
    ev.audited = True
    covs = []
    for j, cid in enumerate(prefix):
        ev.certs_returned += 1
        cert = output.certificates[j] if j < len(output.certificates) else None
        if cert is None:
            covs.append(0.0)
            continue
        spans = [(s, e_idx, e) for s in cert for e_idx, e in enumerate(s.evidence)]
        if all(_span_ok(e, ctx) for _, _, e in spans):
            ev.certs_span_valid += 1
        covs.append(step_coverage(cert, cid, ctx))
        steps_by_id = {s.step_id: s for s in ctx.skeleton.steps}
        for step, e_idx, e in spans:
            ev.spans_cited += 1
            sk = steps_by_id.get(step.step_id)
            if sk is not None and _faithful(e, sk, cid, ctx, tau_ov):
                ev.spans_faithful += 1
            if reextract is not None and reextract.get((ctx.window_id, j, step.step_id, e_idx)):
                ev.reextract_pass += 1
    ev.step_coverage = float(np.mean(covs)) if covs else 0.0
    return ev


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass
class MetricsReport:
    windows: list[WindowEval]
    summary: dict[str, float] = field(default_factory=dict)

    def summary_tsv(self) -> str:
        keys = list(self.summary)
        return "\t".join(keys) + "\n" + "\t".join(_fmt(self.summary[k]) for k in keys) + "\n"


def _fmt(v: float) -> str:
    return str(v) if isinstance(v, int) else f"{v:.6f}"


def summarize(evals: Sequence[WindowEval], with_reextract: bool = False) -> dict[str, float]:
    n = len(evals)
    audited = [e for e in evals if e.audited]
    out: dict[str, float] = {"n_windows": n}
    for key in ("hit", "map", "ndcg", "cert_ndcg", "evid_cons_slot", "evid_cons_set"):
        out[key] = _ratio(sum(getattr(e, key) for e in evals), n)
    out["parse_rate"] = _ratio(sum(e.parse_ok for e in evals), n)
    out["feasible_rate"] = _ratio(sum(e.feasible for e in evals), n)
    out["valid_span"] = _ratio(sum(e.certs_span_valid for e in audited),
                               sum(e.certs_returned for e in audited))
    out["step_coverage"] = _ratio(sum(e.step_coverage for e in audited), len(audited))
    out["faithfulness"] = _ratio(sum(e.spans_faithful for e in audited),
                                 sum(e.spans_cited for e in audited))
    if with_reextract:
        out["reextract_faithfulness"] = _ratio(sum(e.reextract_pass for e in audited),
                                               sum(e.spans_cited for e in audited))
    labeled = [e for e in evals if e.n_positive_labeled > 0]
    out["roster_positive_recall"] = _ratio(sum(e.n_positive / e.n_positive_labeled
                                               for e in labeled), len(labeled))
    out["n_zero_positive"] = sum(1 for e in evals if e.n_positive == 0)
    out["n_audited"] = len(audited)
    return out


def evaluate(outputs: Mapping[str, PolicyOutput | ParseFailure],
             contexts: Mapping[str, WindowContext], labels: Mapping[str, WindowLabel],
             k: int = DEFAULT_K, vcfg: VerifierConfig = VerifierConfig(),
             tau_ov: float = DEFAULT_TAU_OV,
             reextract: Mapping[tuple, bool] | None = None) -> MetricsReport:
    """Evaluate every window of ``contexts`` in window_id order."""
    evals = [evaluate_window(outputs.get(w), contexts[w], labels.get(w), k, vcfg, tau_ov,
                             reextract)
             for w in sorted(contexts)]
    return MetricsReport(evals, summarize(evals, with_reextract=reextract is not None))


def audit_metrics(outputs, contexts, k: int = DEFAULT_K,
                  tau_ov: float = DEFAULT_TAU_OV) -> dict[str, float]:
    rep = evaluate(outputs, contexts, {}, k, tau_ov=tau_ov)
    keys = ("parse_rate", "feasible_rate", "valid_span", "step_coverage", "faithfulness")
    return {key: rep.summary[key] for key in keys}


def paired_bootstrap(a: Sequence[float], b: Sequence[float], n_resamples: int = 1000,
                     seed: int = 0, confidence: float = 0.95) -> dict[str, float]:
    """Percentile interval for mean(a - b) over windows resampled with replacement."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or len(a) == 0:
        raise ValueError("paired scores must be equal-length non-empty 1-D sequences")
    diff = a - b
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(diff), size=(n_resamples, len(diff)))
    means = diff[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - confidence) / 2, (1 + confidence) / 2])
    return {"mean_diff": float(diff.mean()), "low": float(lo), "high": float(hi)}
