from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from certrank.aligner import align, extract_certificate
from certrank.baselines import attach_certificates
from certrank.feasibility import (
    repair_minor,
    step_coverage,
    valid_prefix,
    validate_output,
)
from certrank.records import CertStep, EvidenceRef, ParseFailure, PolicyOutput, Span

from builders import listing_context, listing_output, random_context, synth
from mutants import MUTATED_RULES, mutate


def test_listing_output_is_feasible():
    rep = validate_output(listing_output(), listing_context(), k=1)
    assert rep.feasible, rep.violations
    assert rep.k_expected == 1 and rep.k_returned == 1


def test_empty_topk_is_r2():
    out = PolicyOutput("w_0001", (), ())
    rep = validate_output(out, listing_context(), k=1)
    assert not rep.feasible and rep.rules == {"R2"}


def test_reversed_span_is_r6():
    rep = validate_output(listing_output(span=(200, 180)), listing_context(), k=1)
    assert "R6" in rep.rules


def test_parse_failure_is_r1_only():
    rep = validate_output(ParseFailure("not-parseable"), listing_context(), k=1)
    assert rep.rules == {"R1"} and not rep.feasible


def test_window_mismatch_is_r1():
    out = replace(listing_output(), window_id="w_other")
    assert "R1" in validate_output(out, listing_context(), 1).rules


def test_arg_role_must_be_normalized():
    out = listing_output()
    step = replace(out.certificates[0][0], evidence=out.certificates[0][0].evidence + (
        EvidenceRef(Span("doc123", 90, 110), "arg", "Victim"),))
    out = replace(out, certificates=((step,) + out.certificates[0][1:],))
    assert "R1" in validate_output(out, listing_context(), 1).rules


def test_k_window_caps_at_roster():
    ctx = listing_context()
    rep = validate_output(listing_output(), ctx, k=10)
    assert rep.k_expected == 2 and "R2" in rep.rules


def test_r7_role_must_match():
    out = listing_output()
    step = replace(out.certificates[0][0], evidence=out.certificates[0][0].evidence + (
        EvidenceRef(Span("doc123", 90, 110), "arg", "Target"),))
    out = replace(out, certificates=((step,) + out.certificates[0][1:],))
    assert validate_output(out, listing_context(), 1).rules == {"R7"}


def test_r7_wrong_candidate():
    out = listing_output(topk=("P_002",))
    assert "R7" in validate_output(out, listing_context(), 1).rules


def test_violations_sorted_by_rule():
    out = PolicyOutput("w_0001", ("P_001", "P_001", "nobody"),
                       (tuple(CertStep(s, e, False) for s, e in
                              (("s1", "PREP"), ("s2", "PROBE"), ("s3", "EXECUTE"))),))
    rep = validate_output(out, listing_context(), 2)
    rules = [v.rule for v in rep.violations]
    assert rules == sorted(rules)
    assert {"R2", "R3"} <= rep.rules


# --- repair ----------------------------------------------------------------

def _full_output(ctx, ids):
    return attach_certificates(ctx, ids)


def test_repair_drops_duplicates():
    ctx = listing_context()
    base = _full_output(ctx, ["P_001", "P_002"])
    dup = PolicyOutput(base.window_id, ("P_001", "P_001", "P_002"),
                       (base.certificates[0], base.certificates[0], base.certificates[1]))
    res = repair_minor(dup, ctx, 2)
    assert res.output.topk == ("P_001", "P_002")
    assert res.repair_count == 1 and res.repairable
    assert validate_output(res.output, ctx, 2).feasible


def test_repair_fixed_point_on_feasible():
    ctx = listing_context()
    out = listing_output()
    res = repair_minor(out, ctx, 1)
    assert res.output == out and res.repair_count == 0


def test_repair_drops_single_bad_span_keeps_step():
    ctx = listing_context()
    out = listing_output()
    s1 = out.certificates[0][0]
    s1 = replace(s1, evidence=s1.evidence + (EvidenceRef(Span("doc123", 390, 420), "trigger"),))
    out = replace(out, certificates=((s1,) + out.certificates[0][1:],))
    assert "R6" in validate_output(out, ctx, 1).rules
    res = repair_minor(out, ctx, 1)
    assert res.repair_count == 1
    assert res.output.certificates[0][0].matched
    assert validate_output(res.output, ctx, 1).feasible


def test_repair_demotes_emptied_step():
    ctx = listing_context()
    out = listing_output(span=(300, 310))  # in bounds but traces nothing
    res = repair_minor(out, ctx, 1)
    step = res.output.certificates[0][0]
    assert not step.matched and step.event_id is None and step.evidence == ()
    assert res.repair_count == 2
    assert validate_output(res.output, ctx, 1).feasible


def test_repair_refuses_r1():
    ctx = listing_context()
    out = replace(listing_output(), window_id="nope")
    res = repair_minor(out, ctx, 1)
    assert not res.repairable and res.output == out and res.repair_count == 0


def test_repair_truncates():
    ctx = listing_context()
    out = _full_output(ctx, ["P_001", "P_002"])
    res = repair_minor(out, ctx, 1)
    assert res.output.topk == ("P_001",) and res.repair_count == 1


@given(st.integers(0, 10_000), st.sampled_from(MUTATED_RULES + ("none",)))
@settings(max_examples=60, deadline=None)
def test_repair_idempotent_and_sound(seed, rule):
    rng = np.random.default_rng(seed)
    ctx = random_context(rng, n_cand=4)
    k = int(rng.integers(1, 5))
    out = _full_output(ctx, list(ctx.roster[:ctx.k_window(k)]))
    if rule != "none" and any(s.matched for c in out.certificates for s in c):
        out = mutate(out, ctx, rule, rng)
    first = repair_minor(out, ctx, k)
    second = repair_minor(first.output, ctx, k)
    assert second.output == first.output
    if first.repairable:
        rules = validate_output(first.output, ctx, k).rules
        assert not rules & {"R2", "R5", "R6", "R7"}


# --- constructive feasibility ---------------------------------------------

@given(st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_extracted_certificates_validate(seed):
    rng = np.random.default_rng(seed)
    ctx = random_context(rng)
    ids = list(rng.permutation(ctx.roster))
    out = _full_output(ctx, ids)
    assert validate_output(out, ctx, len(ids)).feasible


@pytest.mark.parametrize("rule", MUTATED_RULES)
def test_mutants_detected_on_synthetic(rule):
    _, contexts, _ = synth(seed=3, n_windows=12)
    rng = np.random.default_rng(11)
    for wid in sorted(contexts):
        ctx = contexts[wid]
        out = _full_output(ctx, list(ctx.roster))
        if not any(s.matched for c in out.certificates for s in c):
            continue
        assert validate_output(out, ctx, 10).feasible
        bad = mutate(out, ctx, rule, rng)
        assert rule in validate_output(bad, ctx, 10).rules


def test_valid_prefix_and_step_coverage():
    ctx = listing_context()
    out = PolicyOutput("w_0001", ("P_002", "P_002"), ())
    assert valid_prefix(out, ctx, 10) == ("P_002",)
    tr = ctx.trajectories["P_001"]
    cert = extract_certificate(ctx.skeleton, tr, align(ctx.skeleton, tr, "P_001"), "P_001")
    cov = step_coverage(cert, "P_001", ctx)
    assert cov == sum(s.matched for s in cert) / 4
    assert step_coverage(None, "P_001", ctx) == 0.0
