"""Train-only perturbation negatives.

A perturbed trajectory keeps every span it cites from the original, so its
provenance stays valid against the same document metadata.  The record schema
has no provenance flag, so negatives are marked through their trajectory_id
suffix ``::neg-<kind>`` and written to a separate train-only file.
"""
from __future__ import annotations

from dataclasses import replace
from datetime import date, timedelta

from ..records import STAGES, ArgumentMention, Trajectory, parse_time, sort_events
from ..seeding import substream

KINDS = ("insert", "delete", "time_shift", "role_swap", "replace")
NEG_TAG = "::neg-"


def is_perturbed(trajectory: Trajectory) -> bool:
    return NEG_TAG in trajectory.trajectory_id


def _shift_time(value, days: int):
    parsed = parse_time(value)
    if parsed is None:
        return value
    unit, t = parsed
    if unit == "numeric":
        return t + days
    return (date(1970, 1, 1) + timedelta(days=int(t) + days)).isoformat()


def perturb_trajectory(traj: Trajectory, kind: str, seed: int, index: int = 0) -> Trajectory:
    if kind not in KINDS:
        raise ValueError(f"unknown perturbation {kind!r}; expected one of {KINDS}")
    events = list(traj.events)
    if not events:
        raise ValueError(f"perturbation {kind!r} needs at least one event")
    rng = substream(seed, f"perturb:{traj.trajectory_id}:{kind}:{index}")
    pick = int(rng.integers(0, len(events)))

    if kind == "delete":
        del events[pick]
    elif kind == "insert":
        src = events[pick]
        used = {e.event_id for e in events}
        n = 1
        while f"{src.event_id}~{n}" in used:
            n += 1
        # a repeated citation of an existing event at a random later order position
        offset = float(rng.integers(1, 4))
        dup = replace(src, event_id=f"{src.event_id}~{n}",
                      order_index=src.order_index + offset - 0.5,
                      time=_shift_time(src.time, int(offset)))
        events.append(dup)
    elif kind == "time_shift":
        ev = events[pick]
        days = int(rng.integers(3, 15)) * (1 if rng.random() < 0.5 else -1)
        if parse_time(ev.time) is not None:
            events[pick] = replace(ev, time=_shift_time(ev.time, days))
        else:
            events[pick] = replace(ev, order_index=ev.order_index + days)
    elif kind == "role_swap":
        swap = {"Agent": "Target", "Target": "Agent"}
        events = [replace(e, arguments=tuple(
            ArgumentMention(swap.get(a.role, a.role), a.entity_id, a.span)
            for a in e.arguments)) for e in events]
    elif kind == "replace":
        ev = events[pick]
        others = [s for s in STAGES if s != ev.etype_primary]
        stage = others[int(rng.integers(0, len(others)))]
        events[pick] = replace(ev, skeleton_hits=(stage,), etype_primary=stage)
    return Trajectory(traj.window_id, traj.candidate_id,
                      f"{traj.trajectory_id}{NEG_TAG}{kind}" + (f"-{index}" if index else ""),
                      sort_events(events), traj.meta)
