"""Skeleton-to-trajectory alignment, certificates and reward features.

The alignment is a global DP over skeleton steps (rows) and trajectory events
(columns) with three moves: match a step to an event, miss a step, or skip an
event.  Ties prefer match, then skip, then miss.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .records import (
    CertStep,
    Event,
    EvidenceRef,
    Skeleton,
    SkeletonStep,
    Trajectory,
    shared_time_unit,
)

MISS = None
TIE_TOL = 1e-12

MOVE_MATCH = "match"
MOVE_SKIP = "skip"
MOVE_MISS = "miss"

SKEL_FEATURES = ("hits", "misses", "coverage", "skips", "mean_temporal_gap",
                 "precedence_violations")
ARG_FEATURES = ("role_sat_mean", "arg_viol_total")


class ConfigError(ValueError):
    """Invalid run configuration (e.g. a graph vector of the wrong length)."""


@dataclass(frozen=True)
class AlignParams:
    lambda_arg: float = 0.5
    delta_type: float = 1.0
    delta_miss: float = 1.0
    delta_skip: float = 0.25

    def __post_init__(self) -> None:
        for name in ("lambda_arg", "delta_type", "delta_miss", "delta_skip"):
            value = getattr(self, name)
            if not value >= 0:
                raise ConfigError(f"{name} must be >= 0, got {value}")

    def to_dict(self) -> dict[str, float]:
        return {"lambda_arg": self.lambda_arg, "delta_type": self.delta_type,
                "delta_miss": self.delta_miss, "delta_skip": self.delta_skip}


def role_terms(step: SkeletonStep, event: Event, candidate_id: str) -> tuple[float, int]:
    """(role_sat, arg_viol) of an event for a step, ignoring stage compatibility.

    role_sat is the fraction of required roles instantiated by some argument
    (1 when nothing is required).  The only identity constraint checked is that
    a required Agent role is filled by the candidate itself.
    """
    required = step.required_roles
    if not required:
        return 1.0, 0
    present = {a.role for a in event.arguments}
    sat = sum(r in present for r in required) / len(required)
    viol = 0
    if "Agent" in required and not any(
            a.role == "Agent" and a.entity_id == candidate_id for a in event.arguments):
        viol = 1
    return sat, viol


def compatible(step: SkeletonStep, event: Event) -> bool:
    return step.stage in event.skeleton_hits


def local_match(step: SkeletonStep, event: Event, candidate_id: str,
                params: AlignParams = AlignParams()) -> float:
    if not compatible(step, event):
        return -params.delta_type
    sat, viol = role_terms(step, event, candidate_id)
    return sat - params.lambda_arg * viol


@dataclass(frozen=True)
class AlignmentStats:
    hits: int
    misses: int
    coverage: float
    skips: int
    mean_temporal_gap: float
    precedence_violations: int
    role_sat_mean: float
    arg_viol_total: int

    def to_dict(self) -> dict[str, Any]:
        return {"hits": self.hits, "misses": self.misses, "coverage": self.coverage,
                "skips": self.skips, "mean_temporal_gap": self.mean_temporal_gap,
                "precedence_violations": self.precedence_violations,
                "role_sat_mean": self.role_sat_mean, "arg_viol_total": self.arg_viol_total}


@dataclass(frozen=True)
class AlignmentResult:
    mapping: tuple[int | None, ...]
    score: float
    stats: AlignmentStats
    moves: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"mapping": list(self.mapping), "score": self.score,
                "stats": self.stats.to_dict()}


def _order_keys(events: Sequence[Event]) -> list[float]:
    """Absolute times when all share one unit, otherwise order_index."""
    if len(events) >= 2 and shared_time_unit(events) is not None:
        return [e.time_key[1] for e in events]
    return [float(e.order_index) for e in events]


def alignment_stats(skeleton: Skeleton, trajectory: Trajectory,
                    mapping: Sequence[int | None], candidate_id: str) -> AlignmentStats:
    m = len(skeleton.steps)
    events = trajectory.events
    matched = [(i, j) for i, j in enumerate(mapping) if j is not None]
    hits = len(matched)
    matched_events = [events[j] for _, j in matched]
    keys = _order_keys(matched_events)
    gaps = [abs(b - a) for a, b in zip(keys, keys[1:])]
    mean_gap = float(np.mean(gaps)) if gaps else 0.0

    key_of_step = {skeleton.steps[i].step_id: keys[n] for n, (i, _) in enumerate(matched)}
    violations = sum(1 for a, b in skeleton.precedence
                     if a in key_of_step and b in key_of_step and key_of_step[a] > key_of_step[b])

    sats, viols = [], 0
    for i, j in matched:
        sat, viol = role_terms(skeleton.steps[i], events[j], candidate_id)
        sats.append(sat)
        viols += viol
    return AlignmentStats(
        hits=hits, misses=m - hits, coverage=hits / m if m else 0.0,
        skips=len(events) - hits, mean_temporal_gap=mean_gap,
        precedence_violations=violations,
        role_sat_mean=float(np.mean(sats)) if sats else 0.0,
        arg_viol_total=viols)


def align(skeleton: Skeleton, trajectory: Trajectory, candidate_id: str,
          params: AlignParams = AlignParams()) -> AlignmentResult:
    steps = skeleton.steps
    events = trajectory.events
    m, t = len(steps), len(events)
    dp = np.empty((m + 1, t + 1))
    back = np.zeros((m + 1, t + 1), dtype=np.int8)  # 0 match, 1 skip, 2 miss
    dp[0, :] = -params.delta_skip * np.arange(t + 1)
    dp[:, 0] = -params.delta_miss * np.arange(m + 1)
    back[0, 1:] = 1
    back[1:, 0] = 2
    local = np.array([[local_match(s, e, candidate_id, params) for e in events] for s in steps])
    for k in range(1, m + 1):
        for j in range(1, t + 1):
            options = (dp[k - 1, j - 1] + local[k - 1, j - 1],
                       dp[k, j - 1] - params.delta_skip,
                       dp[k - 1, j] - params.delta_miss)
            best = max(options)
            # first option within tolerance of the max, in priority order
            choice = next(n for n, v in enumerate(options) if v >= best - TIE_TOL)
            dp[k, j] = options[choice]
            back[k, j] = choice

    mapping: list[int | None] = [MISS] * m
    moves: list[str] = []
    k, j = m, t
    while k > 0 or j > 0:
        move = back[k, j]
        if move == 0:
            if compatible(steps[k - 1], events[j - 1]):
                mapping[k - 1] = j - 1
            moves.append(MOVE_MATCH)
            k, j = k - 1, j - 1
        elif move == 1:
            moves.append(MOVE_SKIP)
            j -= 1
        else:
            moves.append(MOVE_MISS)
            k -= 1
    moves.reverse()
    stats = alignment_stats(skeleton, trajectory, mapping, candidate_id)
    return AlignmentResult(tuple(mapping), float(dp[m, t]), stats, tuple(moves))


def _pick_argument(event: Event, role: str):
    mentions = [a for a in event.arguments if a.role == role]
    if not mentions:
        return None
    return min(mentions, key=lambda a: (a.span.length, a.span.start, a.span.doc_id))


def extract_certificate(skeleton: Skeleton, trajectory: Trajectory,
                        alignment: AlignmentResult, candidate_id: str) -> tuple[CertStep, ...]:
    """Serialize an alignment as certificate steps citing trigger and role spans."""
    steps = []
    for step, j in zip(skeleton.steps, alignment.mapping):
        if j is None:
            steps.append(CertStep(step.step_id, step.stage, False, None, ()))
            continue
        event = trajectory.events[j]
        evidence = [EvidenceRef(event.trigger, "trigger")]
        for role in step.required_roles:
            arg = _pick_argument(event, role)
            if arg is not None:
                evidence.append(EvidenceRef(arg.span, "arg", role))
        steps.append(CertStep(step.step_id, step.stage, True, event.event_id, tuple(evidence)))
    return tuple(steps)


@dataclass(frozen=True)
class FeatureVector:
    phi_skel: tuple[float, ...]
    phi_arg: tuple[float, ...]
    phi_graph: tuple[float, ...] = ()
    bias: float = 1.0

    @property
    def values(self) -> np.ndarray:
        return np.array(self.phi_skel + self.phi_arg + self.phi_graph + (self.bias,), dtype=float)

    def __len__(self) -> int:
        return len(self.phi_skel) + len(self.phi_arg) + len(self.phi_graph) + 1


def feature_layout(graph_dim: int = 0) -> tuple[str, ...]:
    return SKEL_FEATURES + ARG_FEATURES + tuple(f"graph_{i}" for i in range(graph_dim)) + ("bias",)


def features_from_stats(stats: AlignmentStats, graph_features: Sequence[float] | None = None,
                        graph_dim: int = 0) -> FeatureVector:
    if graph_features is None:
        graph = (0.0,) * graph_dim
    else:
        graph = tuple(float(x) for x in graph_features)
        if len(graph) != graph_dim:
            raise ConfigError(f"graph feature vector has length {len(graph)}, "
                              f"configured dimension is {graph_dim}")
    return FeatureVector(
        phi_skel=(float(stats.hits), float(stats.misses), stats.coverage, float(stats.skips),
                  stats.mean_temporal_gap, float(stats.precedence_violations)),
        phi_arg=(stats.role_sat_mean, float(stats.arg_viol_total)),
        phi_graph=graph)


def compute_features(skeleton: Skeleton, trajectory: Trajectory, candidate_id: str,
                     params: AlignParams = AlignParams(),
                     graph_features: Sequence[float] | None = None,
                     graph_dim: int = 0) -> FeatureVector:
    result = align(skeleton, trajectory, candidate_id, params)
    return features_from_stats(result.stats, graph_features, graph_dim)
