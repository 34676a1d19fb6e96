"""Within-window preference pairs from alignment quality."""
from __future__ import annotations

from typing import Mapping, Sequence

from ..aligner import AlignParams, AlignmentResult, align
from ..records import PreferencePair, Skeleton, Trajectory, WindowContext

LATE_STAGES = ("EXECUTE", "OUTCOME")
REASON_SCORE = "score-gap"
REASON_LATE = "late-stage"


def late_stage_coverage(skeleton: Skeleton, alignment: AlignmentResult) -> bool:
    return any(j is not None and step.stage in LATE_STAGES
               for step, j in zip(skeleton.steps, alignment.mapping))


def mine_window_pairs(window_id: str, intent_id: str | None, skeleton: Skeleton,
                      trajectories: Sequence[Trajectory],
                      alignments: Sequence[AlignmentResult] | None = None,
                      params: AlignParams = AlignParams()) -> list[PreferencePair]:
    """All strictly ordered pairs, in trajectory order.

    Higher alignment score wins; equal scores are separated only when exactly
    one side covers a late (EXECUTE or OUTCOME) step.
    """
    if alignments is None:
        alignments = [align(skeleton, t, t.candidate_id, params) for t in trajectories]
    late = [late_stage_coverage(skeleton, a) for a in alignments]
    pairs = []
    n = len(trajectories)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            ti, tj = trajectories[i], trajectories[j]
            if ti.trajectory_id == tj.trajectory_id:
                continue
            si, sj = alignments[i].score, alignments[j].score
            if si > sj:
                reason = REASON_SCORE
            elif si == sj and late[i] and not late[j]:
                reason = REASON_LATE
            else:
                continue
            pairs.append(PreferencePair(window_id, ti.trajectory_id, tj.trajectory_id,
                                        intent_id, reason))
    return pairs


def mine_preference_pairs(contexts: Mapping[str, WindowContext],
                          extra: Mapping[str, Sequence[Trajectory]] | None = None,
                          params: AlignParams = AlignParams()) -> list[PreferencePair]:
    out = []
    for wid in sorted(contexts):
        ctx = contexts[wid]
        trajs = [ctx.trajectories[c] for c in ctx.roster] + list((extra or {}).get(wid, ()))
        out.extend(mine_window_pairs(wid, ctx.window.intent_id, ctx.skeleton, trajs,
                                     params=params))
    return out
