"""Deterministic stage and role normalization."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Mapping, Sequence

from ..records import STAGE_ORDER

DATASETS = ("MAVEN-ERE", "RAMS", "synthetic")

PROBE_TAG_TYPES = frozenset({
    "Know", "Warning", "Statement", "Process_start",
    "Reporting", "Suspicion", "Perception_active", "Coming_to_believe",
})
PROBE_TRIGGERS = frozenset({"reported", "report", "said", "warned", "warning", "according"})
EXECUTE_TYPES_STRONG = frozenset({"Attack", "Hostile_encounter"})
EXECUTE_TRIGGERS = frozenset({"killed", "attack", "fought", "destroyed", "battle", "war",
                              "hurricane", "storm"})
OUTCOME_TYPES = frozenset({"Process_end", "Earnings_and_losses", "Transaction", "Receiving",
                           "Releasing"})
OUTCOME_TRIGGERS = frozenset({"ended", "paid", "sold", "bought", "earned", "withdrew",
                              "deposited"})
PROBE_PRIMARY_TYPES_RAMS = frozenset({"Statement", "Reporting"})


@dataclass(frozen=True)
class StageMapConfig:
    dataset_flag: str = "synthetic"
    override: Mapping[str, Sequence[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.dataset_flag not in DATASETS:
            raise ValueError(f"unknown dataset flag {self.dataset_flag!r}")
        for etype, stages in self.override.items():
            if not stages or any(s not in STAGE_ORDER for s in stages):
                raise ValueError(f"override for {etype!r} must list known stages")


def _ordered(stages) -> list[str]:
    return sorted(set(stages), key=STAGE_ORDER.__getitem__)


def _primary(dataset_flag: str, et: str, tr: str) -> str:
    if et in OUTCOME_TYPES or tr in OUTCOME_TRIGGERS:
        return "OUTCOME"
    if et in EXECUTE_TYPES_STRONG or tr in EXECUTE_TRIGGERS:
        return "EXECUTE"
    if dataset_flag == "RAMS" and et in PROBE_PRIMARY_TYPES_RAMS:
        return "PROBE"
    return "PREP"


def map_stage(dataset_flag: str, etype_raw: str, trigger_text: str | None = None,
              override: Mapping[str, Sequence[str]] | None = None) -> list[str]:
    """Stage-compatibility set for a fine-grained event type, in stage order."""
    et = etype_raw.strip()
    tr = "" if trigger_text is None else trigger_text.lower().strip()
    if override and et in override:
        return _ordered(override[et])
    primary = _primary(dataset_flag, et, tr)
    hits = [primary]
    if primary == "PREP" and (et in PROBE_TAG_TYPES or tr in PROBE_TRIGGERS):
        hits.append("PROBE")
    return _ordered(hits)


def primary_stage(dataset_flag: str, etype_raw: str, trigger_text: str | None = None,
                  override: Mapping[str, Sequence[str]] | None = None) -> str:
    """The priority stage; for overridden types, the latest listed stage."""
    et = etype_raw.strip()
    if override and et in override:
        return _ordered(override[et])[-1]
    tr = "" if trigger_text is None else trigger_text.lower().strip()
    return _primary(dataset_flag, et, tr)


@lru_cache(maxsize=1)
def default_role_table() -> Mapping[str, str]:
    text = resources.files("certrank").joinpath("data/role2norm.json").read_text("utf-8")
    return json.loads(text)


_RAMS_ROLE = re.compile(r"^evt\d+arg\d+")


def normalize_role(dataset_flag: str, raw_role: str | None,
                   table: Mapping[str, str] | None = None) -> str:
    """Map a dataset-native role to Agent, Target or Context (the residual default)."""
    if not raw_role:
        return "Context"
    key = raw_role.strip().lower()
    if dataset_flag == "RAMS":
        key = _RAMS_ROLE.sub("", key)
    table = default_role_table() if table is None else table
    role = table.get(key, "Context")
    return role if role in ("Agent", "Target", "Context") else "Context"
