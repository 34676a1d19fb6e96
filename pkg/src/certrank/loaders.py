"""File-level loading and writing of record families."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Mapping

from .records import (
    DecodeError,
    DocMeta,
    ParseFailure,
    PolicyOutput,
    PreferencePair,
    Skeleton,
    Trajectory,
    WindowContext,
    WindowInput,
    WindowLabel,
    build_context,
    canonical_dumps,
    decode_policy_output,
    iter_records,
    strict_loads,
)


class InputError(ValueError):
    """Bad user input: missing file, schema error or inconsistent records."""


def read_lines(path: str | Path) -> list[str]:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{p}: no such file")
    return p.read_text(encoding="utf-8").splitlines()


def load_records(kind: str, path: str | Path) -> list[Any]:
    try:
        return list(iter_records(kind, read_lines(path)))
    except DecodeError as exc:
        raise InputError(f"{path}: {exc}") from None


def load_jsonl(path: str | Path) -> list[Any]:
    rows = []
    for n, text in enumerate(read_lines(path), start=1):
        if text.strip():
            try:
                rows.append(strict_loads(text))
            except DecodeError as exc:
                raise InputError(f"{path}: {exc.at_line(n)}") from None
    return rows


def load_json(path: str | Path) -> Any:
    text = "\n".join(read_lines(path))
    try:
        return strict_loads(text)
    except DecodeError as exc:
        raise InputError(f"{path}: {exc}") from None


def _unique(items: Iterable[Any], key, what: str, path) -> dict[Any, Any]:
    out: dict[Any, Any] = {}
    for item in items:
        k = key(item)
        if k in out:
            raise InputError(f"{path}: duplicate {what} {k!r}")
        out[k] = item
    return out


def load_skeletons(path) -> dict[str, Skeleton]:
    return _unique(load_records("skeleton", path), lambda s: s.skeleton_id, "skeleton_id", path)


def load_doc_meta(path) -> dict[str, DocMeta]:
    return _unique(load_records("doc_meta", path), lambda d: d.doc_id, "doc_id", path)


def load_windows(path) -> dict[str, WindowInput]:
    return _unique(load_records("window_input", path), lambda w: w.window_id, "window_id", path)


def load_labels(path) -> dict[str, WindowLabel]:
    return _unique(load_records("window_label", path), lambda x: x.window_id, "window_id", path)


def load_pairs(path) -> list[PreferencePair]:
    return load_records("pair", path)


def load_trajectories(path) -> dict[tuple[str, str], Trajectory]:
    return _unique(load_records("trajectory", path),
                   lambda t: (t.window_id, t.candidate_id), "trajectory for", path)


def load_extra_trajectories(path) -> dict[str, list[Trajectory]]:
    """Train-only negatives grouped by window (several per candidate allowed)."""
    out: dict[str, list[Trajectory]] = {}
    for t in load_records("trajectory", path):
        out.setdefault(t.window_id, []).append(t)
    return out


def load_contexts(windows, trajs, skeletons, docs) -> dict[str, WindowContext]:
    """Join the four label-free record files into per-window contexts."""
    win = load_windows(windows)
    by_key = load_trajectories(trajs)
    sk = load_skeletons(skeletons)
    dm = load_doc_meta(docs)
    grouped: dict[str, dict[str, Trajectory]] = {}
    for (wid, cid), t in by_key.items():
        grouped.setdefault(wid, {})[cid] = t
    out = {}
    for wid in sorted(win):
        try:
            out[wid] = build_context(win[wid], sk, dm, grouped.get(wid, {}))
        except ValueError as exc:
            raise InputError(str(exc)) from None
    return out


def load_outputs(path) -> tuple[dict[str, PolicyOutput | ParseFailure], list[ParseFailure]]:
    """Policy outputs by window; unattributable parse failures are returned apart.

    Two lines claiming the same window are an input error.
    """
    out: dict[str, PolicyOutput | ParseFailure] = {}
    orphans: list[ParseFailure] = []
    for n, text in enumerate(read_lines(path), start=1):
        if not text.strip():
            continue
        rec = decode_policy_output(text)
        wid = rec.window_id
        if wid is None:
            orphans.append(rec)
            continue
        if wid in out:
            raise InputError(f"{path}: line {n}: second output for window {wid!r}")
        out[wid] = rec
    return out, orphans


def jsonl_text(rows: Iterable[Any]) -> str:
    return "".join(canonical_dumps(r) + "\n" for r in rows)


def write_text(path: str | Path, text: str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text, encoding="utf-8")


def write_jsonl(path: str | Path, rows: Iterable[Any]) -> None:
    write_text(path, jsonl_text(rows))


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_sidecar(output: str | Path, command: str, config: Mapping[str, Any],
                  inputs: Mapping[str, str | Path | None]) -> Path:
    """``<output>.meta.json`` holding the effective config and input checksums."""
    meta = {
        "command": command,
        "config": config,
        "inputs": {k: {"name": Path(v).name, "sha256": sha256_file(v)}
                   for k, v in sorted(inputs.items()) if v is not None and Path(v).is_file()},
    }
    p = Path(str(output) + ".meta.json")
    write_text(p, json.dumps(meta, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    return p
