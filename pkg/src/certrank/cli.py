"""Batch command-line interface.

Exit codes: 0 success, 1 input error (missing file, bad flag, schema error),
2 internal invariant failure.  Every file written gets a ``.meta.json``
sidecar with the effective configuration and input checksums.  Config
precedence is CLI flag, then ``--config`` file, then built-in default.
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from functools import partial
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from . import baselines, ecpo, feasibility, loaders, metrics, reward
from .aligner import (
    AlignParams,
    ConfigError,
    align,
    compute_features,
    extract_certificate,
    feature_layout,
)
from .benchgen import pairs as bpairs
from .benchgen import perturb as bperturb
from .benchgen.stages import DATASETS, StageMapConfig
from .benchgen.synth import SynthConfig, SynthConfigError, synthesize_corpus
from .benchgen.windows import DocInfo, SourceEvent, build_windows, bundle_files
from .loaders import InputError
from .records import DecodeError, ParseFailure, encode_policy_output
from .verifier import VerifierConfig, verify_output

log = logging.getLogger("certrank")

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # unknown flags are an input error, not usage exit 2
        raise InputError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# configuration


SECTIONS = {"align": AlignParams, "verifier": VerifierConfig, "ecpo": ecpo.EcpoWeights,
            "reward": reward.RewardTrainConfig}


def _section(cls, raw: Mapping[str, Any] | None):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    extra = set(raw) - known
    if extra:
        raise InputError(f"unknown {cls.__name__} keys {sorted(extra)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad {cls.__name__}: {exc}") from None


class RunConfig:
    """Effective configuration of one invocation."""

    def __init__(self, args: argparse.Namespace):
        file_cfg: dict[str, Any] = {}
        if getattr(args, "config", None):
            file_cfg = loaders.load_json(args.config)
            if not isinstance(file_cfg, dict):
                raise InputError(f"{args.config}: config must be a JSON object")
        allowed = set(SECTIONS) | {"k", "seed", "tau_ov", "synth", "jobs"}
        extra = set(file_cfg) - allowed
        if extra:
            raise InputError(f"{args.config}: unknown config keys {sorted(extra)}")
        self.file = file_cfg
        self.k = self.pick(args, "k", metrics.DEFAULT_K)
        self.seed = self.pick(args, "seed", 0)
        self.jobs = self.pick(args, "jobs", 1)
        self.tau_ov = self.pick(args, "tau_ov", metrics.DEFAULT_TAU_OV)
        if not isinstance(self.k, int) or self.k < 1:
            raise InputError("k must be a positive integer")
        self.align = _section(AlignParams, file_cfg.get("align"))
        self.verifier = _section(VerifierConfig, file_cfg.get("verifier"))
        self.ecpo = _section(ecpo.EcpoWeights, file_cfg.get("ecpo"))
        self.reward = _section(reward.RewardTrainConfig, file_cfg.get("reward"))

    def pick(self, args, name: str, default):
        flag = getattr(args, name, None)
        if flag is not None:
            return flag
        return self.file.get(name, default)

    def to_dict(self) -> dict[str, Any]:
        return {"k": self.k, "seed": self.seed, "tau_ov": self.tau_ov,
                "align": self.align.to_dict(), "verifier": self.verifier.to_dict(),
                "ecpo": self.ecpo.to_dict(),
                "reward": {f.name: getattr(self.reward, f.name) for f in fields(self.reward)}}


def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    """Map preserving input order; a process pool when jobs > 1."""
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def _require(args, *names: str) -> None:
    missing = ["--" + n.replace("_", "-") for n in names if getattr(args, n, None) is None]
    if missing:
        raise InputError(f"{args.command}: missing required flag(s) {' '.join(missing)}")


def _contexts(args) -> dict:
    _require(args, "windows", "trajs", "skeletons", "docs")
    return loaders.load_contexts(args.windows, args.trajs, args.skeletons, args.docs)


def _input_files(args, *names: str) -> dict[str, Any]:
    return {n: getattr(args, n, None) for n in names}


def _window_filter(args, contexts: dict) -> dict:
    if getattr(args, "window_list", None):
        keep = {ln.strip() for ln in loaders.read_lines(args.window_list) if ln.strip()}
        return {w: c for w, c in contexts.items() if w in keep}
    return contexts


def _load_model(path) -> reward.RewardModel:
    try:
        return reward.RewardModel.loads("\n".join(loaders.read_lines(path)))
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"{path}: bad model file: {exc}") from None


CTX_FILES = ("windows", "trajs", "skeletons", "docs")


# ---------------------------------------------------------------------------
# per-window workers (top level so they pickle)


def _validate_one(item, k: int):
    wid, ctx, out = item
    if out is None:
        out = ParseFailure("missing", "no output for window", wid)
    return feasibility.validate_output(out, ctx, k).to_dict(wid)


def _align_one(ctx, params: AlignParams):
    rows = []
    for cid in ctx.roster:
        traj = ctx.trajectories[cid]
        res = align(ctx.skeleton, traj, cid, params)
        cert = extract_certificate(ctx.skeleton, traj, res, cid)
        fv = compute_features(ctx.skeleton, traj, cid, params)
        rows.append({"window_id": ctx.window_id, "candidate_id": cid,
                     "trajectory_id": traj.trajectory_id, "score": res.score,
                     "mapping": list(res.mapping), "stats": res.stats.to_dict(),
                     "features": [float(v) for v in fv.values],
                     "certificate": [s.to_dict() for s in cert]})
    return rows


def _rank_one(item, method: str, model, k: int, params: AlignParams, alpha: float,
              gamma: float):
    ctx, samples = item
    if method == "rm_only":
        ranked = baselines.rm_only_rank(ctx, model, k, params)
    elif method == "lp":
        ranked = baselines.lp_rank(ctx, k, params=params)
    elif method == "landmark":
        ranked = baselines.landmark_rank(ctx, k, params=params)
    else:
        ranked = baselines.fusion_rank(ctx, model, samples, alpha, k, gamma, params)
    return encode_policy_output(ranked.output)


def _verify_one(item, k: int, vcfg: VerifierConfig):
    wid, ctx, out = item
    if out is None or isinstance(out, ParseFailure):
        return {"window_id": wid, "parse_ok": False, "slots": [], "cycle": None}
    rec, cyc = verify_output(out, ctx, k, vcfg)
    row = rec.to_dict(wid)
    row["parse_ok"] = True
    row["cycle"] = {"slot_wise": cyc.slot_wise, "set_overlap": cyc.set_overlap,
                    "rank_prefix": cyc.rank_prefix}
    return row


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args, cfg: RunConfig) -> int:
    _require(args, "outputs", "report")
    contexts = _contexts(args)
    outputs, orphans = loaders.load_outputs(args.outputs)
    items = [(w, contexts[w], outputs.get(w)) for w in sorted(contexts)]
    rows = _pmap(partial(_validate_one, k=cfg.k), items, cfg.jobs)
    loaders.write_jsonl(args.report, rows)
    loaders.write_sidecar(args.report, "validate", cfg.to_dict(),
                          _input_files(args, *CTX_FILES, "outputs"))
    n = len(rows)
    feasible = sum(r["feasible"] for r in rows)
    print(f"feasible_rate\t{feasible / n if n else 0.0:.6f}\tn_windows\t{n}"
          f"\tunattributed_lines\t{len(orphans)}")
    return EXIT_OK


def cmd_align(args, cfg: RunConfig) -> int:
    _require(args, "report")
    contexts = _contexts(args)
    per = _pmap(partial(_align_one, params=cfg.align), [contexts[w] for w in sorted(contexts)],
                cfg.jobs)
    loaders.write_jsonl(args.report, [r for rows in per for r in rows])
    loaders.write_sidecar(args.report, "align", cfg.to_dict(), _input_files(args, *CTX_FILES))
    return EXIT_OK


def cmd_train_rm(args, cfg: RunConfig) -> int:
    _require(args, "labels", "model")
    contexts = _contexts(args)
    labels = loaders.load_labels(args.labels)
    if args.split != "all":
        contexts = {w: c for w, c in contexts.items()
                    if w in labels and labels[w].split == args.split}
    contexts = _window_filter(args, contexts)
    pairs = loaders.load_pairs(args.pairs) if args.pairs else []
    pairs = [p for p in pairs if p.window_id in contexts]
    extra = loaders.load_extra_trajectories(args.negatives) if args.negatives else None
    try:
        windows, pair_rows = reward.build_training_data(contexts, labels, pairs, cfg.align,
                                                        extra=extra)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    try:
        model = reward.fit(windows, pair_rows, cfg.reward, cfg.seed,
                           layout=feature_layout(0))
    except reward.RewardTrainingError as exc:
        raise InputError(str(exc)) from None
    loaders.write_text(args.model, model.dumps())
    loaders.write_sidecar(args.model, "train-rm", {**cfg.to_dict(), "split": args.split},
                          _input_files(args, *CTX_FILES, "labels", "pairs", "negatives"))
    print(f"windows\t{len(windows)}\tpairs\t{len(pair_rows)}\titerations\t{model.iterations}"
          f"\tobjective\t{model.objective:.6f}")
    return EXIT_OK


def _samples_by_window(path) -> dict[str, list[list[str]]]:
    out: dict[str, list[list[str]]] = {}
    for row in loaders.load_jsonl(path):
        if not isinstance(row, dict) or "window_id" not in row or "rankings" not in row:
            raise InputError(f"{path}: sample rows need window_id and rankings")
        out.setdefault(row["window_id"], []).extend(
            [list(map(str, r)) for r in row["rankings"]])
    return out


def cmd_rank(args, cfg: RunConfig) -> int:
    _require(args, "outputs")
    contexts = _window_filter(args, _contexts(args))
    model = None
    if args.method in ("rm_only", "fusion"):
        _require(args, "model")
        model = _load_model(args.model)
    samples: dict[str, list[list[str]]] = {}
    if args.method == "fusion":
        _require(args, "samples")
        samples = _samples_by_window(args.samples)
    items = [(contexts[w], samples.get(w, [])) for w in sorted(contexts)]
    fn = partial(_rank_one, method=args.method, model=model, k=cfg.k, params=cfg.align,
                 alpha=args.alpha, gamma=cfg.ecpo.gamma)
    lines = _pmap(fn, items, cfg.jobs)
    loaders.write_text(args.outputs, "".join(x + "\n" for x in lines))
    loaders.write_sidecar(args.outputs, "rank",
                          {**cfg.to_dict(), "method": args.method, "alpha": args.alpha},
                          _input_files(args, *CTX_FILES, "model", "samples"))
    return EXIT_OK


def cmd_verify(args, cfg: RunConfig) -> int:
    _require(args, "outputs", "report")
    contexts = _contexts(args)
    outputs, _ = loaders.load_outputs(args.outputs)
    items = [(w, contexts[w], outputs.get(w)) for w in sorted(contexts)]
    rows = _pmap(partial(_verify_one, k=cfg.k, vcfg=cfg.verifier), items, cfg.jobs)
    loaders.write_jsonl(args.report, rows)
    loaders.write_sidecar(args.report, "verify", cfg.to_dict(),
                          _input_files(args, *CTX_FILES, "outputs"))
    return EXIT_OK


def cmd_reward(args, cfg: RunConfig) -> int:
    _require(args, "batch", "model", "report")
    contexts = _contexts(args)
    model = _load_model(args.model)
    records = loaders.load_jsonl(args.batch)
    try:
        rows = ecpo.reward_batch(records, contexts, model, cfg.verifier, cfg.ecpo, cfg.k,
                                 cfg.align)
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"{args.batch}: {exc}") from None
    loaders.write_jsonl(args.report, rows)
    loaders.write_sidecar(args.report, "reward", cfg.to_dict(),
                          _input_files(args, *CTX_FILES, "model", "batch"))
    return EXIT_OK


def _reextract(path) -> dict[tuple, bool]:
    out = {}
    for row in loaders.load_jsonl(path):
        try:
            key = (row["window_id"], int(row["slot"]), row["step_id"], int(row["evidence_index"]))
            out[key] = bool(row["pass"])
        except (KeyError, TypeError, ValueError):
            raise InputError(f"{path}: rows need window_id, slot, step_id, "
                             "evidence_index, pass") from None
    return out


def cmd_evaluate(args, cfg: RunConfig) -> int:
    _require(args, "outputs", "labels", "report")
    contexts = _window_filter(args, _contexts(args))
    labels = loaders.load_labels(args.labels)
    outputs, _ = loaders.load_outputs(args.outputs)
    reex = _reextract(args.reextract) if args.reextract else None
    rep = metrics.evaluate(outputs, contexts, labels, cfg.k, cfg.verifier, cfg.tau_ov, reex)
    loaders.write_jsonl(args.report, [e.to_dict() for e in rep.windows])
    tsv = rep.summary_tsv()
    loaders.write_text(str(args.report) + ".summary.tsv", tsv)
    loaders.write_sidecar(args.report, "evaluate", cfg.to_dict(),
                          _input_files(args, *CTX_FILES, "outputs", "labels", "reextract"))
    sys.stdout.write(tsv)
    return EXIT_OK


def _write_tree(root: Path, files: Mapping[str, str]) -> None:
    for rel, text in files.items():
        loaders.write_text(root / rel, text)


def cmd_gen(args, cfg: RunConfig) -> int:
    _require(args, "out")
    raw = dict(cfg.file.get("synth", {}))
    raw["seed"] = cfg.seed
    for name in ("n_windows", "roster_size", "drop_rate", "role_corruption", "time_jitter",
                 "positives_per_window", "n_intents"):
        value = getattr(args, name)
        if value is not None:
            raw[name] = value
    try:
        config = SynthConfig.from_dict(raw)
        corpus = synthesize_corpus(config)
    except (SynthConfigError, TypeError) as exc:
        raise InputError(f"bad synth config: {exc}") from None
    root = Path(args.out)
    _write_tree(root, corpus.files())
    loaders.write_sidecar(root / "gen", "gen", {"synth": config.to_dict()},
                          _input_files(args, "config"))
    print(f"windows\t{len(corpus.windows.window_inputs)}\tdropped\t{len(corpus.windows.dropped)}")
    return EXIT_OK


def _source_events(path) -> list[SourceEvent]:
    rows = loaders.load_jsonl(path)
    out = []
    for n, row in enumerate(rows, start=1):
        try:
            out.append(SourceEvent.from_dict(row))
        except (DecodeError, AttributeError) as exc:
            raise InputError(f"{path}: record {n}: {exc}") from None
    return out


def cmd_build_windows(args, cfg: RunConfig) -> int:
    _require(args, "src", "pred", "doc_index", "skeletons", "intent_map", "out")
    src = _source_events(args.src)
    pred = _source_events(args.pred)
    try:
        docs = [DocInfo.from_dict(r) for r in loaders.load_jsonl(args.doc_index)]
    except (DecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{args.doc_index}: {exc}") from None
    by_intent = {}
    for sk in loaders.load_skeletons(args.skeletons).values():
        if sk.intent_id in by_intent:
            raise InputError(f"{args.skeletons}: two skeletons for intent {sk.intent_id!r}")
        by_intent[sk.intent_id] = sk
    intent_map = loaders.load_json(args.intent_map)
    if not isinstance(intent_map, dict):
        raise InputError(f"{args.intent_map}: expected an object group -> intent_id")
    override = loaders.load_json(args.stage_override) if args.stage_override else {}
    try:
        StageMapConfig(args.dataset, override)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    types = tuple(t for t in args.eligible_types.split(",") if t)
    try:
        bundle = build_windows(src, pred, docs, by_intent, intent_map, cfg.seed, args.dataset,
                               types, args.cross_split, override or None, params=cfg.align)
    except KeyError as exc:
        raise InputError(f"build-windows: {exc}") from None
    root = Path(args.out)
    _write_tree(root, bundle_files(bundle, {s.skeleton_id: s for s in by_intent.values()}))
    loaders.write_text(root / "dropped.jsonl", loaders.jsonl_text(bundle.dropped))
    loaders.write_sidecar(root / "build-windows", "build-windows",
                          {**cfg.to_dict(), "dataset": args.dataset,
                           "cross_split": args.cross_split, "eligible_types": list(types)},
                          _input_files(args, "src", "pred", "doc_index", "skeletons",
                                       "intent_map", "stage_override"))
    print(f"windows\t{len(bundle.window_inputs)}\tdropped\t{len(bundle.dropped)}")
    return EXIT_OK


def cmd_perturb(args, cfg: RunConfig) -> int:
    _require(args, "out")
    contexts = _window_filter(args, _contexts(args))
    kinds = [k for k in args.kinds.split(",") if k]
    bad = [k for k in kinds if k not in bperturb.KINDS]
    if bad:
        raise InputError(f"unknown perturbation kinds {bad}")
    rows = []
    for wid in sorted(contexts):
        ctx = contexts[wid]
        for cid in ctx.roster:
            traj = ctx.trajectories[cid]
            if not traj.events:
                continue
            for kind in kinds:
                for i in range(args.per_kind):
                    rows.append(bperturb.perturb_trajectory(traj, kind, cfg.seed, i).to_dict())
    loaders.write_jsonl(args.out, rows)
    loaders.write_sidecar(args.out, "perturb",
                          {**cfg.to_dict(), "kinds": kinds, "per_kind": args.per_kind},
                          _input_files(args, *CTX_FILES, "window_list"))
    return EXIT_OK


def cmd_pairs(args, cfg: RunConfig) -> int:
    _require(args, "out")
    contexts = _window_filter(args, _contexts(args))
    extra = loaders.load_extra_trajectories(args.negatives) if args.negatives else None
    rows = bpairs.mine_preference_pairs(contexts, extra, cfg.align)
    loaders.write_jsonl(args.out, [p.to_dict() for p in rows])
    loaders.write_sidecar(args.out, "pairs", cfg.to_dict(),
                          _input_files(args, *CTX_FILES, "negatives", "window_list"))
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate, "align": cmd_align, "train-rm": cmd_train_rm, "rank": cmd_rank,
    "verify": cmd_verify, "reward": cmd_reward, "evaluate": cmd_evaluate, "gen": cmd_gen,
    "build-windows": cmd_build_windows, "perturb": cmd_perturb, "pairs": cmd_pairs,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--k", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--config")
    common.add_argument("--jobs", type=int)
    common.add_argument("--report")
    common.add_argument("--verbose", action="store_true")
    ctx = _Parser(add_help=False)
    for flag in ("--windows", "--trajs", "--skeletons", "--docs"):
        ctx.add_argument(flag)
    ctx.add_argument("--window-list", help="text file of window ids to keep")

    parser = _Parser(prog="certrank", description="Evidence-certified candidate ranking tools")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("validate", parents=[common, ctx], help="feasibility reports")
    p.add_argument("--outputs")
    p = sub.add_parser("align", parents=[common, ctx], help="alignment dumps and features")
    p = sub.add_parser("train-rm", parents=[common, ctx], help="fit the trajectory reward model")
    p.add_argument("--labels")
    p.add_argument("--pairs")
    p.add_argument("--negatives", help="train-only perturbed trajectories")
    p.add_argument("--model")
    p.add_argument("--split", default="train", choices=("train", "dev", "test", "all"))
    p = sub.add_parser("rank", parents=[common, ctx], help="baseline rankers")
    p.add_argument("--method", default="rm_only", choices=("rm_only", "lp", "landmark", "fusion"))
    p.add_argument("--model")
    p.add_argument("--samples", help="JSONL of {window_id, rankings} for fusion")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--outputs")
    p = sub.add_parser("verify", parents=[common, ctx], help="reconstruction and cycle rewards")
    p.add_argument("--outputs")
    p = sub.add_parser("reward", parents=[common, ctx], help="shaped rewards and advantages")
    p.add_argument("--batch")
    p.add_argument("--model")
    p = sub.add_parser("evaluate", parents=[common, ctx], help="full metrics report")
    p.add_argument("--outputs")
    p.add_argument("--labels")
    p.add_argument("--reextract", help="JSONL of external per-span pass/fail judgements")
    p.add_argument("--tau-ov", dest="tau_ov", type=float)
    p = sub.add_parser("gen", parents=[common], help="synthetic corpus")
    p.add_argument("--out")
    p.add_argument("--n-windows", dest="n_windows", type=int)
    p.add_argument("--roster-size", dest="roster_size", type=int)
    p.add_argument("--positives", dest="positives_per_window", type=int)
    p.add_argument("--intents", dest="n_intents", type=int)
    p.add_argument("--drop-rate", dest="drop_rate", type=float)
    p.add_argument("--role-corruption", dest="role_corruption", type=float)
    p.add_argument("--time-jitter", dest="time_jitter", type=float)
    p = sub.add_parser("build-windows", parents=[common], help="windows from event records")
    p.add_argument("--src")
    p.add_argument("--pred")
    p.add_argument("--doc-index", dest="doc_index")
    p.add_argument("--skeletons")
    p.add_argument("--intent-map", dest="intent_map")
    p.add_argument("--stage-override", dest="stage_override")
    p.add_argument("--dataset", default="synthetic", choices=DATASETS)
    p.add_argument("--cross-split", dest="cross_split", default="repair",
                   choices=("repair", "drop"))
    p.add_argument("--eligible-types", dest="eligible_types", default="PER")
    p.add_argument("--out")
    p = sub.add_parser("perturb", parents=[common, ctx], help="train-only negatives")
    p.add_argument("--kinds", default=",".join(bperturb.KINDS))
    p.add_argument("--per-kind", dest="per_kind", type=int, default=1)
    p.add_argument("--out")
    p = sub.add_parser("pairs", parents=[common, ctx], help="preference pairs")
    p.add_argument("--negatives")
    p.add_argument("--out")
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = RunConfig(args)
        return COMMANDS[args.command](args, cfg)
    except (InputError, DecodeError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - anything else is an invariant failure
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
