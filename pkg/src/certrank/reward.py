"""Linear trajectory reward fitted with a MaxEnt listwise term plus Bradley-Terry pairs."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.special import log_expit, logsumexp

from .aligner import AlignParams, compute_features
from .records import PreferencePair, Trajectory, WindowContext, WindowLabel

MODEL_VERSION = 1


class RewardTrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardTrainConfig:
    alpha_pair: float = 1.0
    lambda_l2: float = 1e-3
    learning_rate: float = 0.1
    max_iters: int = 5000
    grad_tol: float = 1e-6

    def __post_init__(self) -> None:
        if not self.lambda_l2 >= 0 or not self.alpha_pair >= 0:
            raise ValueError("alpha_pair and lambda_l2 must be >= 0")
        if not self.learning_rate > 0 or self.max_iters < 0:
            raise ValueError("learning_rate must be > 0 and max_iters >= 0")


@dataclass(frozen=True)
class WindowData:
    """Comparison set features (rows) and the indices of positive rows."""

    features: np.ndarray
    positives: tuple[int, ...]
    window_id: str = ""


@dataclass(frozen=True)
class PairData:
    better: np.ndarray
    worse: np.ndarray


@dataclass
class RewardModel:
    theta: np.ndarray
    layout: tuple[str, ...] = ()
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    config: Mapping[str, Any] = field(default_factory=dict)
    objective: float | None = None
    iterations: int = 0

    @property
    def dim(self) -> int:
        return len(self.theta)

    def standardize(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"feature dimension {x.shape[-1]} != model dimension {self.dim}")
        if self.mean is not None:
            x = x - self.mean
        if self.scale is not None:
            x = x / self.scale
        return x

    def to_dict(self) -> dict[str, Any]:
        d = len(self.theta)
        return {
            "version": MODEL_VERSION,
            "layout": list(self.layout),
            "mean": [float(v) for v in (self.mean if self.mean is not None else np.zeros(d))],
            "scale": [float(v) for v in (self.scale if self.scale is not None else np.ones(d))],
            "theta": [float(v) for v in self.theta],
            "config": dict(self.config),
            "objective": self.objective,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RewardModel":
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')!r}")
        theta = np.array(d["theta"], dtype=float)
        mean = np.array(d["mean"], dtype=float)
        scale = np.array(d["scale"], dtype=float)
        if not (len(theta) == len(mean) == len(scale) == len(d["layout"])):
            raise ValueError("model vectors disagree with layout length")
        return cls(theta=theta, layout=tuple(d["layout"]), mean=mean, scale=scale,
                   config=dict(d.get("config", {})), objective=d.get("objective"),
                   iterations=int(d.get("iterations", 0)))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RewardModel":
        return cls.from_dict(json.loads(text))


def score(model: RewardModel, features) -> float | np.ndarray:
    """θ·φ after the model's frozen standardization; rows score independently."""
    x = model.standardize(np.asarray(getattr(features, "values", features), dtype=float))
    return x @ model.theta


def _data_terms(theta: np.ndarray, windows: Sequence[WindowData], pairs: Sequence[PairData],
                alpha_pair: float) -> tuple[float, np.ndarray, int]:
    obj = 0.0
    grad = np.zeros_like(theta)
    used = 0
    for w in windows:
        if not w.positives:
            continue
        x = np.asarray(w.features, dtype=float)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError(f"window {w.window_id!r}: empty comparison set")
        r = x @ theta
        log_z = logsumexp(r)
        p = np.exp(r - log_z)
        expected = p @ x
        pos = list(w.positives)
        obj += float(np.mean(r[pos] - log_z))
        grad += x[pos].mean(axis=0) - expected
        used += 1
    if pairs and alpha_pair:
        b = np.array([p.better for p in pairs], dtype=float)
        wv = np.array([p.worse for p in pairs], dtype=float)
        diff = b - wv
        delta = diff @ theta
        obj += alpha_pair * float(np.sum(log_expit(delta)))
        grad += alpha_pair * (np.exp(log_expit(-delta)) @ diff)
    return obj, grad, used + len(pairs)


def objective_and_gradient(theta, windows: Sequence[WindowData], pairs: Sequence[PairData],
                           config: RewardTrainConfig = RewardTrainConfig()) -> tuple[float, np.ndarray]:
    """The summed objective (windows without positives skipped) and its gradient."""
    theta = np.asarray(theta, dtype=float)
    obj, grad, _ = _data_terms(theta, windows, pairs, config.alpha_pair)
    obj -= 0.5 * config.lambda_l2 * float(theta @ theta)
    grad = grad - config.lambda_l2 * theta
    return obj, grad


def normalized_objective_and_gradient(theta, windows, pairs, config) -> tuple[float, np.ndarray]:
    """Data terms averaged over contributing windows and pairs, minus the L2 term.

    This is the objective ``fit`` maximizes; averaging makes the maximizer
    independent of how many copies of the dataset are supplied.
    """
    theta = np.asarray(theta, dtype=float)
    obj, grad, n = _data_terms(theta, windows, pairs, config.alpha_pair)
    n = max(n, 1)
    obj = obj / n - 0.5 * config.lambda_l2 * float(theta @ theta)
    grad = grad / n - config.lambda_l2 * theta
    return obj, grad


def standardization(windows: Sequence[WindowData], pairs: Sequence[PairData],
                    dim: int) -> tuple[np.ndarray, np.ndarray]:
    rows = [np.asarray(w.features, dtype=float) for w in windows if len(w.features)]
    rows += [np.array([p.better, p.worse], dtype=float) for p in pairs]
    if not rows:
        return np.zeros(dim), np.ones(dim)
    x = np.vstack(rows)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    constant = std <= 1e-12
    mean[constant] = 0.0
    std[constant] = 1.0
    return mean, std


def fit(windows: Sequence[WindowData], pairs: Sequence[PairData] = (),
        config: RewardTrainConfig = RewardTrainConfig(), seed: int = 0,
        layout: Sequence[str] = (), standardize: bool = True) -> RewardModel:
    """Full-batch gradient ascent from θ = 0.

    Step sizes follow the Barzilai-Borwein rule with an Armijo backtracking
    guard, starting from ``config.learning_rate``.  ``seed`` does not affect
    the result; the objective is deterministic.
    """
    del seed
    contributing = [w for w in windows if w.positives]
    if not contributing and not pairs:
        raise RewardTrainingError("no window with positives and no preference pairs")
    dim = (np.asarray(contributing[0].features).shape[1] if contributing
           else len(pairs[0].better))
    if standardize:
        mean, scale = standardization(windows, pairs, dim)
    else:
        mean, scale = np.zeros(dim), np.ones(dim)
    z_windows = [WindowData((np.asarray(w.features, dtype=float) - mean) / scale, w.positives,
                            w.window_id) for w in contributing]
    z_pairs = [PairData((np.asarray(p.better, dtype=float) - mean) / scale,
                        (np.asarray(p.worse, dtype=float) - mean) / scale) for p in pairs]

    def evaluate(theta):
        f, g = normalized_objective_and_gradient(theta, z_windows, z_pairs, config)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise RewardTrainingError(
                f"non-finite objective {f!r} at |theta|={np.linalg.norm(theta):.3g}; "
                "check feature scales")
        return f, g

    theta = np.zeros(dim)
    f, g = evaluate(theta)
    step = config.learning_rate
    iters = 0
    while iters < config.max_iters and np.max(np.abs(g)) >= config.grad_tol:
        iters += 1
        gg = float(g @ g)
        s = step
        while True:
            cand = theta + s * g
            fc, gc = evaluate(cand)
            if fc >= f + 1e-4 * s * gg:
                break
            s *= 0.5
            if s < 1e-18:
                break
        if fc < f:
            break  # no ascent direction left at machine precision
        d_theta = cand - theta
        d_grad = gc - g
        curvature = -float(d_theta @ d_grad)
        step = float(d_theta @ d_theta) / curvature if curvature > 0 else config.learning_rate
        step = min(max(step, 1e-10), 1e10)
        theta, f, g = cand, fc, gc

    return RewardModel(theta=theta, layout=tuple(layout), mean=mean, scale=scale,
                       config=asdict(config), objective=float(f), iterations=iters)


def graph_dim_of(layout: Sequence[str]) -> int:
    return sum(1 for name in layout if name.startswith("graph_"))


def trajectory_features(ctx: WindowContext, trajectory: Trajectory, params: AlignParams,
                        graph_dim: int = 0, graph_features=None) -> np.ndarray:
    return compute_features(ctx.skeleton, trajectory, trajectory.candidate_id, params,
                            graph_features, graph_dim).values


def candidate_scores(model: RewardModel, ctx: WindowContext,
                     params: AlignParams = AlignParams(),
                     graph_features: Mapping[str, Sequence[float]] | None = None) -> dict[str, float]:
    """R_θ for every roster candidate of a window."""
    dim = graph_dim_of(model.layout)
    out = {}
    for cid in ctx.roster:
        g = graph_features.get(cid) if graph_features else None
        out[cid] = float(score(model, trajectory_features(ctx, ctx.trajectories[cid], params,
                                                          dim, g)))
    return out


def build_training_data(contexts: Mapping[str, WindowContext],
                        labels: Mapping[str, WindowLabel],
                        pairs: Sequence[PreferencePair] = (),
                        params: AlignParams = AlignParams(), graph_dim: int = 0,
                        extra: Mapping[str, Sequence[Trajectory]] | None = None,
                        ) -> tuple[list[WindowData], list[PairData]]:
    """Comparison sets from roster trajectories plus optional extra negatives.

    ``extra`` maps window_id to additional (train-only) trajectories that join
    the comparison set as non-positives and may be referenced by pairs.
    """
    windows: list[WindowData] = []
    pair_rows: list[PairData] = []
    by_tid: dict[tuple[str, str], np.ndarray] = {}
    for wid in sorted(contexts):
        ctx = contexts[wid]
        trajs = [ctx.trajectories[c] for c in ctx.roster] + list((extra or {}).get(wid, ()))
        rows = [trajectory_features(ctx, t, params, graph_dim) for t in trajs]
        for t, r in zip(trajs, rows):
            by_tid[(wid, t.trajectory_id)] = r
        label = labels.get(wid)
        positive = set(label.positive_ids) if label else set()
        pos_idx = tuple(i for i, c in enumerate(ctx.roster) if c in positive)
        windows.append(WindowData(np.array(rows), pos_idx, wid))
    for p in pairs:
        b = by_tid.get((p.window_id, p.better))
        w = by_tid.get((p.window_id, p.worse))
        if b is None or w is None:
            raise ValueError(f"pair in {p.window_id!r} references unknown trajectory "
                             f"{p.better if b is None else p.worse!r}")
        pair_rows.append(PairData(b, w))
    return windows, pair_rows
