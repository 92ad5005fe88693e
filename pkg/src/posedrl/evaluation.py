"""Greedy rollouts, PCK / mean-error metrics, repeated evaluation and the beta sweep."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .net import NetConfig, QNetwork
from .pose_graph import LANDMARK_NAMES, N_LANDMARKS
from .reward import RewardConfig
from .rng import substream
from .volume import ACTION_VECTORS, LabeledVolume, env_step, extract_patches, initial_positions


@dataclass
class PathTrace:
    paths: list[list[tuple[int, int, int]]]  # per agent, init to stop
    final: np.ndarray  # (K, 3) reported positions
    stopped_at: list[int]  # step index at which each agent stopped (max_steps if never)

    def max_step_displacement(self) -> int:
        worst = 0
        for path in self.paths:
            p = np.asarray(path)
            if len(p) > 1:
                worst = max(worst, int(np.abs(np.diff(p, axis=0)).max()))
        return worst


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def run_inference(v: LabeledVolume, q_function: Callable[[np.ndarray], np.ndarray], patch: int,
                  max_steps: int = 100, seed=0, step_voxels: int = 1,
                  init_fraction: float = 0.15,
                  observe: Callable[[LabeledVolume, np.ndarray], np.ndarray] | None = None,
                  ) -> tuple[np.ndarray, PathTrace]:
    """Greedy multi-agent search from random central starts.

    ``q_function`` maps the agents' observations to (K, 6) Q-values; by default
    an observation is the stack of patches centred on the agents, ``observe``
    replaces that (stub policies use the raw positions).

    An agent stops once its new position equals the one it held two steps
    earlier; it then reports the rounded midpoint of the oscillating pair.
    Stopped agents stay put but keep feeding their patch to the network.
    """
    pos = initial_positions(v.dims, seed, init_fraction)
    k = len(pos)
    paths = [[tuple(int(c) for c in p)] for p in pos]
    active = np.ones(k, dtype=bool)
    final = pos.astype(np.int64).copy()
    stopped_at = [max_steps] * k
    for t in range(max_steps):
        if not active.any():
            break
        obs = observe(v, pos) if observe is not None else extract_patches(v.voxels, pos, patch)
        q = q_function(obs)
        actions = np.argmax(q, axis=1)
        new = env_step(pos, actions, v.dims, step_voxels)
        new[~active] = pos[~active]
        for i in np.flatnonzero(active):
            paths[i].append(tuple(int(c) for c in new[i]))
            if len(paths[i]) >= 3 and paths[i][-1] == paths[i][-3]:
                active[i] = False
                final[i] = _round_half_up((np.array(paths[i][-1]) + np.array(paths[i][-2])) / 2.0)
                stopped_at[i] = t + 1
        pos = new
        final[active] = pos[active]
    return final, PathTrace(paths, final.copy(), stopped_at)


def network_policy(net: QNetwork) -> Callable[[np.ndarray], np.ndarray]:
    """Inference-mode Q function; the network's own train/eval mode is left untouched."""
    return net.q_values


# -------------------------------------------------------------------- metrics


def _distances_mm(preds, gts, spacing_mm) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape:
        raise ValueError(f"prediction shape {preds.shape} != ground truth {gts.shape}")
    spacing = np.broadcast_to(np.asarray(spacing_mm, dtype=np.float64), preds.shape[:-2] + (3,))
    diff = (preds - gts) * spacing[..., None, :]
    dx, dy, dz = diff[..., 0], diff[..., 1], diff[..., 2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def pck(preds, gts, spacing_mm, threshold_mm: float = 10.0) -> tuple[np.ndarray, float]:
    """Per-landmark and aggregate percentage of predictions within ``threshold_mm`` (inclusive).

    ``preds``/``gts`` are (V, K, 3) voxel coordinates; ``spacing_mm`` is (3,) or (V, 3).
    The aggregate averages over all (volume, landmark) pairs.
    """
    hit = _distances_mm(preds, gts, spacing_mm) <= threshold_mm
    hit = hit.reshape(-1, hit.shape[-1])
    n = hit.shape[0]
    per = np.array([100.0 * int(c) / n for c in hit.sum(axis=0)])
    return per, 100.0 * int(hit.sum()) / hit.size


def mean_error(preds, gts, spacing_mm) -> tuple[np.ndarray, float]:
    """Per-landmark and aggregate mean Euclidean error in mm.

    Sums are exactly rounded (``math.fsum``) so the result does not depend on
    summation order.
    """
    d = _distances_mm(preds, gts, spacing_mm)
    d = d.reshape(-1, d.shape[-1])
    per = np.array([math.fsum(col) / len(col) for col in d.T])
    return per, math.fsum(d.ravel()) / d.size


@dataclass
class EvalResult:
    pck: np.ndarray  # (K,) mean over repeats
    mean_mm: np.ndarray
    pck_sd: np.ndarray
    mean_mm_sd: np.ndarray
    pck_all: float  # micro average over (volume, landmark) pairs
    mean_mm_all: float
    pck_all_sd: float
    mean_mm_all_sd: float
    pck_macro: float  # mean of per-landmark values
    mean_mm_macro: float
    threshold_mm: float
    n_volumes: int
    n_repeats: int
    predictions: list[np.ndarray] = field(default_factory=list, repr=False)

    def report(self) -> str:
        lines = [f"PCK ({self.threshold_mm:g} mm) and mean error over {self.n_volumes} volumes x "
                 f"{self.n_repeats} repeats",
                 f"{'landmark':<12}{'PCK %':>10}{'sd':>8}{'mean mm':>10}{'sd':>8}"]
        for i, name in enumerate(LANDMARK_NAMES):
            lines.append(f"{name:<12}{self.pck[i]:>10.2f}{self.pck_sd[i]:>8.2f}"
                         f"{self.mean_mm[i]:>10.2f}{self.mean_mm_sd[i]:>8.2f}")
        lines.append(f"{'all':<12}{self.pck_all:>10.2f}{self.pck_all_sd:>8.2f}"
                     f"{self.mean_mm_all:>10.2f}{self.mean_mm_all_sd:>8.2f}")
        lines.append(f"{'all (macro)':<12}{self.pck_macro:>10.2f}{'':>8}{self.mean_mm_macro:>10.2f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["landmark", "pck", "mean_mm", "pck_sd", "mean_mm_sd"])
        for i, name in enumerate(LANDMARK_NAMES):
            w.writerow([name, f"{self.pck[i]:.6f}", f"{self.mean_mm[i]:.6f}",
                        f"{self.pck_sd[i]:.6f}", f"{self.mean_mm_sd[i]:.6f}"])
        w.writerow(["all", f"{self.pck_all:.6f}", f"{self.mean_mm_all:.6f}",
                    f"{self.pck_all_sd:.6f}", f"{self.mean_mm_all_sd:.6f}"])
        w.writerow(["all_macro", f"{self.pck_macro:.6f}", f"{self.mean_mm_macro:.6f}", "", ""])
        return buf.getvalue()


def summarize(per_repeat_preds: Sequence[np.ndarray], volumes: Sequence[LabeledVolume],
              threshold_mm: float = 10.0) -> EvalResult:
    gts = np.stack([v.landmarks_gt for v in volumes])
    spacing = np.array([v.spacing_mm for v in volumes])
    per_pck, per_err, all_pck, all_err = [], [], [], []
    for preds in per_repeat_preds:
        lp, ap = pck(preds, gts, spacing, threshold_mm)
        le, ae = mean_error(preds, gts, spacing)
        per_pck.append(lp)
        per_err.append(le)
        all_pck.append(ap)
        all_err.append(ae)
    per_pck, per_err = np.array(per_pck), np.array(per_err)
    mp, me = per_pck.mean(axis=0), per_err.mean(axis=0)
    return EvalResult(
        pck=mp, mean_mm=me, pck_sd=per_pck.std(axis=0), mean_mm_sd=per_err.std(axis=0),
        pck_all=float(np.mean(all_pck)), mean_mm_all=float(np.mean(all_err)),
        pck_all_sd=float(np.std(all_pck)), mean_mm_all_sd=float(np.std(all_err)),
        pck_macro=float(mp.mean()), mean_mm_macro=float(me.mean()),
        threshold_mm=threshold_mm, n_volumes=len(volumes), n_repeats=len(per_repeat_preds),
        predictions=list(per_repeat_preds),
    )


def evaluate_dataset(volumes: Sequence[LabeledVolume], q_function=None, patch: int = 24, repeats: int = 3,
                     seed: int = 0, threshold_mm: float = 10.0, max_steps: int = 100,
                     predictor: Callable[[LabeledVolume, np.random.Generator], np.ndarray] | None = None,
                     init_fraction: float = 0.15) -> EvalResult:
    """Evaluate every volume ``repeats`` times, each repeat with its own start-position stream.

    ``predictor`` replaces the network rollout (used by tests and oracle hooks).
    """
    if not volumes:
        raise ValueError("no evaluation volumes")
    if predictor is None and q_function is None:
        raise ValueError("need a q_function or a predictor")
    runs = []
    for r in range(repeats):
        rng = substream(seed, f"eval-{r}")
        preds = []
        for v in volumes:
            if predictor is not None:
                preds.append(np.asarray(predictor(v, rng), dtype=np.float64))
            else:
                final, _ = run_inference(v, q_function, patch, max_steps, rng, init_fraction=init_fraction)
                preds.append(final.astype(np.float64))
        runs.append(np.stack(preds))
    return summarize(runs, volumes, threshold_mm)


def oracle_predictor(v: LabeledVolume, rng=None) -> np.ndarray:
    return v.landmarks_gt.copy()


def positions_observer(v: LabeledVolume, pos: np.ndarray) -> np.ndarray:
    return np.array(pos, copy=True)


def oracle_policy(v: LabeledVolume) -> Callable[[np.ndarray], np.ndarray]:
    """Q-values from positions (see ``positions_observer``) that point each agent at its landmark."""
    target = np.floor(v.landmarks_gt + 0.5).astype(np.int64)

    def q_function(pos: np.ndarray) -> np.ndarray:
        return ((target - pos) @ ACTION_VECTORS.T).astype(np.float64)

    return q_function


# ---------------------------------------------------------------- beta sweep


@dataclass
class SweepRow:
    beta: float
    seed: int
    result: EvalResult


def train_and_evaluate(train_volumes, eval_volumes, train_cfg, net_cfg: NetConfig, reward_cfg: RewardConfig,
                       repeats: int = 3, threshold_mm: float = 10.0, eval_seed: int = 1234,
                       max_steps: int = 100):
    from .trainer import Trainer

    trainer = Trainer(train_volumes, train_cfg, net_cfg, reward_cfg, deterministic=True)
    trainer.run_sync()
    net = trainer.model.net
    result = evaluate_dataset(eval_volumes, network_policy(net), net_cfg.encoder.patch, repeats,
                              eval_seed, threshold_mm, max_steps, init_fraction=train_cfg.init_fraction)
    return trainer, result


def beta_sweep(train_volumes, eval_volumes, train_cfg, net_cfg: NetConfig, betas=(0, 1, 2, 5),
               seeds=(0,), repeats: int = 3, threshold_mm: float = 10.0,
               on_done: Callable[[SweepRow, object], None] | None = None,
               reward_cfg: RewardConfig = RewardConfig()) -> list[SweepRow]:
    """Train one model per (beta, seed) under identical settings and evaluate each."""
    rows = []
    for beta in betas:
        for seed in seeds:
            cfg = replace(train_cfg, seed=seed)
            rcfg = replace(reward_cfg, beta=float(beta))
            trainer, result = train_and_evaluate(train_volumes, eval_volumes, cfg, net_cfg, rcfg,
                                                 repeats, threshold_mm)
            row = SweepRow(float(beta), seed, result)
            rows.append(row)
            if on_done is not None:
                on_done(row, trainer)
    return rows


def sweep_table(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["beta", "seed", "pck_all", "mean_mm_all", "pck_macro", "mean_mm_macro"])
    for r in rows:
        w.writerow([f"{r.beta:g}", r.seed, f"{r.result.pck_all:.4f}", f"{r.result.mean_mm_all:.4f}",
                    f"{r.result.pck_macro:.4f}", f"{r.result.mean_mm_macro:.4f}"])
    return buf.getvalue()


__all__ = [
    "PathTrace", "EvalResult", "SweepRow", "run_inference", "pck", "mean_error", "evaluate_dataset",
    "beta_sweep", "sweep_table", "summarize", "oracle_predictor", "oracle_policy", "positions_observer", "network_policy", "N_LANDMARKS",
]
