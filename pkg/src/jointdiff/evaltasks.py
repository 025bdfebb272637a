"""Evaluation tasks behind `jointdiff eval --task ...`.

Each task loads trained checkpoints, runs its oracle from the data module, and
compares metrics against the thresholds in config.eval.thresholds.
"""

from __future__ import annotations

import numpy as np
import torch
from scipy import stats

from .checkpoint import load_joint_model
from .data import PairDataset, condition_fidelity, gaussian_conditional_check
from .errors import ConfigError
from .sampling import ReplacementSpec, build_plan, run_plan


def _require(args, name: str):
    value = getattr(args, name, None)
    if value is None:
        raise ConfigError(f"eval task needs --{name}")
    return value


def gauss_conditional(cfg, args):
    model, schedule = load_joint_model(_require(args, "base"), _require(args, "adapter"))
    if cfg.data is None or cfg.data.kind != "gauss_pair":
        raise ConfigError("gauss_conditional needs config.data.kind == 'gauss_pair'")
    rho = float(cfg.data.params.get("rho", 0.0))
    ev = cfg.eval
    th = ev.get("thresholds", {})
    res = gaussian_conditional_check(
        model, schedule, rho,
        y_star=float(ev.get("params", {}).get("y_star", 1.0)),
        n_samples=int(ev.get("n_samples", 2000)),
        seed=int(ev.get("seed", 0)),
    )
    passed = res["mean_err"] <= float(th.get("mean_err_max", 0.1)) and (
        float(th.get("var_ratio_min", 0.75)) <= res["var_ratio"] <= float(th.get("var_ratio_max", 1.25))
    )
    return res, bool(passed)


def _blob_eval_pairs(cfg, n, seed_tag="eval"):
    spec = cfg.data
    if spec is None or spec.kind != "blob2d":
        raise ConfigError("this task needs config.data.kind == 'blob2d'")
    ds = PairDataset(spec)
    # large fixed index keeps eval pairs disjoint from training batches
    x, y = ds.batch(10_000_000 + cfg.seed, n)
    return x, y


def blob_fidelity(cfg, args):
    model, schedule = load_joint_model(_require(args, "base"), _require(args, "adapter"))
    ev = cfg.eval
    th = ev.get("thresholds", {})
    n = int(ev.get("n_samples", 64))
    S = int(ev.get("S", 25))
    seed = int(ev.get("seed", 0))
    _, y = _blob_eval_pairs(cfg, n)

    plan = build_plan("x_given_y", S)
    x_cond, _ = run_plan(model, plan, schedule, inputs={"y": y}, seed=seed)
    cond_fid = condition_fidelity(x_cond.numpy(), y.numpy())

    plan_u = build_plan("joint", S)
    x_unc, _ = run_plan(model, plan_u, schedule, n=n, seed=seed + 1, shape=tuple(y.shape[1:]))
    unc_fid = condition_fidelity(x_unc.numpy(), y.numpy())

    metrics = {"conditional_fidelity": cond_fid, "unconditional_fidelity": unc_fid,
               "ratio": cond_fid / unc_fid if unc_fid > 0 else float("inf")}
    passed = metrics["ratio"] < float(th.get("max_ratio", 0.5))
    return metrics, bool(passed)


def coarse_monotonicity(cfg, args):
    model, schedule = load_joint_model(_require(args, "base"), _require(args, "adapter"))
    ev = cfg.eval
    th = ev.get("thresholds", {})
    n = int(ev.get("n_seeds", 200))
    S = int(ev.get("S", 25))
    seed = int(ev.get("seed", 0))
    _, y = _blob_eval_pairs(cfg, n)

    fractions = ev.get("params", {}).get("fractions", [0.0, 0.2, 0.5, 0.8, 1.0])
    levels, dists = [], []
    for frac in fractions:
        start = int(round(frac * S))
        if start == 0:
            y_out = y
        else:
            plan = build_plan("coarse", S, t_y_start=start) if start < S else build_plan("joint", S)
            _, y_out = run_plan(model, plan, schedule, inputs={"y": y}, seed=seed)
        per_sample = ((y_out - y) ** 2).mean(dim=(1, 2, 3)).numpy()
        levels.extend([frac] * n)
        dists.extend(per_sample.tolist())
    rho, p = stats.spearmanr(levels, dists)
    metrics = {"spearman_rho": float(rho), "p_value": float(p),
               "mean_distance_by_level": {str(f): float(np.mean(dists[i * n:(i + 1) * n]))
                                          for i, f in enumerate(fractions)}}
    passed = rho > float(th.get("min_rho", 0.0)) and p < float(th.get("max_p", 0.01))
    return metrics, bool(passed)


def guidance_gain(cfg, args):
    model, schedule = load_joint_model(_require(args, "base"), _require(args, "adapter"))
    ev = cfg.eval
    th = ev.get("thresholds", {})
    n = int(ev.get("n_seeds", 100))
    S = int(ev.get("S", 25))
    seed = int(ev.get("seed", 0))
    w_r = float(ev.get("params", {}).get("w_r", 30.0))
    _, y = _blob_eval_pairs(cfg, n)

    c, h, w = y.shape[1:]
    mask = np.ones((c, h, w), dtype=np.float32)
    mask[:, :, : w // 2] = 0.0  # left half of the condition is known
    known = 1.0 - mask

    plan_r = build_plan("joint", S)
    plan_r.replacement = [ReplacementSpec("y", mask)]
    _, y_repl = run_plan(model, plan_r, schedule, inputs={"y": y}, seed=seed)

    plan_g = build_plan("partial", S, mask_y=mask, w_r=w_r)
    _, y_guided = run_plan(model, plan_g, schedule, inputs={"y": y}, seed=seed)

    km = torch.as_tensor(known)
    err_repl = float((((y_repl - y) * km) ** 2).sum(dim=(1, 2, 3)).div(km.sum()).mean())
    err_guided = float((((y_guided - y) * km) ** 2).sum(dim=(1, 2, 3)).div(km.sum()).mean())
    metrics = {"replacement_error": err_repl, "guided_error": err_guided,
               "ratio": err_guided / err_repl if err_repl > 0 else float("inf")}
    passed = metrics["ratio"] <= float(th.get("max_ratio", 0.7))
    return metrics, bool(passed)


TASKS = {
    "gauss_conditional": gauss_conditional,
    "blob_fidelity": blob_fidelity,
    "coarse_monotonicity": coarse_monotonicity,
    "guidance_gain": guidance_gain,
}
