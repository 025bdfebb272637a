"""Sampling-plan engine.

A plan is an explicit per-step list of branch noise levels (t_x^i, t_y^i),
i = S..0, plus optional directives: latent replacement for known regions,
reconstruction guidance (gradient correction through the one-step clean-sample
prediction), multi-model combination weights, and condition-guidance
extrapolation. Presets materialize the standard schedules:

    joint       (S,S), (S-1,S-1), ..., (0,0)
    y_given_x   (0,S), (0,S-1), ..., (0,0)
    x_given_y   (S,0), (S-1,0), ..., (0,0)
    coarse      (S, c), (S-1, c'), ... with the held branch descending
                proportionally: t_y(i) = ceil(i * t_y_start / S)
    partial     the joint schedule with replacement + guidance directives
    estimate    y from noise with x held at a minor noise level (10% of S)
    interpolate x starts at lam*S, y at (1-lam)*S, both descend to 0

Plan levels live in [0, S]; execution maps level l to schedule timestep
round(l * T / S). A branch whose level starts at S receives pure noise; at 0
it must be given its clean input and is returned bit-identical; strictly
between, the clean input is forward-noised to that level.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DimensionError, InputError, NumericalFailure, ScheduleError
from .model import CombinedDenoiser, JointDenoiser
from .rng import torch_stream
from .schedule import NoiseSchedule, add_noise, predict_x0, reverse_step

PRESETS = ("joint", "x_given_y", "y_given_x", "coarse", "partial", "estimate", "interpolate")
ESTIMATION_NOISE_FRACTION = 0.1  # minor noise held on the conditioning image


@dataclass
class ReplacementSpec:
    branch: str  # "x" or "y"
    mask: np.ndarray  # binary, 0 = known region


@dataclass
class OptGuidanceConfig:
    method: str = "sgd"  # {"sgd", "adam"}
    lr: float = 0.05
    steps: int = 1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class GuidanceSpec:
    mode: str = "fixed_w"  # {"fixed_w", "optimizer"}
    w_r: float = 1.0
    masks: dict = field(default_factory=dict)  # branch -> binary mask, 0 = known
    optimizer: OptGuidanceConfig | None = None
    from_first_step: bool = True
    update_known: bool = False  # True also updates known coords (noted alternative)


@dataclass
class CombinationSpec:
    weights: list  # one (w_x_cond, w_cond_x) pair per model
    weights_unc: list | None = None  # second weight set for fine-grained condition guidance


@dataclass
class SamplingPlan:
    steps: list  # [(t_x, t_y), ...] levels, descending to (0, 0)
    S: int
    eta: float = 1.0
    replacement: list = field(default_factory=list)
    guidance: GuidanceSpec | None = None
    combination: CombinationSpec | None = None
    cond_guidance_k: float | None = None
    joint_weight: float = 1.0
    preset: str | None = None

    def __post_init__(self):
        if self.S < 1:
            raise ConfigError(f"S must be >= 1, got {self.S}")
        if len(self.steps) < 2:
            raise ConfigError("a plan needs at least two entries (start and terminal)")
        width = len(self.steps[0])
        for pair in self.steps:
            if len(pair) != width:
                raise ConfigError("ragged plan steps")
            for level in pair:
                if not (0 <= level <= self.S):
                    raise ConfigError(f"plan level {level} outside [0, {self.S}]")
        for prev, cur in zip(self.steps, self.steps[1:]):
            if any(c > p for p, c in zip(prev, cur)):
                raise ScheduleError(f"branch level increases: {prev} -> {cur}")
            if all(c == p for p, c in zip(prev, cur)):
                raise ScheduleError(f"step {prev} -> {cur} decreases no branch")
        if any(level != 0 for level in self.steps[-1]):
            raise ScheduleError(f"plan must terminate at all-zero levels, got {self.steps[-1]}")

    @property
    def n_branches(self) -> int:
        return len(self.steps[0])

    def manifest(self) -> dict:
        """JSON-safe description (mask arrays reduced to shape + digest)."""

        def mask_info(m):
            arr = np.asarray(m)
            return {"shape": list(arr.shape), "sha256": hashlib.sha256(arr.tobytes()).hexdigest()[:16]}

        out = {
            "preset": self.preset,
            "S": self.S,
            "eta": self.eta,
            "steps": [list(map(int, s)) for s in self.steps],
            "joint_weight": self.joint_weight,
            "cond_guidance_k": self.cond_guidance_k,
        }
        if self.replacement:
            out["replacement"] = [{"branch": r.branch, "mask": mask_info(r.mask)} for r in self.replacement]
        if self.guidance is not None:
            g = self.guidance
            out["guidance"] = {
                "mode": g.mode,
                "w_r": g.w_r,
                "from_first_step": g.from_first_step,
                "update_known": g.update_known,
                "masks": {b: mask_info(m) for b, m in g.masks.items()},
                "optimizer": None
                if g.optimizer is None
                else {"method": g.optimizer.method, "lr": g.optimizer.lr, "steps": g.optimizer.steps},
            }
        if self.combination is not None:
            out["combination"] = {
                "weights": [list(map(float, w)) for w in self.combination.weights],
                "weights_unc": None
                if self.combination.weights_unc is None
                else [list(map(float, w)) for w in self.combination.weights_unc],
            }
        return out


def _coarse_levels(i: int, start: int, S: int) -> int:
    return math.ceil(i * start / S)


def build_plan(preset: str, S: int, **params) -> SamplingPlan:
    """Materialize a preset schedule; see the module docstring for the laws."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}, expected one of {PRESETS}")
    if S < 1:
        raise ConfigError(f"S must be >= 1, got {S}")

    if preset == "joint":
        steps = [(i, i) for i in range(S, -1, -1)]
        return SamplingPlan(steps=steps, S=S, eta=params.pop("eta", 1.0), preset=preset, **params)
    if preset == "x_given_y":
        steps = [(i, 0) for i in range(S, -1, -1)]
        return SamplingPlan(steps=steps, S=S, eta=params.pop("eta", 1.0), preset=preset, **params)
    if preset == "y_given_x":
        steps = [(0, i) for i in range(S, -1, -1)]
        return SamplingPlan(steps=steps, S=S, eta=params.pop("eta", 0.0), preset=preset, **params)
    if preset == "coarse":
        start = params.pop("t_y_start")
        if not (0 <= start <= S):
            raise ConfigError(f"t_y_start must lie in [0, {S}], got {start}")
        steps = [(i, _coarse_levels(i, start, S)) for i in range(S, -1, -1)]
        return SamplingPlan(steps=steps, S=S, eta=params.pop("eta", 1.0), preset=preset, **params)
    if preset == "estimate":
        hold = params.pop("t_x_hold", int(round(ESTIMATION_NOISE_FRACTION * S)))
        steps = [(hold, i) for i in range(S, 0, -1)] + [(0, 0)]
        return SamplingPlan(steps=steps, S=S, eta=params.pop("eta", 0.0), preset=preset, **params)
    if preset == "partial":
        mask_y = params.pop("mask_y", None)
        mask_x = params.pop("mask_x", None)
        mode = params.pop("guidance_mode", "fixed_w")
        w_r = params.pop("w_r", 1.0)
        optimizer = params.pop("optimizer", None)
        from_first = params.pop("from_first_step", True)
        masks = {}
        replacement = []
        if mask_x is not None:
            masks["x"] = mask_x
            replacement.append(ReplacementSpec("x", np.asarray(mask_x)))
        if mask_y is not None:
            masks["y"] = mask_y
            replacement.append(ReplacementSpec("y", np.asarray(mask_y)))
        if not masks:
            raise ConfigError("partial preset needs mask_x and/or mask_y")
        guidance = GuidanceSpec(mode=mode, w_r=w_r, masks=masks, optimizer=optimizer, from_first_step=from_first)
        steps = [(i, i) for i in range(S, -1, -1)]
        return SamplingPlan(
            steps=steps, S=S, eta=params.pop("eta", 1.0), replacement=replacement,
            guidance=guidance, preset=preset, **params,
        )
    # interpolate
    lam = params.pop("lam")
    return build_interpolated_plan(S, lam, **params)


def build_interpolated_plan(S: int, lam: float, **params) -> SamplingPlan:
    """x starts at lam*S, y at (1-lam)*S; both descend in lock-step to 0.

    lam=1 reduces exactly to the x_given_y step list, lam=0 to y_given_x,
    lam=0.5 to a symmetric joint refinement from S/2.
    """
    if not (0.0 <= lam <= 1.0):
        raise ConfigError(f"lam must lie in [0, 1], got {lam}")
    sx = int(round(lam * S))
    sy = S - sx
    n = max(sx, sy)
    steps = [(min(sx, i), min(sy, i)) for i in range(n, -1, -1)]
    return SamplingPlan(steps=steps, S=S, eta=params.pop("eta", 1.0), preset="interpolate", **params)


def condition_guidance(eps_joint: torch.Tensor, eps_sep: torch.Tensor, k: float) -> torch.Tensor:
    """eps_sep + k * (eps_joint - eps_sep); k may exceed 1 (extrapolation).

    k = 1 and k = 0 return eps_joint / eps_sep exactly (no float round trip).
    """
    if eps_joint.shape != eps_sep.shape:
        raise DimensionError(f"shape mismatch: {tuple(eps_joint.shape)} vs {tuple(eps_sep.shape)}")
    if k == 1.0:
        return eps_joint
    if k == 0.0:
        return eps_sep
    return eps_sep + k * (eps_joint - eps_sep)


def latent_replacement(z_t, clean, mask, t, rng: torch.Generator, schedule: NoiseSchedule):
    """(1 - m) * AddNoise(clean, t) + m * z_t with m = 0 marking the known region."""
    mask_t = torch.as_tensor(np.asarray(mask), dtype=z_t.dtype, device=z_t.device)
    if mask_t.ndim == z_t.ndim - 1:
        mask_t = mask_t.unsqueeze(0)
    try:
        mask_b = torch.broadcast_to(mask_t, z_t.shape)
    except RuntimeError as exc:
        raise DimensionError(f"mask shape {tuple(mask_t.shape)} does not broadcast to {tuple(z_t.shape)}") from exc
    if int(t) == 0:
        noised = clean
    else:
        eps = torch.randn(z_t.shape, generator=rng, dtype=z_t.dtype)
        noised = add_noise(clean, int(t), eps, schedule)
    return (1.0 - mask_b) * noised + mask_b * z_t


def _as_mask(mask, like: torch.Tensor) -> torch.Tensor:
    m = torch.as_tensor(np.asarray(mask), dtype=like.dtype, device=like.device)
    if m.ndim == like.ndim - 1:
        m = m.unsqueeze(0)
    return torch.broadcast_to(m, like.shape)


def _recon_gradients(z_list, clean_list, known_list, eval_fn, taus, schedule):
    """One differentiable forward; returns (eps_list detached, grads wrt each z).

    The loss is the squared reconstruction error of every branch's known
    region through its one-step clean prediction; gradients flow through the
    model to every branch (the cross-branch coupling is the point: steering
    the free image region so the model reconstructs the known condition).
    """
    leafs = [z.detach().clone().requires_grad_(True) for z in z_list]
    eps_list = eval_fn(leafs, taus)
    loss = None
    for leaf, eps, clean, known, tau in zip(leafs, eps_list, clean_list, known_list, taus):
        if known is None or clean is None:
            continue
        k = _as_mask(known, leaf)
        if float(k.sum()) == 0.0:
            continue
        x0_hat = predict_x0(leaf, eps, int(tau), schedule)
        term = (((clean - x0_hat) * k) ** 2).sum()
        loss = term if loss is None else loss + term
    if loss is None or not loss.requires_grad:
        grads = [torch.zeros_like(z) for z in z_list]
    else:
        grads = list(torch.autograd.grad(loss, leafs, allow_unused=True))
        grads = [torch.zeros_like(z) if g is None else g for z, g in zip(z_list, grads)]
    for g in grads:
        if not torch.isfinite(g).all():
            raise NumericalFailure("non-finite reconstruction-guidance gradient")
    return [e.detach() for e in eps_list], grads


def _free_region(mask, like: torch.Tensor) -> torch.Tensor:
    return _as_mask(mask, like)  # mask is 1 on free coords, 0 on known


def _eval_fn_for(model):
    """Canonical (z_list, taus) -> eps_list closure over any supported model."""
    if isinstance(model, CombinedDenoiser):
        def fn(z_list, taus, **kw):
            ex, econds = model(z_list[0], list(z_list[1:]), taus[0], list(taus[1:]), **kw)
            return [ex, *econds]
        return fn
    if isinstance(model, JointDenoiser):
        def fn(z_list, taus, **kw):
            ex, ey = model(z_list[0], z_list[1], taus[0], taus[1], **kw)
            return [ex, ey]
        return fn
    # surrogate callable: (z_list, taus) -> eps_list
    return model


def _guidance_masks(spec: GuidanceSpec, branch_names, z_list):
    known = []
    free = []
    for name, z in zip(branch_names, z_list):
        m = spec.masks.get(name)
        if m is None:
            known.append(None)
            free.append(None)
        else:
            mb = _as_mask(m, z)
            known.append(1.0 - mb)
            free.append(mb)
    return known, free


def _apply_fixed_guidance(z_list, clean_list, spec, branch_names, eval_fn, taus, schedule, movable):
    known, free = _guidance_masks(spec, branch_names, z_list)
    eps_list, grads = _recon_gradients(z_list, clean_list, known, eval_fn, taus, schedule)
    out = []
    for z, g, fr, tau, mv in zip(z_list, grads, free, taus, movable):
        if not mv:
            out.append(z)
            continue
        step = spec.w_r * (schedule.alpha_bars[int(tau)] / 2.0) * g
        if not spec.update_known and fr is not None:
            step = step * fr
        out.append(z - step.to(z.dtype))
    return out, eps_list


def reconstruction_guidance(z_t_pair, clean_pair, masks, model, w_r: float, schedule: NoiseSchedule, ts, update_known: bool = False):
    """Eq-style gradient correction of a noisy pair toward reconstructing the
    known region:

        z^g = z - w_r * (ab_t / 2) * grad ||z_known - x0_hat_known||^2

    ``masks`` maps branch name ("x"/"y") to a binary mask with 0 marking the
    known region; the loss covers known coordinates, the update is restricted
    to free coordinates unless ``update_known`` (the documented alternative
    reading) is set. w_r = 0 returns the pair unchanged.
    """
    z_list = list(z_t_pair)
    if w_r == 0.0:
        return tuple(z_list)
    spec = GuidanceSpec(mode="fixed_w", w_r=w_r, masks=dict(masks), update_known=update_known)
    out, _ = _apply_fixed_guidance(
        z_list, list(clean_pair), spec, ("x", "y"), _eval_fn_for(model), list(ts), schedule,
        movable=[True] * len(z_list),
    )
    return tuple(out)


def guidance_via_optimizer(z_t_pair, clean_pair, masks, model, opt_config: OptGuidanceConfig, schedule: NoiseSchedule, ts, update_known: bool = False):
    """Optimizer-driven variant: one or more descent steps on the raw
    reconstruction loss with respect to the free coordinates, replacing the
    fixed w_r * ab_t/2 weighting. ``lr=0`` is the identity; one plain "sgd"
    step with lr = w_r * ab_t/2 reproduces reconstruction_guidance when both
    branches share a timestep. Returns (guided pair, eps from the final
    forward)."""
    z_list = [z.clone() for z in z_t_pair]
    clean_list = list(clean_pair)
    eval_fn = _eval_fn_for(model)
    branch_names = ("x", "y")
    spec = GuidanceSpec(mode="optimizer", masks=dict(masks), update_known=update_known)
    known, free = _guidance_masks(spec, branch_names, z_list)
    taus = list(ts)

    if opt_config.method not in ("sgd", "adam"):
        raise ConfigError(f"unknown optimizer method {opt_config.method!r}")
    m_state = [torch.zeros_like(z) for z in z_list]
    v_state = [torch.zeros_like(z) for z in z_list]
    eps_list = None
    for it in range(max(1, opt_config.steps)):
        eps_list, grads = _recon_gradients(z_list, clean_list, known, eval_fn, taus, schedule)
        if opt_config.lr == 0.0:
            continue
        for b, (z, g, fr) in enumerate(zip(z_list, grads, free)):
            if opt_config.method == "sgd":
                step = opt_config.lr * g
            else:
                b1, b2 = opt_config.betas
                m_state[b] = b1 * m_state[b] + (1 - b1) * g
                v_state[b] = b2 * v_state[b] + (1 - b2) * g * g
                m_hat = m_state[b] / (1 - b1 ** (it + 1))
                v_hat = v_state[b] / (1 - b2 ** (it + 1))
                step = opt_config.lr * m_hat / (torch.sqrt(v_hat) + opt_config.eps)
            if not update_known and fr is not None:
                step = step * fr
            z_list[b] = z - step.to(z.dtype)
    return tuple(z_list), eps_list


def multi_model_forward(x_feat, cond_feats, modules, adapters, weights, joint_weight: float = 1.0):
    """Site-level aggregation over several image-condition routes; re-exported
    from the attention layer (see attention.multi_model_forward)."""
    from .attention import multi_model_forward as _impl

    return _impl(x_feat, cond_feats, modules, adapters, weights, joint_weight)


def _tau_map(schedule: NoiseSchedule, S: int):
    if S > schedule.T:
        raise ConfigError(f"plan resolution S={S} exceeds schedule T={schedule.T}")
    return lambda level: int(np.rint(level * schedule.T / S))


def _prep_input(value, n: int, name: str) -> torch.Tensor:
    v = torch.as_tensor(np.asarray(value), dtype=torch.float32)
    if v.ndim == 3:
        v = v.unsqueeze(0).expand(n, *v.shape).clone()
    if v.shape[0] != n:
        raise InputError(f"input {name!r} has batch {v.shape[0]}, expected {n}")
    return v


def run_plan(
    model,
    plan: SamplingPlan,
    schedule: NoiseSchedule,
    inputs: dict | None = None,
    n: int | None = None,
    seed: int = 0,
    shape: tuple | None = None,
    trajectory: list | None = None,
):
    """Execute a plan and return the clean branch states.

    ``model`` is a JointDenoiser, a CombinedDenoiser, or a list of
    JointDenoisers (combined using plan.combination.weights). ``inputs`` maps
    "x"/"y" to clean arrays; for combined models "y" is a list, one per
    condition. A branch pinned at level 0 throughout is returned bit-identical
    to its input. Plain plans evaluate the model exactly len(steps)-1 times;
    optimizer guidance and condition guidance add documented extra forwards.
    """
    inputs = inputs or {}
    if isinstance(model, (list, tuple)):
        if len(model) == 1:
            model = model[0]
        else:
            if plan.combination is None:
                raise ConfigError("a model list needs plan.combination weights")
            model = CombinedDenoiser(list(model), plan.combination.weights)

    combined = isinstance(model, CombinedDenoiser)
    n_conds = len(model.models) if combined else 1
    branch_names = ["x"] + (["y"] if not combined else [f"y{i}" for i in range(n_conds)])

    steps = [tuple(s) for s in plan.steps]
    if combined and len(steps[0]) == 2:
        steps = [(s[0],) + (s[1],) * n_conds for s in steps]
    if len(steps[0]) != 1 + n_conds:
        raise ConfigError(f"plan has {len(steps[0])} branches but model expects {1 + n_conds}")

    tau = _tau_map(schedule, plan.S)
    cleans_in = [inputs.get("x")] + (
        list(inputs.get("y", [None] * n_conds)) if combined else [inputs.get("y")]
    )

    ref_shape = shape
    for v in cleans_in:
        if v is not None:
            arr_shape = tuple(np.asarray(v).shape)
            ref_shape = arr_shape[-3:]
            if n is None and len(arr_shape) == 4:
                n = arr_shape[0]
            break
    if n is None:
        n = 1
    if ref_shape is None:
        raise InputError("cannot infer sample shape: pass clean inputs or shape=(C, H, W)")

    cleans: list = []
    states: list = []
    pinned: list = []
    for b, name in enumerate(branch_names):
        levels_b = [s[b] for s in steps]
        start = levels_b[0]
        pinned_b = all(lv == 0 for lv in levels_b)
        clean = cleans_in[b]
        if clean is None and 0 < start < plan.S:
            raise InputError(f"branch {name!r} starts at level {start} < S and needs a clean input")
        clean_t = None if clean is None else _prep_input(clean, n, name)
        if start == plan.S:
            gen = torch_stream(seed, f"init.{name}")
            z = torch.randn((n, *ref_shape), generator=gen)
        elif start == 0:
            if clean_t is None:
                raise InputError(f"branch {name!r} is pinned at 0 and needs a clean input")
            z = clean_t.clone()
        else:
            gen = torch_stream(seed, f"init.{name}")
            eps = torch.randn(clean_t.shape, generator=gen)
            z = add_noise(clean_t, tau(start), eps, schedule)
        cleans.append(clean_t)
        states.append(z)
        pinned.append(pinned_b)

    eval_fn = _eval_fn_for(model)
    step_gens = [torch_stream(seed, f"noise.step.{name}") for name in branch_names]
    repl_gens = {name: torch_stream(seed, f"noise.replace.{name}") for name in branch_names}

    weights_con = plan.combination.weights if plan.combination else None
    weights_unc = plan.combination.weights_unc if plan.combination else None

    for i in range(len(steps) - 1):
        levels = steps[i]
        nxt = steps[i + 1]
        taus = [tau(lv) for lv in levels]
        movable = [not p for p in pinned]

        for rep in plan.replacement:
            try:
                b = branch_names.index(rep.branch)
            except ValueError:
                raise ConfigError(f"replacement names unknown branch {rep.branch!r}")
            if cleans[b] is None:
                raise InputError(f"replacement on branch {rep.branch!r} needs its clean input")
            states[b] = latent_replacement(states[b], cleans[b], rep.mask, taus[b], repl_gens[rep.branch], schedule)

        eps_hats = None
        if plan.guidance is not None and (i > 0 or plan.guidance.from_first_step):
            g = plan.guidance
            if g.mode == "fixed_w":
                states, eps_hats = _apply_fixed_guidance(
                    states, cleans, g, branch_names, eval_fn, taus, schedule, movable
                )
            elif g.mode == "optimizer":
                opt = g.optimizer or OptGuidanceConfig()
                known, free = _guidance_masks(g, branch_names, states)
                m_state = [torch.zeros_like(z) for z in states]
                v_state = [torch.zeros_like(z) for z in states]
                for it in range(max(1, opt.steps)):
                    eps_hats, grads = _recon_gradients(states, cleans, known, eval_fn, taus, schedule)
                    if opt.lr == 0.0:
                        continue
                    for b, (z, gr, fr, mv) in enumerate(zip(states, grads, free, movable)):
                        if not mv:
                            continue
                        if opt.method == "sgd":
                            step = opt.lr * gr
                        else:
                            b1, b2 = opt.betas
                            m_state[b] = b1 * m_state[b] + (1 - b1) * gr
                            v_state[b] = b2 * v_state[b] + (1 - b2) * gr * gr
                            step = opt.lr * (m_state[b] / (1 - b1 ** (it + 1))) / (
                                torch.sqrt(v_state[b] / (1 - b2 ** (it + 1))) + opt.eps
                            )
                        if not g.update_known and fr is not None:
                            step = step * fr
                        states[b] = z - step.to(z.dtype)
            else:
                raise ConfigError(f"unknown guidance mode {g.mode!r}")

        if eps_hats is None:
            with torch.no_grad():
                if combined and weights_con is not None:
                    eps_hats = eval_fn(states, taus, weights=weights_con)
                else:
                    eps_hats = eval_fn(states, taus)

        if plan.cond_guidance_k is not None:
            k = plan.cond_guidance_k
            with torch.no_grad():
                if combined and weights_unc is not None:
                    eps_unc = eval_fn(states, taus, weights=weights_unc)
                elif isinstance(model, JointDenoiser):
                    ex, ey = model.forward_decoupled(states[0], states[1], taus[0], taus[1])
                    eps_unc = [ex, ey]
                else:
                    raise ConfigError("condition guidance on a combined model needs weights_unc")
            eps_hats = [condition_guidance(ej, es, k) for ej, es in zip(eps_hats, eps_unc)]

        for b in range(len(states)):
            if nxt[b] < levels[b]:
                noise = None
                if plan.eta > 0.0:
                    noise = torch.randn(states[b].shape, generator=step_gens[b], dtype=states[b].dtype)
                states[b] = reverse_step(
                    states[b], eps_hats[b], taus[b], tau(nxt[b]), plan.eta, noise, schedule
                )

        if trajectory is not None:
            trajectory.append((tuple(nxt), [s.detach().clone() for s in states]))

    outs = [c if p and c is not None else s.detach() for s, c, p in zip(states, cleans, pinned)]
    if combined:
        return outs[0], outs[1:]
    return outs[0], outs[1]
