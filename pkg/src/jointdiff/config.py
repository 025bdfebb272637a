"""Run configuration: strict JSON parsing into typed configs.

Unknown keys anywhere in the document are rejected so a misspelled option
fails fast instead of silently running with defaults.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import PairSpec
from .errors import ConfigError
from .model import DenoiserConfig
from .sampling import (
    CombinationSpec,
    GuidanceSpec,
    OptGuidanceConfig,
    ReplacementSpec,
    SamplingPlan,
    build_plan,
)
from .schedule import NoiseSchedule, make_schedule
from .training import TrainConfig

_TOP_KEYS = {"seed", "output_dir", "model", "schedule", "data", "train", "sample", "eval"}
_MODEL_KEYS = {
    "channels_in", "base_width", "levels", "attn_heads", "head_dim",
    "time_embed_dim", "aligned", "joint_everywhere",
}
_SCHEDULE_KEYS = {"T", "beta_start", "beta_end", "kind"}
_DATA_KEYS = {"kind", "params", "seed"}
_TRAIN_KEYS = {
    "stage", "steps", "batch_size", "lr", "betas", "eps", "weight_decay",
    "loss_y_enabled", "seed", "t_min_train", "save_every", "hflip", "rank", "y_lora",
}
_SAMPLE_KEYS = {"preset", "S", "eta", "params", "n", "steps", "joint_weight", "cond_guidance_k"}
_EVAL_KEYS = {"task", "thresholds", "n_samples", "n_seeds", "seed", "S", "params"}
_PLAN_DOC_KEYS = _SAMPLE_KEYS | {"replacement", "guidance", "combination"}
_GUIDANCE_KEYS = {"mode", "w_r", "masks", "optimizer", "from_first_step", "update_known"}
_OPT_KEYS = {"method", "lr", "steps", "betas", "eps"}


def _check_keys(doc: dict, allowed: set, where: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object, got {type(doc).__name__}")
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


class RunConfig:
    """Parsed top-level run configuration."""

    def __init__(self, doc: dict):
        _check_keys(doc, _TOP_KEYS, "config")
        self.raw = doc
        self.seed = int(doc.get("seed", 0))
        self.output_dir = Path(doc.get("output_dir", "runs/out"))

        model_doc = doc.get("model", {})
        _check_keys(model_doc, _MODEL_KEYS, "config.model")
        self.model = DenoiserConfig(**model_doc)

        sched_doc = doc.get("schedule", {})
        _check_keys(sched_doc, _SCHEDULE_KEYS, "config.schedule")
        self.schedule: NoiseSchedule = make_schedule(**sched_doc)

        self.data = None
        if "data" in doc:
            data_doc = doc["data"]
            _check_keys(data_doc, _DATA_KEYS, "config.data")
            if "kind" not in data_doc:
                raise ConfigError("config.data needs a 'kind'")
            self.data = PairSpec(
                kind=data_doc["kind"],
                params=dict(data_doc.get("params", {})),
                seed=int(data_doc.get("seed", self.seed)),
            )

        self.train = None
        self.adapter_rank = 8
        self.adapter_y_lora = None  # None = decide from the data spec
        if "train" in doc:
            train_doc = dict(doc["train"])
            _check_keys(train_doc, _TRAIN_KEYS, "config.train")
            self.adapter_rank = int(train_doc.pop("rank", 8))
            if "y_lora" in train_doc:
                self.adapter_y_lora = train_doc.pop("y_lora")
            if "betas" in train_doc:
                train_doc["betas"] = tuple(train_doc["betas"])
            train_doc.setdefault("seed", self.seed)
            self.train = TrainConfig(**train_doc)

        self.sample = None
        if "sample" in doc:
            _check_keys(doc["sample"], _SAMPLE_KEYS, "config.sample")
            self.sample = dict(doc["sample"])

        self.eval = None
        if "eval" in doc:
            _check_keys(doc["eval"], _EVAL_KEYS, "config.eval")
            self.eval = dict(doc["eval"])

    def y_lora_enabled(self) -> bool:
        if self.adapter_y_lora is not None:
            return bool(self.adapter_y_lora)
        if self.data is None:
            return True
        return not self.data.natural_condition


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig(doc)


def _resolve_mask(ref, inputs: dict, where: str) -> np.ndarray:
    """Mask references in plan JSON are names of arrays in the inputs dir."""
    if isinstance(ref, str):
        if ref not in inputs:
            raise ConfigError(f"{where} references mask {ref!r} not present in inputs")
        return np.asarray(inputs[ref])
    return np.asarray(ref)


def plan_from_doc(doc: dict, inputs: dict | None = None) -> SamplingPlan:
    """Plan JSON -> SamplingPlan.

    Either {"preset": name, "S": int, "params": {...}} or an explicit
    {"steps": [[tx, ty], ...], "S": int}. Directive masks may name arrays from
    the inputs directory (e.g. "mask_y") or be inline nested lists.
    """
    _check_keys(doc, _PLAN_DOC_KEYS, "plan")
    inputs = inputs or {}
    common = {}
    for key in ("eta", "joint_weight", "cond_guidance_k"):
        if key in doc:
            common[key] = doc[key]

    extras = {}
    if "replacement" in doc:
        extras["replacement"] = [
            ReplacementSpec(branch=r["branch"], mask=_resolve_mask(r["mask"], inputs, "replacement"))
            for r in doc["replacement"]
        ]
    if "guidance" in doc:
        g = dict(doc["guidance"])
        _check_keys(g, _GUIDANCE_KEYS, "plan.guidance")
        opt = None
        if g.get("optimizer") is not None:
            o = dict(g["optimizer"])
            _check_keys(o, _OPT_KEYS, "plan.guidance.optimizer")
            if "betas" in o:
                o["betas"] = tuple(o["betas"])
            opt = OptGuidanceConfig(**o)
        extras["guidance"] = GuidanceSpec(
            mode=g.get("mode", "fixed_w"),
            w_r=float(g.get("w_r", 1.0)),
            masks={b: _resolve_mask(m, inputs, "guidance") for b, m in g.get("masks", {}).items()},
            optimizer=opt,
            from_first_step=bool(g.get("from_first_step", True)),
            update_known=bool(g.get("update_known", False)),
        )
    if "combination" in doc:
        c = dict(doc["combination"])
        extras["combination"] = CombinationSpec(
            weights=[tuple(w) for w in c["weights"]],
            weights_unc=None if c.get("weights_unc") is None else [tuple(w) for w in c["weights_unc"]],
        )

    if "steps" in doc:
        steps = [tuple(int(v) for v in s) for s in doc["steps"]]
        S = int(doc.get("S", max(max(s) for s in steps)))
        return SamplingPlan(steps=steps, S=S, **common, **extras)

    if "preset" not in doc:
        raise ConfigError("plan needs either 'preset' or explicit 'steps'")
    S = int(doc.get("S", 50))
    params = dict(doc.get("params", {}))
    for mask_key in ("mask_x", "mask_y"):
        if mask_key in params:
            params[mask_key] = _resolve_mask(params[mask_key], inputs, f"plan.params.{mask_key}")
    try:
        plan = build_plan(doc["preset"], S, **params, **common)
    except TypeError as exc:
        raise ConfigError(f"bad plan parameters for preset {doc['preset']!r}: {exc}") from exc
    for key, val in extras.items():
        setattr(plan, key, val if key != "replacement" else list(val))
    return plan
