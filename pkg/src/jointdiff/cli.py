"""Command-line surface.

    jointdiff pretrain   --config cfg.json
    jointdiff adapt      --config cfg.json --base base.uckp
    jointdiff sample     --base base.uckp [--adapter a.uckp ...] --plan joint \
                         [--inputs dir] [--n 4] [--seed 0] --out dir \
                         [--combine-weights 1,0] [--shape 1x16x16]
    jointdiff eval       --task gauss_conditional --config cfg.json \
                         --base base.uckp --adapter a.uckp --out metrics.json
    jointdiff export-data --config cfg.json --n 64 --out dir

Exit codes: 0 ok, 2 config error, 3 checkpoint/shape error, 4 missing input,
5 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .adapters import attach, make_adapter_set
from .checkpoint import file_hash, load_joint_model
from .config import RunConfig, load_config, plan_from_doc
from .data import PairDataset, export_pairs
from .errors import (
    AdapterError,
    CheckpointError,
    ConfigError,
    InputError,
    JointDiffError,
    NumericalFailure,
)
from .model import BaseDenoiser, JointDenoiser
from .rng import torch_stream
from .sampling import CombinationSpec, run_plan
from .training import train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_INPUT = 4
EXIT_NUMERICAL = 5


def _exit_code(exc: JointDiffError) -> int:
    if isinstance(exc, (CheckpointError, AdapterError)):
        return EXIT_CHECKPOINT
    if isinstance(exc, InputError):
        return EXIT_INPUT
    if isinstance(exc, NumericalFailure):
        return EXIT_NUMERICAL
    return EXIT_CONFIG


def _build_base(cfg: RunConfig) -> BaseDenoiser:
    # parameter init draws from the run seed's "init" substream only
    with torch.random.fork_rng():
        torch.manual_seed(torch_stream(cfg.seed, "init").initial_seed())
        return BaseDenoiser(cfg.model, t_max=cfg.schedule.T)


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    if cfg.train is None or cfg.train.stage != "pretrain":
        raise ConfigError("pretrain needs config.train with stage='pretrain'")
    if cfg.data is None:
        raise ConfigError("pretrain needs a config.data section")
    base = _build_base(cfg)
    result = train(cfg.train, PairDataset(cfg.data), base, cfg.schedule, out_dir=cfg.output_dir)
    print(f"pretrain done: final loss {result.losses[-1]:.5f}, checkpoint {result.checkpoint_path}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = load_config(args.config)
    if cfg.train is None or cfg.train.stage != "adapt":
        raise ConfigError("adapt needs config.train with stage='adapt'")
    if cfg.data is None:
        raise ConfigError("adapt needs a config.data section")
    model, schedule = load_joint_model(args.base)
    adapter_set = make_adapter_set(
        model, rank=cfg.adapter_rank, y_lora=cfg.y_lora_enabled(), seed=cfg.seed
    )
    attach(model, adapter_set)
    result = train(cfg.train, PairDataset(cfg.data), model, schedule, out_dir=cfg.output_dir)
    print(f"adapt done: final loss {result.losses[-1]:.5f}, checkpoint {result.checkpoint_path}")
    return EXIT_OK


def _load_inputs(path) -> dict:
    inputs = {}
    if path is None:
        return inputs
    d = Path(path)
    if not d.is_dir():
        raise InputError(f"inputs directory {d} does not exist")
    for f in sorted(d.glob("*.npy")):
        inputs[f.stem] = np.load(f)
    return inputs


def _to_png(arr: np.ndarray, path: Path) -> None:
    from PIL import Image

    img = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    if img.ndim == 3:
        img = img[0]
    Image.fromarray((img * 255.0 + 0.5).astype(np.uint8), mode="L").save(path)


def _parse_plan_arg(plan_arg: str, inputs: dict, n_models: int, combine_weights):
    if plan_arg.endswith(".json") or plan_arg.strip().startswith("{"):
        text = Path(plan_arg).read_text() if plan_arg.endswith(".json") else plan_arg
        doc = json.loads(text)
    else:
        doc = {"preset": plan_arg, "S": 50}
    plan = plan_from_doc(doc, inputs)
    if combine_weights is not None:
        pairs = []
        flat = [float(v) for v in combine_weights.split(",")]
        for w in flat:
            pairs.append((w, w))
        if len(pairs) != n_models:
            raise ConfigError(f"--combine-weights needs {n_models} values, got {len(pairs)}")
        plan.combination = CombinationSpec(weights=pairs)
    return plan


def cmd_sample(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs_raw = _load_inputs(args.inputs)

    models = []
    schedule = None
    for adapter_path in args.adapter or [None]:
        model, schedule = load_joint_model(args.base, adapter_path)
        models.append(model)
    plan = _parse_plan_arg(args.plan, inputs_raw, len(models), args.combine_weights)

    run_inputs = {}
    if "x" in inputs_raw:
        run_inputs["x"] = inputs_raw["x"]
    if len(models) > 1:
        conds = [inputs_raw[k] for k in sorted(inputs_raw) if k.startswith("y")]
        if conds:
            run_inputs["y"] = conds
    elif "y" in inputs_raw:
        run_inputs["y"] = inputs_raw["y"]

    shape = None
    if args.shape:
        shape = tuple(int(v) for v in args.shape.split("x"))
    model_arg = models[0] if len(models) == 1 else models
    x_out, y_out = run_plan(
        model_arg, plan, schedule, inputs=run_inputs, n=args.n, seed=args.seed, shape=shape
    )

    x_np = x_out.numpy()
    y_list = [y.numpy() for y in y_out] if isinstance(y_out, list) else [y_out.numpy()]
    files = []
    for i in range(x_np.shape[0]):
        _to_png(x_np[i], out / f"x_{i:03d}.png")
        np.save(out / f"x_{i:03d}.npy", x_np[i])
        files += [f"x_{i:03d}.png", f"x_{i:03d}.npy"]
        for ci, y_np in enumerate(y_list):
            tag = "y" if len(y_list) == 1 else f"y{ci}"
            _to_png(y_np[i], out / f"{tag}_{i:03d}.png")
            np.save(out / f"{tag}_{i:03d}.npy", y_np[i])
            files += [f"{tag}_{i:03d}.png", f"{tag}_{i:03d}.npy"]

    manifest = {
        "version": __version__,
        "plan": plan.manifest(),
        "seed": args.seed,
        "n": int(x_np.shape[0]),
        "base": file_hash(args.base),
        "adapters": [file_hash(p) for p in (args.adapter or [])],
        "inputs": {k: list(np.asarray(v).shape) for k, v in inputs_raw.items()},
        "outputs": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {len(files)} artifacts to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import evaltasks

    cfg = load_config(args.config)
    if cfg.eval is None or "task" not in cfg.eval:
        raise ConfigError("eval needs a config.eval section with a 'task'")
    task = cfg.eval["task"]
    runner = evaltasks.TASKS.get(task)
    if runner is None:
        raise ConfigError(f"unknown eval task {task!r}, expected one of {sorted(evaltasks.TASKS)}")
    thresholds = cfg.eval.get("thresholds", {})
    if not isinstance(thresholds, dict):
        raise ConfigError("config.eval.thresholds must be an object")
    metrics, passed = runner(cfg, args)
    report = {"task": task, "metrics": metrics, "thresholds": thresholds, "pass": passed}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK if passed else EXIT_NUMERICAL


def cmd_export_data(args) -> int:
    cfg = load_config(args.config)
    if cfg.data is None:
        raise ConfigError("export-data needs a config.data section")
    manifest = export_pairs(cfg.data, args.n, cfg.data.seed, args.out)
    print(f"exported {manifest['count']} pairs to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointdiff", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    pre = sub.add_parser("pretrain", help="train the single-branch base model")
    pre.add_argument("--config", required=True)
    pre.set_defaults(fn=cmd_pretrain)

    ada = sub.add_parser("adapt", help="train adapters on a frozen base")
    ada.add_argument("--config", required=True)
    ada.add_argument("--base", required=True)
    ada.set_defaults(fn=cmd_adapt)

    smp = sub.add_parser("sample", help="execute a sampling plan")
    smp.add_argument("--base", required=True)
    smp.add_argument("--adapter", action="append")
    smp.add_argument("--plan", required=True, help="preset name, JSON string, or .json path")
    smp.add_argument("--inputs", help="directory of .npy inputs (x, y, mask_x, mask_y)")
    smp.add_argument("--n", type=int, default=None)
    smp.add_argument("--seed", type=int, default=0)
    smp.add_argument("--out", required=True)
    smp.add_argument("--combine-weights", help="comma-separated weights, one per adapter")
    smp.add_argument("--shape", help="CxHxW when no inputs are given, e.g. 1x16x16")
    smp.set_defaults(fn=cmd_sample)

    ev = sub.add_parser("eval", help="run an evaluation task against thresholds")
    ev.add_argument("--config", required=True)
    ev.add_argument("--base")
    ev.add_argument("--adapter")
    ev.add_argument("--out")
    ev.set_defaults(fn=cmd_eval)

    exp = sub.add_parser("export-data", help="write generated pairs to disk")
    exp.add_argument("--config", required=True)
    exp.add_argument("--n", type=int, default=64)
    exp.add_argument("--out", required=True)
    exp.set_defaults(fn=cmd_export_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except JointDiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
