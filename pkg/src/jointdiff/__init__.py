"""Joint diffusion over correlated pairs: one two-branch denoiser, independent
per-branch noise schedules, and a sampling-plan engine covering joint,
conditional, coarse, masked/guided, interpolated, and multi-model generation.
"""

__version__ = "0.1.0"

from .adapters import AdapterSet, LoraPair, attach, detach, effective_weight, make_adapter_set
from .data import PairSpec, condition_fidelity, derive_condition, gen_blob_pair, gen_gauss_pair, gen_loose_pair
from .model import BaseDenoiser, CombinedDenoiser, DenoiserConfig, JointDenoiser, set_joint_weight
from .sampling import SamplingPlan, build_interpolated_plan, build_plan, condition_guidance, run_plan
from .schedule import NoiseSchedule, add_noise, make_schedule, predict_x0, reverse_step
from .training import TrainConfig, train

__all__ = [
    "AdapterSet", "LoraPair", "attach", "detach", "effective_weight", "make_adapter_set",
    "PairSpec", "condition_fidelity", "derive_condition", "gen_blob_pair", "gen_gauss_pair", "gen_loose_pair",
    "BaseDenoiser", "CombinedDenoiser", "DenoiserConfig", "JointDenoiser", "set_joint_weight",
    "SamplingPlan", "build_interpolated_plan", "build_plan", "condition_guidance", "run_plan",
    "NoiseSchedule", "add_noise", "make_schedule", "predict_x0", "reverse_step",
    "TrainConfig", "train",
    "__version__",
]
