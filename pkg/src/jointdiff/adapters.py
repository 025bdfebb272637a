"""Low-rank adaptation machinery.

An AdapterSet owns every trainable tensor of the adaptation stage: the
condition-branch (y) LoRA over self-attention projections, the xy/yx LoRA
pairs over joint cross-attention projections, and the zero-initialized ProjOut
maps. Base weights are never mutated; effective weights are composed
additively at forward time, so detaching restores base behavior bitwise.
"""

from __future__ import annotations

import hashlib
import warnings

import torch
from torch import nn

from .attention import JointAttnModule, ProjOut, SiteAdapters, lora_delta
from .errors import AdapterError
from .rng import torch_stream

SELF_ATTN_PROJS = ("wq", "wk", "wv", "wo")
JOINT_PROJS = ("wq", "wk", "wv")


class LoraPair(nn.Module):
    """One low-rank delta: scale * B @ A with A (r, d_in), B (d_out, r).

    B starts at zero so the delta vanishes at attach time; A is a small
    Gaussian so gradients reach B immediately.
    """

    def __init__(self, d_out: int, d_in: int, rank: int, scale: float = 1.0, gen: torch.Generator | None = None):
        super().__init__()
        if rank > min(d_in, d_out):
            raise AdapterError(f"rank {rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}")
        self.rank = rank
        self.scale = scale
        a = torch.empty(rank, d_in)
        a.normal_(0.0, 0.02, generator=gen)
        self.A = nn.Parameter(a)
        self.B = nn.Parameter(torch.zeros(d_out, rank))


def effective_weight(w_base: torch.Tensor, adapter: LoraPair) -> torch.Tensor:
    """w_base + scale * B @ A as a fresh tensor; w_base is never mutated."""
    delta = lora_delta(adapter)
    if delta.shape != w_base.shape:
        raise AdapterError(f"delta shape {tuple(delta.shape)} != base shape {tuple(w_base.shape)}")
    return w_base + delta


def base_fingerprint(base: nn.Module) -> str:
    """Hash of base parameter names and shapes (not values), so adapters can
    move between checkpoints fine-tuned from the same architecture."""
    h = hashlib.sha256()
    for name, p in sorted(base.state_dict().items()):
        h.update(f"{name}:{tuple(p.shape)};".encode())
    return h.hexdigest()[:16]


class AdapterSet(nn.Module):
    """All trainable adaptation parameters, serialized as its own checkpoint.

    Layout (state_dict names follow the module tree):
        y_lora.<site>.<proj>.{A,B}     condition-branch self-attention deltas
        xy_lora.<site>.<proj>.{A,B}    x-feature joint projections (Q_x, K_x, V_x)
        yx_lora.<site>.<proj>.{A,B}    y-feature joint projections (Q_y, K_y, V_y)
        proj_out.<site>.*              zero-init terminal projections
    """

    def __init__(
        self,
        sites: dict[str, int],
        rank: int,
        aligned: bool,
        y_lora_enabled: bool,
        fingerprint: str,
        scale: float = 1.0,
        seed: int = 0,
    ):
        super().__init__()
        self.rank = rank
        self.aligned = aligned
        self.y_lora_enabled = y_lora_enabled
        self.fingerprint = fingerprint
        self.scale = scale
        self.sites = dict(sites)

        gen = torch_stream(seed, "adapter_init")
        if y_lora_enabled:
            self.y_lora = nn.ModuleDict(
                {
                    site: nn.ModuleDict(
                        {p: LoraPair(w, w, rank, scale, gen) for p in SELF_ATTN_PROJS}
                    )
                    for site, w in sites.items()
                }
            )
        else:
            self.y_lora = None
        self.xy_lora = nn.ModuleDict(
            {site: nn.ModuleDict({p: LoraPair(w, w, rank, scale, gen) for p in JOINT_PROJS}) for site, w in sites.items()}
        )
        self.yx_lora = nn.ModuleDict(
            {site: nn.ModuleDict({p: LoraPair(w, w, rank, scale, gen) for p in JOINT_PROJS}) for site, w in sites.items()}
        )
        self.proj_out = nn.ModuleDict({site: ProjOut(w, aligned) for site, w in sites.items()})

    def metadata(self) -> dict:
        return {
            "rank": self.rank,
            "aligned": self.aligned,
            "y_lora_enabled": self.y_lora_enabled,
            "fingerprint": self.fingerprint,
            "scale": self.scale,
            "sites": self.sites,
        }

    def self_lora_for(self, site: str) -> dict | None:
        if self.y_lora is None or site not in self.y_lora:
            return None
        return dict(self.y_lora[site])

    def site_adapters(self, site: str) -> SiteAdapters:
        return SiteAdapters(
            xy=dict(self.xy_lora[site]),
            yx=dict(self.yx_lora[site]),
            proj_out=self.proj_out[site],
        )


def make_adapter_set(model, rank: int = 8, y_lora: bool = True, seed: int = 0, scale: float = 1.0) -> AdapterSet:
    """Fresh zero-delta set shaped for ``model`` (a JointDenoiser)."""
    sites = {site: model.base.width for site in model.joint_sites}
    return AdapterSet(
        sites=sites,
        rank=rank,
        aligned=model.cfg.aligned,
        y_lora_enabled=y_lora,
        fingerprint=base_fingerprint(model.base),
        scale=scale,
        seed=seed,
    )


def init_joint_from_self_attention(base) -> nn.ModuleDict:
    """One JointAttnModule per attention site, base weights copied bit-for-bit
    from that site's self-attention (clones: later mutation cannot alias)."""
    return nn.ModuleDict({site: JointAttnModule(attn) for site, attn in base.attention_sites().items()})


def attach(model, adapter_set: AdapterSet) -> None:
    """Install the set on a JointDenoiser after shape validation.

    A fingerprint mismatch warns but proceeds when shapes fit (checkpoint
    switching); shape mismatches are hard errors.
    """
    if model.adapter_set is not None:
        raise AdapterError("another adapter set is already attached; detach it first")
    fp = base_fingerprint(model.base)
    if adapter_set.fingerprint != fp:
        warnings.warn(
            f"adapter fingerprint {adapter_set.fingerprint} != base fingerprint {fp}; "
            "attaching anyway because shapes match",
            stacklevel=2,
        )
    width = model.base.width
    for site in model.joint_sites:
        if site not in adapter_set.xy_lora:
            raise AdapterError(f"adapter set missing joint site {site!r}")
        for p in JOINT_PROJS:
            pair = adapter_set.xy_lora[site][p]
            if pair.A.shape[1] != width or pair.B.shape[0] != width:
                raise AdapterError(
                    f"adapter {site}.{p} shaped for width {pair.A.shape[1]}, model width is {width}"
                )
    if adapter_set.aligned != model.cfg.aligned:
        raise AdapterError(
            f"adapter set aligned={adapter_set.aligned} but model aligned={model.cfg.aligned}"
        )
    model.adapter_set = adapter_set


def detach(model, adapter_set: AdapterSet) -> None:
    """Remove the set; forward outputs return to base behavior exactly."""
    if model.adapter_set is not adapter_set:
        raise AdapterError("this adapter set is not the one currently attached")
    model.adapter_set = None


def trainable_parameter_ratio(model) -> float:
    """|adapter parameters| / |base parameters| for the attached set."""
    if model.adapter_set is None:
        raise AdapterError("no adapter set attached")
    n_adapter = sum(p.numel() for p in model.adapter_set.parameters())
    n_base = sum(p.numel() for p in model.base.parameters())
    return n_adapter / n_base
