"""Two-branch denoising network.

A small UNet (constant channel width, two levels by default) whose transformer
blocks carry self-attention plus an injected joint cross-attention module that
runs parallel to it: the block output is

    F_out = F_in + SelfAttn(LN(F_in)) + F_joint,        F = F + FF(LN2(F))

with F_joint produced by the bidirectional cross-branch module and scaled by a
runtime joint weight. Branches are processed as one concatenated batch through
the convolutional trunk (each sample carries its own timestep embedding) and
split per branch at every attention site, where the condition branch applies
its LoRA deltas and the joint module couples the branches.

With a freshly initialized adapter set (ProjOut = 0, LoRA B = 0), or with no
set attached at all, both branch outputs equal the frozen base model applied
independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .attention import SelfAttention, SiteAdapters, joint_cross_attention
from .errors import CombinationError, ConfigError, DimensionError, ScheduleError


@dataclass
class DenoiserConfig:
    channels_in: int = 1
    base_width: int = 32
    levels: int = 2
    attn_heads: int = 2
    head_dim: int = 16
    time_embed_dim: int = 64
    aligned: bool = True
    joint_everywhere: bool = True  # False restricts joint modules to decoder sites

    def __post_init__(self):
        for name in ("channels_in", "base_width", "levels", "attn_heads", "head_dim", "time_embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.attn_heads * self.head_dim != self.base_width:
            raise ConfigError(
                f"attn_heads * head_dim must equal base_width "
                f"({self.attn_heads} * {self.head_dim} != {self.base_width})"
            )

    def to_dict(self) -> dict:
        return {
            "channels_in": self.channels_in,
            "base_width": self.base_width,
            "levels": self.levels,
            "attn_heads": self.attn_heads,
            "head_dim": self.head_dim,
            "time_embed_dim": self.time_embed_dim,
            "aligned": self.aligned,
            "joint_everywhere": self.joint_everywhere,
        }


@dataclass
class JointRoute:
    """One image-condition coupling inside a forward pass."""

    cond_index: int
    modules: Mapping[str, nn.Module]
    adapters: Mapping[str, SiteAdapters]
    sites: frozenset
    w_x: float = 1.0
    w_c: float = 1.0
    joint_weight: float = 1.0


@dataclass
class BranchContext:
    """Per-forward branch layout: batch split sizes, per-branch self-attention
    LoRA maps ({site: {proj: LoraPair}} or None), and the joint routes.

    ``ablate_yx`` zeroes the y-direction attention output before ProjOut;
    True applies everywhere, a collection of site names restricts the
    ablation (the bidirectionality probe uses the final site only, where the
    ablated y features cannot re-enter the x path downstream)."""

    sizes: list
    self_lora: list
    routes: list = field(default_factory=list)
    ablate_yx: bool | frozenset = False

    def ablates(self, site: str) -> bool:
        if self.ablate_yx is True:
            return True
        if self.ablate_yx is False:
            return False
        return site in self.ablate_yx


def timestep_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype, device=t.device) / max(half - 1, 1)
    )
    args = t.to(dtype)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(channels: int) -> nn.GroupNorm:
    # groups span >= 4 channels so normalization stays informative at 1x1 spatial
    return nn.GroupNorm(max(1, min(8, channels // 4)), channels)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int):
        super().__init__()
        self.norm1 = _norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(temb_dim, c_out)
        self.norm2 = _norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TransformerBlock(nn.Module):
    """Self-attention + parallel joint cross-attention + feed-forward."""

    def __init__(self, width: int, heads: int, site: str):
        super().__init__()
        self.site = site
        self.ln1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.ff = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, branch_feats: list, ctx: BranchContext | None, probe: dict | None):
        """Maps per-branch (B, C, H, W) features through the block.

        Every sub-module runs on each branch's own batch so a branch's output
        is bitwise what the single-branch model would produce; the joint
        contribution is added on top.
        """
        probe_list = probe.setdefault(self.site, []) if probe is not None else None
        shapes = [f.shape for f in branch_feats]
        tokens = [f.reshape(b, c, hh * ww).transpose(1, 2) for f, (b, c, hh, ww) in zip(branch_feats, shapes)]
        normed = [self.ln1(tk) for tk in tokens]

        attn_parts = []
        for bi, hb in enumerate(normed):
            lora_map = ctx.self_lora[bi] if ctx is not None else None
            lora = lora_map.get(self.site) if lora_map else None
            attn_parts.append(self.attn(hb, lora=lora, probe=probe_list))

        joint_adds = [None] * len(tokens)
        if ctx is not None:
            for route in ctx.routes:
                if self.site not in route.sites or route.joint_weight == 0.0:
                    continue
                g_x, g_c = joint_cross_attention(
                    normed[0],
                    normed[route.cond_index],
                    route.modules[self.site],
                    route.adapters[self.site],
                    joint_weight=route.joint_weight,
                    probe=probe_list,
                    ablate_yx=ctx.ablates(self.site),
                )
                joint_adds[0] = route.w_x * g_x if joint_adds[0] is None else joint_adds[0] + route.w_x * g_x
                ci = route.cond_index
                joint_adds[ci] = route.w_c * g_c if joint_adds[ci] is None else joint_adds[ci] + route.w_c * g_c

        outs = []
        for tk, a, j, (b, c, hh, ww) in zip(tokens, attn_parts, joint_adds, shapes):
            out = tk + a if j is None else tk + a + j
            out = out + self.ff(self.ln2(out))
            outs.append(out.transpose(1, 2).reshape(b, c, hh, ww))
        return outs


class _Level(nn.Module):
    def __init__(self, c_in: int, width: int, heads: int, temb_dim: int, site: str):
        super().__init__()
        self.res = ResBlock(c_in, width, temb_dim)
        self.tb = TransformerBlock(width, heads, site)

    def forward(self, hs: list, tembs: list, ctx, probe):
        return self.tb([self.res(h, te) for h, te in zip(hs, tembs)], ctx, probe)


class BaseDenoiser(nn.Module):
    """Single-branch noise predictor; also the trunk the joint model drives.

    forward(v, t) -> eps_hat with matching shape. ``t_max`` bounds accepted
    timesteps (set from the schedule's T by the builders).
    """

    def __init__(self, cfg: DenoiserConfig, t_max: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.width = cfg.base_width
        self.t_max = t_max
        w, ted = cfg.base_width, cfg.time_embed_dim

        self.time_mlp = nn.Sequential(nn.Linear(ted, ted), nn.SiLU(), nn.Linear(ted, ted))
        self.conv_in = nn.Conv2d(cfg.channels_in, w, 3, padding=1)
        self.enc = nn.ModuleList(
            [_Level(w, w, cfg.attn_heads, ted, f"enc{l}") for l in range(cfg.levels)]
        )
        self.downs = nn.ModuleList(
            [nn.Conv2d(w, w, 3, stride=2, padding=1) for _ in range(cfg.levels - 1)]
        )
        self.mid = ResBlock(w, w, ted)
        self.ups = nn.ModuleList(
            [nn.Conv2d(w, w, 3, padding=1) for _ in range(cfg.levels - 1)]
        )
        self.dec = nn.ModuleList(
            [_Level(2 * w, w, cfg.attn_heads, ted, f"dec{l}") for l in range(cfg.levels)]
        )
        self.out_norm = _norm(w)
        self.conv_out = nn.Conv2d(w, cfg.channels_in, 3, padding=1)

    def attention_sites(self) -> dict:
        sites = {f"enc{l}": lvl.tb.attn for l, lvl in enumerate(self.enc)}
        sites.update({f"dec{l}": lvl.tb.attn for l, lvl in enumerate(self.dec)})
        return sites

    def site_names(self) -> list:
        return [f"enc{l}" for l in range(self.cfg.levels)] + [
            f"dec{l}" for l in reversed(range(self.cfg.levels))
        ]

    def forward(self, v, t, ctx: BranchContext | None = None, probe: dict | None = None):
        """Branches run in lockstep but every module is applied per branch, so
        each branch's output is bitwise the single-branch result plus whatever
        the joint routes add."""
        if v.ndim != 4:
            raise DimensionError(f"expected (B, C, H, W) input, got shape {tuple(v.shape)}")
        t = torch.as_tensor(t, device=v.device)
        if t.ndim == 0:
            t = t.expand(v.shape[0])
        if t.numel() and (int(t.min()) < 0 or (self.t_max is not None and int(t.max()) > self.t_max)):
            raise ScheduleError(f"timestep out of range [0, {self.t_max}]")

        sizes = ctx.sizes if ctx is not None else [v.shape[0]]
        vs = list(torch.split(v, sizes, dim=0))
        ts = list(torch.split(t, sizes, dim=0))
        tembs = [self.time_mlp(timestep_embedding(tb, self.cfg.time_embed_dim, v.dtype)) for tb in ts]
        hs = [self.conv_in(vb) for vb in vs]
        skips = []
        for l, level in enumerate(self.enc):
            hs = level(hs, tembs, ctx, probe)
            skips.append(hs)
            if l < len(self.downs):
                hs = [self.downs[l](h) for h in hs]
        hs = [self.mid(h, te) for h, te in zip(hs, tembs)]
        for l in reversed(range(self.cfg.levels)):
            hs = [torch.cat([h, sk], dim=1) for h, sk in zip(hs, skips[l])]
            hs = self.dec[l](hs, tembs, ctx, probe)
            if l > 0:
                target = skips[l - 1][0].shape[-2:]
                hs = [self.ups[l - 1](F.interpolate(h, size=target, mode="nearest")) for h in hs]
        outs = [self.conv_out(F.silu(self.out_norm(h))) for h in hs]
        return torch.cat(outs, dim=0) if len(outs) > 1 else outs[0]


class JointDenoiser(nn.Module):
    """Two-branch wrapper: frozen base trunk, joint modules initialized from
    each self-attention site, and an optional attached AdapterSet carrying all
    trainable parameters. Branches must share (C, H, W); independent spatial
    sizes are out of scope for this artifact.
    """

    def __init__(self, base: BaseDenoiser):
        super().__init__()
        from .adapters import init_joint_from_self_attention

        self.base = base
        self.base.requires_grad_(False)  # adaptation never touches the prior
        self.cfg = base.cfg
        self.joint = init_joint_from_self_attention(base)
        if base.cfg.joint_everywhere:
            self.joint_sites = frozenset(base.site_names())
        else:
            self.joint_sites = frozenset(s for s in base.site_names() if s.startswith("dec"))
        self.adapter_set = None
        self.joint_weight = 1.0
        self.ablate_yx = False

    def _route(self) -> list:
        if self.adapter_set is None:
            return []
        aset = self.adapter_set
        return [
            JointRoute(
                cond_index=1,
                modules=self.joint,
                adapters={s: aset.site_adapters(s) for s in self.joint_sites},
                sites=self.joint_sites,
                joint_weight=self.joint_weight,
            )
        ]

    def forward(self, x, y, t_x, t_y, probe: dict | None = None):
        if x.shape != y.shape:
            raise DimensionError(f"branch shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
        b = x.shape[0]
        t_x = torch.as_tensor(t_x, device=x.device).reshape(-1)
        t_y = torch.as_tensor(t_y, device=x.device).reshape(-1)
        if t_x.numel() == 1:
            t_x = t_x.expand(b)
        if t_y.numel() == 1:
            t_y = t_y.expand(b)
        y_lora = None
        if self.adapter_set is not None and self.adapter_set.y_lora is not None:
            y_lora = {s: self.adapter_set.self_lora_for(s) for s in self.base.site_names()}
        ctx = BranchContext(
            sizes=[b, b],
            self_lora=[None, y_lora],
            routes=self._route(),
            ablate_yx=self.ablate_yx,
        )
        out = self.base(torch.cat([x, y], dim=0), torch.cat([t_x, t_y], dim=0), ctx=ctx, probe=probe)
        return out[:b], out[b:]

    def forward_decoupled(self, x, y, t_x, t_y):
        """Both branches through the base alone (joint contributions off),
        keeping the y branch's LoRA. This is eps_sep for condition guidance."""
        w, self.joint_weight = self.joint_weight, 0.0
        try:
            return self.forward(x, y, t_x, t_y)
        finally:
            self.joint_weight = w


def set_joint_weight(model: JointDenoiser, w: float) -> None:
    """Runtime scale on the joint contribution; must lie in [0, 1]."""
    if not (0.0 <= w <= 1.0):
        raise ConfigError(f"joint weight must lie in [0, 1], got {w}")
    model.joint_weight = float(w)


class CombinedDenoiser(nn.Module):
    """Several joint models sharing one base, coupling x to each condition.

    ``weights`` holds one (w_x_cond, w_cond_x) pair per model; the x branch
    aggregates all joint outputs, each condition branch receives only its own.
    """

    def __init__(self, models: list, weights: list):
        super().__init__()
        if len(models) != len(weights):
            raise CombinationError(f"{len(models)} models but {len(weights)} weight pairs")
        if not models:
            raise CombinationError("need at least one model")
        cfg0 = models[0].cfg
        for m in models[1:]:
            if m.cfg.to_dict() != cfg0.to_dict():
                raise CombinationError("all combined models must share the base architecture")
        for m in models:
            if m.adapter_set is None:
                raise CombinationError("every combined model needs an attached adapter set")
        self.models = nn.ModuleList(models)
        self.weights = [tuple(map(float, wp)) for wp in weights]
        self.cfg = cfg0

    def forward(self, x, conds: list, t_x, t_conds: list, weights=None, probe: dict | None = None):
        if len(conds) != len(self.models):
            raise CombinationError(f"{len(self.models)} models but {len(conds)} conditions")
        weights = self.weights if weights is None else [tuple(map(float, w)) for w in weights]
        b = x.shape[0]
        for c in conds:
            if c.shape != x.shape:
                raise DimensionError("all branches must share (B, C, H, W)")
        base = self.models[0].base
        t_all = [torch.as_tensor(t, device=x.device).reshape(-1).expand(b) if torch.as_tensor(t).numel() == 1
                 else torch.as_tensor(t, device=x.device).reshape(-1) for t in [t_x, *t_conds]]
        self_lora = [None]
        routes = []
        for i, (m, (w_xc, w_cx)) in enumerate(zip(self.models, weights)):
            aset = m.adapter_set
            if aset.y_lora is not None:
                self_lora.append({s: aset.self_lora_for(s) for s in base.site_names()})
            else:
                self_lora.append(None)
            routes.append(
                JointRoute(
                    cond_index=i + 1,
                    modules=m.joint,
                    adapters={s: aset.site_adapters(s) for s in m.joint_sites},
                    sites=m.joint_sites,
                    w_x=w_xc,
                    w_c=w_cx,
                    joint_weight=m.joint_weight,
                )
            )
        ctx = BranchContext(sizes=[b] * (1 + len(conds)), self_lora=self_lora, routes=routes)
        out = base(torch.cat([x, *conds], dim=0), torch.cat(t_all, dim=0), ctx=ctx, probe=probe)
        chunks = list(torch.split(out, [b] * (1 + len(conds)), dim=0))
        return chunks[0], chunks[1:]
