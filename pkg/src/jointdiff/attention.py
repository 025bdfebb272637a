"""Attention primitives: scaled dot-product, self-attention sites with optional
low-rank weight deltas, and the bidirectional joint cross-attention module.

Token layout is (batch, tokens, channels) everywhere. The joint module holds
frozen copies of a self-attention site's weights; everything trainable (LoRA
deltas, ProjOut) lives in the adapter set and is passed in at call time, so the
module itself never owns optimizer state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import AlignmentError, DimensionError


def scaled_dot_attention(Q: torch.Tensor, K: torch.Tensor, V: torch.Tensor, probe: list | None = None):
    """softmax(Q K^T / sqrt(d)) V over the last two dims.

    Q: (..., N, d), K: (..., M, d), V: (..., M, dv). Each output row is a convex
    combination of V rows. When ``probe`` is a list, the attention row sums are
    appended to it (they should all be 1 within 1e-6).
    """
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"query dim {Q.shape[-1]} != key dim {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"key count {K.shape[-2]} != value count {V.shape[-2]}")
    d = Q.shape[-1]
    scores = Q @ K.transpose(-2, -1) / math.sqrt(d)
    probs = torch.softmax(scores, dim=-1)
    if probe is not None:
        probe.append(probs.sum(dim=-1).detach())
    return probs @ V


def lora_delta(pair) -> torch.Tensor:
    """scale * B @ A for a LoraPair-like object with .A (r, din), .B (dout, r)."""
    return pair.scale * (pair.B @ pair.A)


def _proj(h: torch.Tensor, weight: torch.Tensor, bias, lora) -> torch.Tensor:
    if lora is None:
        return F.linear(h, weight, bias)
    return F.linear(h, weight + lora_delta(lora), bias)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, c = x.shape
    return x.reshape(b, n, heads, c // heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, dh = x.shape
    return x.transpose(1, 2).reshape(b, n, h * dh)


class SelfAttention(nn.Module):
    """Multi-head self-attention site. QKV are bias-free; the output projection
    carries a bias. ``lora`` maps projection name -> LoraPair for the branch
    being processed (None for the frozen x branch)."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.wq = nn.Linear(width, width, bias=False)
        self.wk = nn.Linear(width, width, bias=False)
        self.wv = nn.Linear(width, width, bias=False)
        self.wo = nn.Linear(width, width)

    def forward(self, h: torch.Tensor, lora: dict | None = None, probe: list | None = None):
        get = (lora or {}).get
        q = _split_heads(_proj(h, self.wq.weight, None, get("wq")), self.heads)
        k = _split_heads(_proj(h, self.wk.weight, None, get("wk")), self.heads)
        v = _split_heads(_proj(h, self.wv.weight, None, get("wv")), self.heads)
        o = _merge_heads(scaled_dot_attention(q, k, v, probe))
        return _proj(o, self.wo.weight, self.wo.bias, get("wo"))


class ProjOut(nn.Module):
    """Zero-initialized terminal projection of the joint module.

    Aligned pairs concatenate (O_x, O_y) channel-wise through one linear map
    and split the result; non-aligned pairs use two independent maps.
    """

    def __init__(self, width: int, aligned: bool):
        super().__init__()
        self.aligned = aligned
        if aligned:
            self.fused = nn.Linear(2 * width, 2 * width)
            nn.init.zeros_(self.fused.weight)
            nn.init.zeros_(self.fused.bias)
        else:
            self.out_x = nn.Linear(width, width)
            self.out_y = nn.Linear(width, width)
            for lin in (self.out_x, self.out_y):
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)

    def forward(self, o_x: torch.Tensor, o_y: torch.Tensor):
        if self.aligned:
            if o_x.shape[1] != o_y.shape[1]:
                raise AlignmentError(
                    f"aligned branches disagree on token count: {o_x.shape[1]} vs {o_y.shape[1]}"
                )
            fused = self.fused(torch.cat([o_x, o_y], dim=-1))
            c = o_x.shape[-1]
            return fused[..., :c], fused[..., c:]
        return self.out_x(o_x), self.out_y(o_y)


class JointAttnModule(nn.Module):
    """Bidirectional cross-branch attention at one site.

    Base weights are frozen copies of the paired self-attention site (non-
    persistent buffers, re-derived from the base model on load). Per-branch
    query/key/value deltas come from the xy/yx LoRA sets at call time.
    """

    def __init__(self, attn: SelfAttention):
        super().__init__()
        self.heads = attn.heads
        for name in ("wq", "wk", "wv"):
            self.register_buffer(name, getattr(attn, name).weight.detach().clone(), persistent=False)
        self.register_buffer("wo_w", attn.wo.weight.detach().clone(), persistent=False)
        self.register_buffer("wo_b", attn.wo.bias.detach().clone(), persistent=False)

    def directional(self, f_q, f_kv, q_lora, k_lora, v_lora, probe=None):
        """Attention output of the query branch over the key/value branch."""
        q = _split_heads(_proj(f_q, self.wq, None, q_lora), self.heads)
        k = _split_heads(_proj(f_kv, self.wk, None, k_lora), self.heads)
        v = _split_heads(_proj(f_kv, self.wv, None, v_lora), self.heads)
        o = _merge_heads(scaled_dot_attention(q, k, v, probe))
        return _proj(o, self.wo_w, self.wo_b, None)


@dataclass
class SiteAdapters:
    """Trainable pieces of one joint site: x-side and y-side QKV deltas plus ProjOut.

    xy holds deltas for the x-feature projections (Q_x, K_x, V_x) and yx for
    the y-feature projections; O_x uses (Q_x, K_y, V_y), O_y uses (Q_y, K_x, V_x).
    """

    xy: dict = field(default_factory=dict)
    yx: dict = field(default_factory=dict)
    proj_out: ProjOut | None = None


def joint_cross_attention(
    f_x: torch.Tensor,
    f_y: torch.Tensor,
    module: JointAttnModule,
    adapters: SiteAdapters,
    joint_weight: float = 1.0,
    probe: list | None = None,
    ablate_yx: bool = False,
):
    """Compute (F_x_joint, F_y_joint) per the bidirectional rule.

    ``ablate_yx`` zeroes the y-direction output O_y before ProjOut (path
    ablation for the bidirectionality test); with a non-aligned ProjOut this
    leaves the x output exactly unchanged.
    """
    if joint_weight == 0.0:
        zx = torch.zeros_like(f_x)
        zy = torch.zeros_like(f_y)
        return zx, zy
    o_x = module.directional(f_x, f_y, adapters.xy.get("wq"), adapters.yx.get("wk"), adapters.yx.get("wv"), probe)
    o_y = module.directional(f_y, f_x, adapters.yx.get("wq"), adapters.xy.get("wk"), adapters.xy.get("wv"), probe)
    if ablate_yx:
        o_y = torch.zeros_like(o_y)
    g_x, g_y = adapters.proj_out(o_x, o_y)
    return joint_weight * g_x, joint_weight * g_y


def multi_model_forward(x_feat, cond_feats, modules, adapters, weights, joint_weight=1.0, probe=None):
    """Aggregate joint features over several (image, condition) routes.

    For condition c with weights (w_xc, w_cx):
        F_x_joint = sum_c w_xc * Fx_c,   F_c_joint = w_cx * Fc
    where (Fx_c, Fc) is the bidirectional joint output of route c's module on
    (x_feat, cond_feats[c]). Returns (F_x_joint, [F_c_joint per condition]).
    """
    if not (len(cond_feats) == len(modules) == len(adapters) == len(weights)):
        raise DimensionError("cond_feats, modules, adapters, and weights must have equal length")
    fx_total = torch.zeros_like(x_feat)
    cond_out = []
    for f_c, mod, ad, (w_xc, w_cx) in zip(cond_feats, modules, adapters, weights):
        if w_xc == 0.0 and w_cx == 0.0:
            cond_out.append(torch.zeros_like(f_c))
            continue
        g_x, g_c = joint_cross_attention(x_feat, f_c, mod, ad, joint_weight=joint_weight, probe=probe)
        fx_total = fx_total + w_xc * g_x
        cond_out.append(w_cx * g_c)
    return fx_total, cond_out
