"""Joint denoiser behavior: transparency, decoupling, permutation, gradients."""

import numpy as np
import pytest
import torch

from jointdiff.errors import ConfigError, DimensionError, ScheduleError
from jointdiff.model import DenoiserConfig, set_joint_weight

from conftest import build_joint, randomize_adapters, tiny_config


def _pair(n=3, hw=8, seed=0):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 1, hw, hw, generator=gen)
    y = torch.randn(n, 1, hw, hw, generator=gen)
    return x, y


class TestConfig:
    def test_head_width_invariant(self):
        with pytest.raises(ConfigError):
            DenoiserConfig(base_width=32, attn_heads=3, head_dim=16)

    def test_positive_fields(self):
        with pytest.raises(ConfigError):
            DenoiserConfig(levels=0)


class TestForward:
    def test_output_shapes_match_inputs(self, tiny_joint):
        x, y = _pair()
        ex, ey = tiny_joint(x, y, torch.tensor([1, 2, 3]), torch.tensor([4, 5, 6]))
        assert ex.shape == x.shape and ey.shape == y.shape

    def test_zero_init_transparency(self, tiny_joint):
        x, y = _pair(seed=4)
        t_x = torch.tensor([10, 40, 90])
        t_y = torch.tensor([3, 55, 100])
        ex, ey = tiny_joint(x, y, t_x, t_y)
        bx = tiny_joint.base(x, t_x)
        by = tiny_joint.base(y, t_y)
        assert (ex - bx).abs().max() < 1e-6
        assert (ey - by).abs().max() < 1e-6

    def test_joint_weight_zero_decouples(self, tiny_joint):
        randomize_adapters(tiny_joint, seed=2)
        x, y = _pair(seed=5)
        set_joint_weight(tiny_joint, 0.0)
        ex0, _ = tiny_joint(x, y, 7, 7)
        y2 = torch.randn_like(y)
        ex1, _ = tiny_joint(x, y2, 7, 7)
        torch.testing.assert_close(ex0, ex1, atol=0, rtol=0)
        set_joint_weight(tiny_joint, 1.0)
        ex2, _ = tiny_joint(x, y2, 7, 7)
        assert not torch.equal(ex1, ex2)

    def test_set_joint_weight_range(self, tiny_joint):
        with pytest.raises(ConfigError):
            set_joint_weight(tiny_joint, 1.5)
        with pytest.raises(ConfigError):
            set_joint_weight(tiny_joint, -0.1)
        set_joint_weight(tiny_joint, 1.0)

    def test_timestep_range_error(self, tiny_joint):
        x, y = _pair()
        with pytest.raises(ScheduleError):
            tiny_joint(x, y, 101, 0)
        with pytest.raises(ScheduleError):
            tiny_joint(x, y, 0, -1)

    def test_branch_shape_mismatch(self, tiny_joint):
        with pytest.raises(DimensionError):
            tiny_joint(torch.randn(2, 1, 8, 8), torch.randn(2, 1, 4, 4), 1, 1)

    def test_batch_permutation_oracle(self, tiny_joint):
        randomize_adapters(tiny_joint, seed=9)
        x, y = _pair(n=5, seed=6)
        t_x = torch.tensor([1, 20, 40, 60, 80])
        t_y = torch.tensor([90, 70, 50, 30, 10])
        ex, ey = tiny_joint(x, y, t_x, t_y)
        perm = torch.tensor([4, 2, 0, 1, 3])
        ex_p, ey_p = tiny_joint(x[perm], y[perm], t_x[perm], t_y[perm])
        torch.testing.assert_close(ex_p, ex[perm], atol=1e-5, rtol=1e-5)
        torch.testing.assert_close(ey_p, ey[perm], atol=1e-5, rtol=1e-5)

    def test_joint_weight_continuity(self, tiny_joint):
        randomize_adapters(tiny_joint, seed=1)
        x, y = _pair(seed=7)
        set_joint_weight(tiny_joint, 0.5)
        a, _ = tiny_joint(x, y, 30, 30)
        set_joint_weight(tiny_joint, 0.5 + 1e-3)
        b, _ = tiny_joint(x, y, 30, 30)
        set_joint_weight(tiny_joint, 1.0)
        assert (a - b).abs().max() < 1e-2

    def test_attention_rows_sum_to_one_at_every_site(self, tiny_joint):
        randomize_adapters(tiny_joint, seed=3)
        x, y = _pair(seed=8)
        probe = {}
        tiny_joint(x, y, 10, 20, probe=probe)
        assert set(probe) == set(tiny_joint.base.site_names())
        for site, sums in probe.items():
            for s in sums:
                assert (s - 1.0).abs().max() < 1e-6, f"attention rows at {site} do not sum to 1"

    def test_encoder_ablation_flag(self):
        model = build_joint(cfg=tiny_config(joint_everywhere=False))
        assert model.joint_sites == frozenset({"dec0", "dec1"})
        randomize_adapters(model, seed=4)
        x, y = _pair(seed=9)
        ex, ey = model(x, y, 15, 25)
        assert torch.isfinite(ex).all() and torch.isfinite(ey).all()


class TestBidirectionality:
    def test_yx_path_ablation_nonaligned(self):
        # ablate the y-direction at the final site, after which the modified
        # y features cannot re-enter the x path: eps_x must be bit-identical
        model = build_joint(cfg=tiny_config(aligned=False), seed=5)
        randomize_adapters(model, seed=5)
        x, y = _pair(seed=10)
        ex_full, ey_full = model(x, y, 12, 34)
        model.ablate_yx = frozenset({"dec0"})
        ex_abl, ey_abl = model(x, y, 12, 34)
        model.ablate_yx = False
        torch.testing.assert_close(ex_abl, ex_full, atol=0, rtol=0)
        assert not torch.equal(ey_abl, ey_full)

    def test_yx_path_ablation_aligned_shares_proj(self):
        model = build_joint(cfg=tiny_config(aligned=True), seed=6)
        randomize_adapters(model, seed=6)
        x, y = _pair(seed=11)
        ex_full, _ = model(x, y, 12, 34)
        model.ablate_yx = frozenset({"dec0"})
        ex_abl, _ = model(x, y, 12, 34)
        model.ablate_yx = False
        # the aligned ProjOut mixes both directions, so x changes too
        assert not torch.equal(ex_abl, ex_full)


class TestGradientFlow:
    def test_gradients_reach_only_adapters(self, tiny_joint):
        x, y = _pair(seed=12)
        ex, ey = tiny_joint(x, y, 10, 10)
        loss = (ex**2).mean() + (ey**2).mean()
        loss.backward()
        assert all(p.grad is None for p in tiny_joint.base.parameters())
        grads = [p.grad for p in tiny_joint.adapter_set.parameters()]
        assert any(g is not None and g.abs().sum() > 0 for g in grads)

    def test_adapt_loss_gradcheck_vs_finite_differences(self, schedule100):
        # central finite differences at float64 on a 1x1-spatial config
        from jointdiff.schedule import add_noise

        model = build_joint(seed=13).double()
        randomize_adapters(model, scale=0.02, seed=13)
        gen = torch.Generator().manual_seed(99)
        x0 = torch.randn(2, 1, 1, 1, generator=gen, dtype=torch.float64)
        y0 = torch.randn(2, 1, 1, 1, generator=gen, dtype=torch.float64)
        eps_x = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
        eps_y = torch.randn(y0.shape, generator=gen, dtype=torch.float64)
        t_x, t_y = [40, 70], [10, 90]
        x_t = add_noise(x0, np.array(t_x), eps_x, schedule100)
        y_t = add_noise(y0, np.array(t_y), eps_y, schedule100)

        def loss_fn():
            eh_x, eh_y = model(x_t, y_t, torch.tensor(t_x), torch.tensor(t_y))
            return ((eh_x - eps_x) ** 2).mean() + ((eh_y - eps_y) ** 2).mean()

        params = dict(model.adapter_set.named_parameters())
        loss = loss_fn()
        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)

        rng = np.random.default_rng(0)
        compared = 0
        for (name, p), g in zip(params.items(), grads):
            if g is None:
                continue
            flat = p.detach().reshape(-1)
            for idx in rng.choice(flat.numel(), size=min(2, flat.numel()), replace=False):
                h = 1e-5
                with torch.no_grad():
                    orig = flat[idx].item()
                    flat[idx] = orig + h
                    lp = float(loss_fn())
                    flat[idx] = orig - h
                    lm = float(loss_fn())
                    flat[idx] = orig
                fd = (lp - lm) / (2 * h)
                an = float(g.reshape(-1)[idx])
                if max(abs(an), abs(fd)) < 1e-7:
                    continue  # single-token sites have exactly-zero Q/K grads
                rel = abs(an - fd) / max(abs(an), abs(fd))
                assert rel < 1e-4, f"{name}[{idx}]: analytic {an} vs fd {fd} (rel {rel:.2e})"
                compared += 1
        assert compared >= 10
