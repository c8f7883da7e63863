"""Noise schedule, U-Net blocks, adapter injection, checkpoints."""
import numpy as np
import pytest
import torch

from conftest import make_pose, tiny_model_config
from sparsepose import backbone
from sparsepose.backbone import (
    CheckpointError,
    add_noise,
    build_model,
    load_checkpoint,
    make_schedule,
    parameter_group_hashes,
    save_checkpoint,
    trainable_parameters,
)
from sparsepose.spr import render_spatial_pose


class TestSchedule:
    def test_first_alpha_cumprod(self):
        s = make_schedule(1000, 1e-4, 2e-2)
        assert abs(s.alphas_cumprod[0].item() - (1 - 1e-4)) < 1e-12

    def test_strictly_decreasing_in_unit_interval(self):
        s = make_schedule(1000, 1e-4, 2e-2)
        a = s.alphas_cumprod.numpy()
        assert (np.diff(a) < 0).all()
        assert a.min() > 0 and a.max() < 1

    def test_cumprod_identity(self):
        s = make_schedule(500, 1e-4, 2e-2)
        direct = np.cumprod(1.0 - s.betas.numpy())
        assert np.abs(direct - s.alphas_cumprod.numpy()).max() < 1e-12

    def test_betas_monotone(self):
        s = make_schedule(100, 1e-4, 2e-2)
        b = s.betas.numpy()
        assert (np.diff(b) >= 0).all()
        assert 0 < b[0] and b[-1] < 1

    def test_errors(self):
        with pytest.raises(ValueError, match="timesteps"):
            make_schedule(1)
        with pytest.raises(ValueError, match="beta"):
            make_schedule(10, 0.0, 0.1)
        with pytest.raises(ValueError, match="beta"):
            make_schedule(10, 0.2, 0.1)


class TestAddNoise:
    def test_zero_eps(self):
        s = make_schedule(100)
        x0 = torch.randn(2, 3, 8, 8, generator=torch.Generator().manual_seed(0))
        out = add_noise(x0, torch.zeros_like(x0), 50, s)
        scale = s.alphas_cumprod[50].sqrt().item()
        assert torch.allclose(out, float(scale) * x0, atol=1e-6)

    def test_t0_close_to_x0(self):
        s = make_schedule(1000, 1e-4, 2e-2)
        x0 = torch.randn(1, 3, 8, 8, generator=torch.Generator().manual_seed(1))
        eps = torch.randn_like(x0)
        out = add_noise(x0, eps, 0, s)
        # sqrt(beta_1) = 0.01, so the noise term is at most ~0.01 * |eps|
        assert (out - x0).abs().max() < 0.01 * eps.abs().max() + 1e-4 * x0.abs().max() + 1e-6

    def test_shape_mismatch(self):
        s = make_schedule(10)
        with pytest.raises(ValueError, match="shape"):
            add_noise(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5), 1, s)

    def test_t_out_of_range(self):
        s = make_schedule(10)
        x = torch.zeros(1, 3, 4, 4)
        with pytest.raises(ValueError, match="timestep"):
            add_noise(x, x, 10, s)

    def test_variance_monte_carlo(self):
        """Var(x_t) must track abar * Var(x0) + (1 - abar) within 3%."""
        s = make_schedule(1000, 1e-4, 2e-2)
        gen = torch.Generator().manual_seed(7)
        t = 400
        x0 = torch.randn(10000, generator=gen) * 1.5
        eps = torch.randn(10000, generator=gen)
        xt = add_noise(x0.reshape(-1, 1), eps.reshape(-1, 1),
                       torch.full((10000,), t), s).reshape(-1)
        abar = s.alphas_cumprod[t].item()
        expected = abar * x0.var().item() + (1 - abar)
        assert abs(xt.var().item() - expected) / expected < 0.03

    def test_per_sample_timesteps(self):
        s = make_schedule(100)
        x0 = torch.ones(3, 1, 2, 2)
        out = add_noise(x0, torch.zeros_like(x0), torch.tensor([0, 50, 99]), s)
        for b, t in enumerate([0, 50, 99]):
            expected = s.alphas_cumprod[t].sqrt().to(torch.float32)
            assert torch.allclose(out[b], expected.expand(1, 2, 2), atol=1e-7)


def _cond_batch(model, spec, batch=1):
    pose = make_pose(
        spec, [{2: (8.0, 8.0, 2), 3: (12.0, 10.0, 2)}], image_size=(16, 16)
    )
    e_kpt = model.keypoint_embeddings()
    img = render_spatial_pose(pose, e_kpt, (16, 16))
    cond = img.data.permute(2, 0, 1).unsqueeze(0)
    return cond.expand(batch, -1, -1, -1), pose


class TestModelStructure:
    def test_adapter_is_copy_of_base_encoder(self, model16):
        base_sd = model16.base.core.state_dict()
        ad_sd = model16.adapter.core.state_dict()
        assert set(base_sd) == set(ad_sd)
        for k in base_sd:
            assert torch.equal(base_sd[k], ad_sd[k]), k

    def test_zero_convs_start_at_zero(self, model16):
        for p in model16.zero_convs.parameters():
            assert torch.equal(p, torch.zeros_like(p))

    def test_frozen_flags(self, model16):
        assert all(not p.requires_grad for p in model16.base.parameters())
        assert all(not p.requires_grad
                   for p in model16.text_encoder.parameters())
        assert model16.kpt_tokens.requires_grad
        assert all(p.requires_grad for p in model16.adapter.parameters())

    def test_trainable_parameter_set(self, model16):
        trainable = {id(p) for p in trainable_parameters(model16)}
        for name, p in model16.named_parameters():
            group = name.split(".", 1)[0]
            if group in backbone.TRAINABLE_GROUPS:
                assert id(p) in trainable, name
            else:
                assert id(p) not in trainable, name

    def test_build_deterministic(self, spec17):
        a = build_model(tiny_model_config(), spec17)
        b = build_model(tiny_model_config(), spec17)
        assert parameter_group_hashes(a) == parameter_group_hashes(b)

    def test_group_names_cover_all_parameters(self, model16):
        for name, _ in model16.named_parameters():
            assert backbone.group_of(name) in backbone.GROUP_NAMES


class TestDenoise:
    def test_zero_init_identity(self, model16, spec17):
        cond, _ = _cond_batch(model16, spec17, batch=2)
        gen = torch.Generator().manual_seed(3)
        for _ in range(5):
            x = torch.randn(2, 3, 16, 16, generator=gen)
            t = torch.randint(0, 1000, (2,), generator=gen)
            encs = [model16.encode_prompt("a dog"),
                    model16.encode_prompt("")]
            eps_u, _ = model16.denoise(x, t, encs)
            eps_c, _ = model16.denoise(x, t, encs, cond=cond, cond_scale=1.7)
            assert (eps_u - eps_c).abs().max().item() <= 1e-6

    def test_lambda_zero_exact(self, spec17):
        model = build_model(tiny_model_config(), spec17)
        with torch.no_grad():
            for p in model.zero_convs.parameters():
                p.add_(torch.randn_like(p))
            for p in model.adapter.parameters():
                p.add_(0.1 * torch.randn_like(p))
        cond, _ = _cond_batch(model, spec17)
        x = torch.randn(1, 3, 16, 16, generator=torch.Generator().manual_seed(5))
        encs = [model.encode_prompt("a cat")]
        eps_u, _ = model.denoise(x, 123, encs)
        eps_c, _ = model.denoise(x, 123, encs, cond=cond, cond_scale=0.0)
        assert torch.equal(eps_u, eps_c)

    def test_capture_rows_sum_to_one(self, model16, spec17):
        cond, _ = _cond_batch(model16, spec17)
        x = torch.randn(1, 3, 16, 16, generator=torch.Generator().manual_seed(6))
        encs = [model16.encode_prompt("a dog <kpt_nose>")]
        _, recs = model16.denoise(x, 300, encs, cond=cond,
                                  capture=("enc.0", "enc.1", "enc.2", "mid"))
        rec = recs[0]
        assert len(rec.entries) == 4
        for (block, t), amap in rec.entries.items():
            assert t == 300
            sums = amap.sum(dim=-1)
            assert (sums - 1.0).abs().max().item() < 1e-5

    def test_capture_no_numerical_difference(self, model16, spec17):
        cond, _ = _cond_batch(model16, spec17)
        x = torch.randn(1, 3, 16, 16, generator=torch.Generator().manual_seed(7))
        encs = [model16.encode_prompt("a dog")]
        eps_off, _ = model16.denoise(x, 77, encs, cond=cond)
        eps_on, recs = model16.denoise(x, 77, encs, cond=cond,
                                       capture=("enc.2",))
        assert torch.equal(eps_off, eps_on)
        assert recs is not None

    def test_capture_resolutions(self, model16, spec17):
        cond, _ = _cond_batch(model16, spec17)
        x = torch.randn(1, 3, 16, 16, generator=torch.Generator().manual_seed(8))
        encs = [model16.encode_prompt("dog")]
        _, recs = model16.denoise(x, 10, encs, cond=cond,
                                  capture=("enc.0", "enc.1", "enc.2", "mid"))
        sizes = {b: a.shape for (b, _), a in recs[0].entries.items()}
        assert sizes["enc.0"][1] == 16 * 16
        assert sizes["enc.1"][1] == 8 * 8
        assert sizes["enc.2"][1] == 4 * 4
        assert sizes["mid"][1] == 4 * 4

    def test_eps_shape_matches_input(self, model16, spec17):
        x = torch.randn(3, 3, 16, 16)
        encs = [model16.encode_prompt("a")] * 3
        eps, _ = model16.denoise(x, torch.tensor([1, 2, 3]), encs)
        assert eps.shape == x.shape

    def test_resolution_mismatch_errors(self, model16, spec17):
        encs = [model16.encode_prompt("a")]
        with pytest.raises(ValueError, match="resolution"):
            model16.denoise(torch.randn(1, 3, 8, 8), 1, encs)
        cond = torch.randn(1, 3, 8, 8)
        with pytest.raises(ValueError, match="condition resolution"):
            model16.denoise(torch.randn(1, 3, 16, 16), 1, encs, cond=cond)

    def test_unknown_capture_block(self, model16):
        encs = [model16.encode_prompt("a")]
        with pytest.raises(ValueError, match="unknown attention block"):
            model16.denoise(torch.randn(1, 3, 16, 16), 1, encs,
                            capture=("enc.9",))

    def test_adapter_capture_needs_cond(self, model16):
        encs = [model16.encode_prompt("a")]
        with pytest.raises(ValueError, match="without a condition"):
            model16.denoise(torch.randn(1, 3, 16, 16), 1, encs,
                            capture=("enc.2",))

    def test_base_capture_without_cond(self, model16):
        encs = [model16.encode_prompt("a")]
        _, recs = model16.denoise(torch.randn(1, 3, 16, 16), 1, encs,
                                  capture=("enc.2",), attention_source="base")
        assert ("enc.2", 1) in recs[0].entries


class TestCheckpoint:
    def test_round_trip(self, spec17, tmp_path):
        model = build_model(tiny_model_config(), spec17)
        with torch.no_grad():
            model.kpt_tokens.add_(1.0)
        path = tmp_path / "ck.pt"
        save_checkpoint(path, model, {"note": "test"}, step=42)
        fresh = build_model(tiny_model_config(), spec17)
        assert parameter_group_hashes(fresh) != parameter_group_hashes(model)
        payload = load_checkpoint(path, fresh)
        assert parameter_group_hashes(fresh) == parameter_group_hashes(model)
        assert payload["step"] == 42
        assert payload["registry_tokens"][2] == "<kpt_nose>"

    def test_shape_mismatch_rejected(self, spec17, tmp_path):
        model = build_model(tiny_model_config(), spec17)
        path = tmp_path / "ck.pt"
        save_checkpoint(path, model, {}, step=0)
        other = build_model(tiny_model_config(widths=(8, 12, 20)), spec17)
        with pytest.raises(CheckpointError, match="mismatch"):
            load_checkpoint(path, other)
