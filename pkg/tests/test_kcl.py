"""Keypoint tokens, prompt augmentation, and the gated heatmap loss."""
import math

import numpy as np
import pytest
import torch

from conftest import make_pose
from sparsepose import kcl
from sparsepose.backbone import AttentionRecord
from sparsepose.spr import HeatmapStack, render_heatmaps
from sparsepose.text import TextEncoding


@pytest.fixture(scope="module")
def registry(spec17):
    return kcl.make_registry(spec17, dim=32, seed=0)


class TestTokenStrings:
    def test_spaces_become_underscores(self):
        assert kcl.token_string("left eye") == "<kpt_left_eye>"
        assert kcl.token_string("nose") == "<kpt_nose>"

    def test_registry_bijective(self, registry, spec17):
        assert len(registry.tokens) == spec17.n
        assert len(registry.index) == spec17.n
        for t, i in registry.index.items():
            assert registry.tokens[i] == t


class TestAugmentPrompt:
    def test_appends_only_valid(self, spec17, registry):
        nose = spec17.keypoint_index("nose")
        neck = spec17.keypoint_index("neck")
        pose = make_pose(spec17, [{nose: (5.0, 5.0, 2), neck: (6.0, 6.0, 0)}])
        out = kcl.augment_prompt("a photo of dog", pose, registry)
        assert out == "a photo of dog <kpt_nose>"

    def test_no_valid_unchanged(self, spec17, registry):
        pose = make_pose(spec17, [{0: (5.0, 5.0, 0)}])
        assert kcl.augment_prompt("hello", pose, registry) == "hello"

    def test_all_valid_in_spec_order(self, spec17, registry):
        pose = make_pose(
            spec17, [{i: (float(i), float(i), 2) for i in range(17)}]
        )
        out = kcl.augment_prompt("x", pose, registry)
        assert out == "x " + " ".join(registry.tokens)

    def test_idempotent(self, spec17, registry):
        pose = make_pose(spec17, [{2: (5.0, 5.0, 2), 3: (6.0, 6.0, 1)}])
        once = kcl.augment_prompt("a cat", pose, registry)
        assert kcl.augment_prompt(once, pose, registry) == once

    def test_empty_caption(self, spec17, registry):
        pose = make_pose(spec17, [{2: (5.0, 5.0, 2)}])
        assert kcl.augment_prompt("", pose, registry) == "<kpt_nose>"

    def test_multi_instance_union_single_token(self, spec17, registry):
        pose = make_pose(
            spec17, [{2: (5.0, 5.0, 2)}, {2: (9.0, 9.0, 2)}]
        )
        out = kcl.augment_prompt("y", pose, registry)
        assert out.count("<kpt_nose>") == 1


class TestGatingConfig:
    def test_defaults(self):
        g = kcl.GatingConfig()
        assert (g.t_low, g.t_high, g.blocks) == (250, 500, ("enc.2",))

    def test_window_membership(self):
        g = kcl.GatingConfig(t_low=250, t_high=500)
        assert g.active(250) and g.active(499)
        assert not g.active(500) and not g.active(700) and not g.active(249)

    def test_invalid_window(self):
        with pytest.raises(ValueError, match="t_low"):
            kcl.GatingConfig(t_low=500, t_high=250)

    def test_empty_blocks(self):
        with pytest.raises(ValueError, match="block"):
            kcl.GatingConfig(blocks=())


def _encoding(positions):
    return TextEncoding(token_ids=[], embeddings=torch.zeros(1, 1),
                        kpt_positions=positions)


def _record(block, t, attn):
    return AttentionRecord(entries={(block, t): attn}, token_positions={})


class TestHeatmapLoss:
    def _stack(self, spec, h=8, w=8):
        pose = make_pose(spec, [{0: (4.0, 4.0, 2)}], image_size=(h, w))
        return render_heatmaps(pose, (h, w), sigma=2.0)

    def test_exact_match_zero(self, tiny_spec):
        stack = self._stack(tiny_spec)
        target = torch.from_numpy(stack.maps[0]).reshape(-1)
        attn = torch.zeros(1, 64, 4, dtype=torch.float64)
        attn[0, :, 1] = target
        gating = kcl.GatingConfig(t_low=0, t_high=10, blocks=("enc.2",))
        loss = kcl.heatmap_loss(_record("enc.2", 5, attn), _encoding({0: 1}),
                                stack, gating, t=5)
        assert loss.item() == 0.0

    def test_uniform_attention_closed_form(self, tiny_spec):
        """Independent evaluation of the uniform-vs-Gaussian case on 8x8."""
        stack = self._stack(tiny_spec)
        hw = 64
        attn = torch.full((1, hw, 3), 1.0 / hw, dtype=torch.float64)
        gating = kcl.GatingConfig(t_low=0, t_high=10, blocks=("enc.2",))
        loss = kcl.heatmap_loss(_record("enc.2", 3, attn), _encoding({0: 2}),
                                stack, gating, t=3)
        expected = 0.0
        for r in range(8):
            for c in range(8):
                d2 = (c - 4) ** 2 + (r - 4) ** 2
                h_val = math.exp(-d2 / (2.0 * 2.0 * 2.0))
                expected += (1.0 / hw - h_val) ** 2
        expected /= hw
        assert abs(loss.item() - expected) < 1e-9

    def test_gated_out_timestep_zero_no_grad(self, tiny_spec):
        stack = self._stack(tiny_spec)
        attn = torch.rand(1, 64, 3, dtype=torch.float64, requires_grad=True)
        gating = kcl.GatingConfig(t_low=250, t_high=500, blocks=("enc.2",))
        loss = kcl.heatmap_loss(_record("enc.2", 700, attn), _encoding({0: 1}),
                                stack, gating, t=700)
        assert loss.item() == 0.0
        assert loss.grad_fn is None

    def test_dropped_prompt_zero(self, tiny_spec):
        stack = self._stack(tiny_spec)
        gating = kcl.GatingConfig(t_low=0, t_high=10)
        loss = kcl.heatmap_loss(_record("enc.2", 5, torch.rand(1, 64, 3)),
                                _encoding({}), stack, gating, t=5)
        assert loss.item() == 0.0 and loss.grad_fn is None

    def test_missing_token_position_errors(self, tiny_spec):
        pose = make_pose(
            tiny_spec, [{0: (4.0, 4.0, 2), 1: (6.0, 6.0, 2)}], image_size=(8, 8)
        )
        stack = render_heatmaps(pose, (8, 8), sigma=2.0)
        gating = kcl.GatingConfig(t_low=0, t_high=10)
        with pytest.raises(ValueError, match="no token position"):
            kcl.heatmap_loss(_record("enc.2", 5, torch.rand(1, 64, 4)),
                             _encoding({0: 1}), stack, gating, t=5)

    def test_resolution_mismatch_errors(self, tiny_spec):
        stack = self._stack(tiny_spec, h=8, w=8)
        gating = kcl.GatingConfig(t_low=0, t_high=10)
        with pytest.raises(ValueError, match="resolution"):
            kcl.heatmap_loss(_record("enc.2", 5, torch.rand(1, 16, 3)),
                             _encoding({0: 1}), stack, gating, t=5)

    def test_missing_block_errors(self, tiny_spec):
        stack = self._stack(tiny_spec)
        gating = kcl.GatingConfig(t_low=0, t_high=10, blocks=("mid",))
        with pytest.raises(ValueError, match="no captured attention"):
            kcl.heatmap_loss(_record("enc.2", 5, torch.rand(1, 64, 3)),
                             _encoding({0: 1}), stack, gating, t=5)

    def test_instance_permutation_invariant(self, tiny_spec):
        a = make_pose(
            tiny_spec, [{0: (2.0, 2.0, 2)}, {0: (6.0, 6.0, 2), 1: (3.0, 5.0, 1)}],
            image_size=(8, 8),
        )
        b = make_pose(
            tiny_spec, [{0: (6.0, 6.0, 2), 1: (3.0, 5.0, 1)}, {0: (2.0, 2.0, 2)}],
            image_size=(8, 8),
        )
        attn = torch.rand(2, 64, 5, dtype=torch.float64)
        gating = kcl.GatingConfig(t_low=0, t_high=10)
        enc = _encoding({0: 1, 1: 2})
        la = kcl.heatmap_loss(_record("enc.2", 5, attn),
                              enc, render_heatmaps(a, (8, 8)), gating, 5)
        lb = kcl.heatmap_loss(_record("enc.2", 5, attn),
                              enc, render_heatmaps(b, (8, 8)), gating, 5)
        assert la.item() == lb.item()

    def test_multi_block_average(self, tiny_spec):
        stack = self._stack(tiny_spec)
        a1 = torch.rand(1, 64, 3, dtype=torch.float64)
        a2 = torch.rand(1, 64, 3, dtype=torch.float64)
        gating_both = kcl.GatingConfig(t_low=0, t_high=10,
                                       blocks=("enc.2", "mid"))
        rec = AttentionRecord(
            entries={("enc.2", 5): a1, ("mid", 5): a2}, token_positions={}
        )
        loss_both = kcl.heatmap_loss(rec, _encoding({0: 1}), stack,
                                     gating_both, 5)
        avg = (a1 + a2) / 2
        rec_avg = _record("enc.2", 5, avg)
        gating_one = kcl.GatingConfig(t_low=0, t_high=10, blocks=("enc.2",))
        loss_avg = kcl.heatmap_loss(rec_avg, _encoding({0: 1}), stack,
                                    gating_one, 5)
        assert abs(loss_both.item() - loss_avg.item()) < 1e-12

    def test_nonnegative(self, tiny_spec):
        stack = self._stack(tiny_spec)
        gating = kcl.GatingConfig(t_low=0, t_high=10)
        for trial in range(5):
            attn = torch.rand(3, 64, 4, dtype=torch.float64,
                              generator=torch.Generator().manual_seed(trial))
            loss = kcl.heatmap_loss(_record("enc.2", 5, attn),
                                    _encoding({0: 1}), stack, gating, 5)
            assert loss.item() >= 0.0


class TestGradientCheck:
    def test_report_passes(self):
        report = kcl.loss_gradient_check()
        assert report["passed"], report
        assert report["max_rel_err"] < 1e-4
        assert report["query_grad_is_zero"]
        assert report["key_grad_nonzero"]
