"""Deterministic DDIM sampling with classifier-free guidance.

The trajectory visits a uniform stride of the training timesteps (the
rounded linspace over [0, T-1], deduplicated, descending) and applies the
deterministic DDIM update with the predicted clean image clipped to
[-1, 1]. Guidance combines the two branches as
eps = eps_uncond + cfg_scale * (eps_cond - eps_uncond); the conditional
branch sees the token-augmented caption and the rendered pose condition,
the unconditional branch an empty prompt and no condition.
"""
from __future__ import annotations

import dataclasses
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .backbone import NoiseSchedule, SparsePoseModel
from .kcl import GatingConfig, augment_prompt
from .pose import PoseSet
from .spr import render_spatial_pose


@dataclasses.dataclass(frozen=True)
class SampleRequest:
    pose_set: PoseSet
    caption: str = ""
    seed: int = 0
    steps: int = 50
    cfg_scale: float = 7.5
    cond_scale: float = 1.0
    capture_attention: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise ValueError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if self.cond_scale < 0:
            raise ValueError(f"cond_scale must be >= 0, got {self.cond_scale}")


@dataclasses.dataclass(frozen=True)
class AttentionMap:
    """Step-averaged attention for one keypoint's token."""

    keypoint_index: int
    keypoint_name: str
    map: np.ndarray  # H' x W' float32


def ddim_timesteps(total: int, steps: int) -> List[int]:
    """Uniform stride over [0, total-1], descending, without repeats.

    Always starts at total-1 (the initial state is pure noise); steps >= 2
    also ends at 0.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps == 1:
        return [total - 1]
    grid = np.linspace(0, total - 1, num=min(steps, total))
    return sorted({int(round(v)) for v in grid}, reverse=True)


def sample(model: SparsePoseModel, schedule: NoiseSchedule,
           req: SampleRequest, gating: Optional[GatingConfig] = None,
           snapshot_t: Optional[int] = None):
    """Run the full trajectory; returns (image, attention maps or None).

    image: H x W x 3 float32 in [0, 1]. Attention maps are collected on the
    conditional branch at the gated blocks, averaged over heads, blocks, and
    every visited timestep inside the gate window (or only `snapshot_t` when
    given), one map per keypoint valid in the request pose.
    """
    if req.pose_set.spec.name != model.spec.name:
        raise ValueError(
            f"pose skeleton {req.pose_set.spec.name!r} does not match the "
            f"model's {model.spec.name!r}"
        )
    capture = req.capture_attention
    if capture and gating is None:
        raise ValueError("attention capture needs a gating config")

    model.eval()
    size = model.cfg.image_size
    gen = torch.Generator().manual_seed(req.seed)
    x = torch.randn(1, model.cfg.channels, size, size, generator=gen)

    cond_caption = augment_prompt(req.caption, req.pose_set, model.registry)
    with torch.no_grad():
        cond_enc = model.encode_prompt(cond_caption)
        unc_enc = model.encode_prompt("")
        e_kpt = model.keypoint_embeddings(train_mode=False)
        cond_size = (model.cfg.cond_resolution, model.cfg.cond_resolution)
        cond = render_spatial_pose(req.pose_set, e_kpt, cond_size) \
            .data.permute(2, 0, 1).unsqueeze(0)

        # The conditional branch only matters when it is blended in or probed.
        need_cond = req.cfg_scale != 0.0 or capture
        attn_sums: Dict[Tuple[str, int], torch.Tensor] = {}
        attn_counts: Dict[Tuple[str, int], int] = {}
        token_positions: Dict[int, int] = dict(cond_enc.kpt_positions)

        ts = ddim_timesteps(schedule.timesteps, req.steps)
        for i, t in enumerate(ts):
            eps_u, _ = model.denoise(x, t, [unc_enc], cond=None)
            if need_cond:
                in_window = gating is not None and gating.active(t)
                if snapshot_t is not None:
                    in_window = t == snapshot_t
                blocks = gating.blocks if (capture and in_window) else ()
                eps_c, records = model.denoise(
                    x, t, [cond_enc], cond=cond,
                    cond_scale=req.cond_scale, capture=blocks,
                )
                if blocks:
                    record = records[0]
                    for (block, _), amap in record.entries.items():
                        for kpt, pos in token_positions.items():
                            key = (block, kpt)
                            vec = amap.mean(dim=0)[:, pos]
                            if key in attn_sums:
                                attn_sums[key] = attn_sums[key] + vec
                                attn_counts[key] += 1
                            else:
                                attn_sums[key] = vec
                                attn_counts[key] = 1
                eps = eps_u + req.cfg_scale * (eps_c - eps_u)
            else:
                eps = eps_u

            abar_t = schedule.alphas_cumprod[t].item()
            x0_hat = (x - math.sqrt(1.0 - abar_t) * eps) / math.sqrt(abar_t)
            x0_hat = x0_hat.clamp(-1.0, 1.0)
            if i + 1 < len(ts):
                abar_prev = schedule.alphas_cumprod[ts[i + 1]].item()
                x = math.sqrt(abar_prev) * x0_hat \
                    + math.sqrt(1.0 - abar_prev) * eps
            else:
                x = x0_hat

    image = ((x[0].permute(1, 2, 0) + 1.0) / 2.0).clamp(0.0, 1.0)
    image = image.numpy().astype(np.float32)

    maps: Optional[List[AttentionMap]] = None
    if capture:
        maps = []
        res = None
        for kpt in sorted(token_positions):
            acc = None
            count = 0
            for (block, k), vec in attn_sums.items():
                if k == kpt:
                    acc = vec if acc is None else acc + vec
                    count += attn_counts[(block, k)]
            if acc is None:
                continue
            hw = acc.shape[0]
            res = int(math.isqrt(hw))
            grid = (acc / count).reshape(res, res)
            maps.append(AttentionMap(
                keypoint_index=kpt,
                keypoint_name=model.spec.keypoint_names[kpt],
                map=grid.numpy().astype(np.float32),
            ))
    return image, maps
