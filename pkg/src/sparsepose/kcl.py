"""Keypoint concept learning: per-keypoint text tokens and the gated
attention-to-heatmap loss.

Each keypoint name owns one token string appended to captions whenever that
keypoint is valid somewhere in the pose. The loss pulls the token's
cross-attention map toward the keypoint's Gaussian target, inside a timestep
window and a chosen set of transformer blocks only. Gradients flow through
the key path (token embeddings, key projections) and never through the
image-feature query path: captured maps are built from detached queries.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .pose import PoseSet, SkeletonSpec
from .spr import HeatmapStack
from .text import TextEncoding, tokenize


def token_string(keypoint_name: str) -> str:
    return "<kpt_" + keypoint_name.lower().replace(" ", "_") + ">"


@dataclass(eq=False)
class KeypointTokenRegistry:
    """One token per keypoint plus the learnable embedding rows."""

    tokens: list
    index: dict  # token string -> keypoint index
    spec_name: str
    v_kpt: nn.Parameter  # N x D_text

    @property
    def n(self) -> int:
        return len(self.tokens)


def make_registry(spec: SkeletonSpec, dim: int, seed: int = 0) -> KeypointTokenRegistry:
    tokens = [token_string(name) for name in spec.keypoint_names]
    if len(set(tokens)) != len(tokens):
        raise ValueError("keypoint names collide after token normalization")
    gen = torch.Generator(device="cpu").manual_seed(seed)
    v_kpt = nn.Parameter(torch.randn(spec.n, dim, generator=gen) * 0.02)
    return KeypointTokenRegistry(
        tokens=tokens,
        index={t: i for i, t in enumerate(tokens)},
        spec_name=spec.name,
        v_kpt=v_kpt,
    )


def augment_prompt(caption: str, pose_set: PoseSet,
                   registry: KeypointTokenRegistry) -> str:
    """Append the token of every keypoint valid in any instance, in spec
    order; idempotent, never double-appends."""
    present = set(tokenize(caption, registry))
    additions = [
        registry.tokens[i]
        for i in pose_set.valid_union()
        if registry.tokens[i] not in present
    ]
    if not additions:
        return caption
    lead = caption.rstrip()
    joined = " ".join(additions)
    return joined if not lead else lead + " " + joined


@dataclass(frozen=True)
class GatingConfig:
    """Timestep window [t_low, t_high) and block set where the loss is live."""

    t_low: int = 250
    t_high: int = 500
    blocks: tuple = ("enc.2",)

    def __post_init__(self):
        if not 0 <= self.t_low < self.t_high:
            raise ValueError(
                f"need 0 <= t_low < t_high, got [{self.t_low}, {self.t_high})"
            )
        if not self.blocks:
            raise ValueError("gate needs at least one block")

    def active(self, t: int) -> bool:
        return self.t_low <= t < self.t_high


def heatmap_loss(record, text: TextEncoding, heatmaps: HeatmapStack,
                 gating: GatingConfig, t: int) -> torch.Tensor:
    """Mean squared error between token attention maps and Gaussian targets.

    Returns a detached zero (no gradient) when the timestep is outside the
    gate window, when the prompt carries no keypoint tokens (dropped
    prompts), or when no keypoint is valid. Maps are averaged over heads,
    then over gated blocks.
    """
    zero = torch.zeros(())
    if not gating.active(int(t)):
        return zero
    if not text.kpt_positions:
        return zero
    valid = heatmaps.valid_indices
    if not valid:
        return zero

    block_maps = []
    for block in gating.blocks:
        key = (block, int(t))
        if key not in record.entries:
            raise ValueError(f"no captured attention for block {block!r} at t={int(t)}")
        block_maps.append(record.entries[key].mean(dim=0))  # HW x L
    hw = block_maps[0].shape[0]
    for block, amap in zip(gating.blocks, block_maps):
        if amap.shape[0] != hw:
            raise ValueError(
                "gated blocks disagree on attention resolution: "
                f"{amap.shape[0]} vs {hw}"
            )
    h, w = heatmaps.maps[0].shape
    if h * w != hw:
        raise ValueError(
            f"heatmap resolution {h}x{w} != attention resolution {hw}"
        )

    total = None
    for i in valid:
        if i not in text.kpt_positions:
            raise ValueError(
                f"valid keypoint {i} has no token position in the prompt"
            )
        pos = text.kpt_positions[i]
        attn = torch.stack([m[:, pos] for m in block_maps]).mean(dim=0)
        target = torch.as_tensor(
            heatmaps.map_for(i), dtype=attn.dtype, device=attn.device
        ).reshape(-1)
        term = ((attn - target) ** 2).mean()
        total = term if total is None else total + term
    return total / len(valid)


def loss_gradient_check(n_keypoints: int = 2, grid: int = 4, dim: int = 6,
                        context_len: int = 8, seed: int = 0) -> dict:
    """Finite-difference verification of the loss gradient on a float64 toy.

    Builds keypoint embeddings, a frozen key projection, and synthetic
    image-feature queries; checks the analytic d(loss)/d(v_kpt) against
    central differences and that the detached query path gets no gradient.
    """
    gen = torch.Generator().manual_seed(seed)

    def _randn(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64)

    queries_src = _randn(grid * grid, dim).requires_grad_(True)
    to_k = _randn(dim, dim).requires_grad_(True)
    v_kpt = _randn(n_keypoints, dim).requires_grad_(True)
    base_rows = _randn(context_len - n_keypoints, dim)
    targets = [_randn(grid, grid).abs() for _ in range(n_keypoints)]
    targets = [t / t.max() for t in targets]
    kpt_positions = {i: context_len - n_keypoints + i for i in range(n_keypoints)}
    gating = GatingConfig(t_low=0, t_high=10, blocks=("b",))
    stack = HeatmapStack(
        maps=[t.numpy() for t in targets],
        valid_indices=list(range(n_keypoints)),
        sigma=1.0,
    )

    def compute_loss():
        context = torch.cat([base_rows, v_kpt], dim=0)
        keys = context @ to_k
        logits = (queries_src.detach() @ keys.T) / (dim ** 0.5)
        attn = torch.softmax(logits, dim=-1)
        record = type("Rec", (), {"entries": {("b", 5): attn.unsqueeze(0)}})()
        enc = TextEncoding(token_ids=[], embeddings=context,
                           kpt_positions=kpt_positions)
        return heatmap_loss(record, enc, stack, gating, t=5)

    loss = compute_loss()
    grads = torch.autograd.grad(loss, [v_kpt, to_k, queries_src],
                                allow_unused=True)
    analytic = grads[0]
    query_grad = grads[2]

    eps = 1e-6
    max_rel = 0.0
    with torch.no_grad():
        flat = v_kpt.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = compute_loss().item()
            flat[i] = orig - eps
            lo = compute_loss().item()
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            a = analytic.reshape(-1)[i].item()
            denom = max(abs(fd), abs(a), 1e-10)
            max_rel = max(max_rel, abs(fd - a) / denom)
    return {
        "max_rel_err": max_rel,
        "passed": max_rel < 1e-4,
        "query_grad_is_zero": query_grad is None,
        "key_grad_nonzero": bool(grads[1].abs().sum() > 0),
    }
