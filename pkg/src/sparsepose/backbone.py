"""Desk-scale conditional denoiser.

A pixel-space epsilon-prediction U-Net with three encoder resolutions, one
cross-attention block per resolution plus one at the mid point, a frozen toy
text encoder, and a trainable adapter branch that is a structural copy of
the encoder. The adapter's per-block features enter the frozen decoder
through 1x1 convolutions initialized to exactly zero, so a fresh model's
conditional and unconditional forward passes are identical.

Block ids for attention capture: "enc.0", "enc.1", "enc.2" (third encoder
transformer block), "mid".
"""
from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .config import ModelConfig, ScheduleConfig
from .kcl import KeypointTokenRegistry, make_registry
from .pose import SkeletonSpec
from .spr import EmbeddingModule, init_seed
from .text import TextEncoder, TextEncoding, encode_text

BLOCK_IDS = ("enc.0", "enc.1", "enc.2", "mid")


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------


@dataclass(eq=False, frozen=True)
class NoiseSchedule:
    """Linear beta schedule with float64 cumulative products."""

    timesteps: int
    betas: torch.Tensor  # float64, (T,)
    alphas_cumprod: torch.Tensor  # float64, (T,)


def make_schedule(timesteps: int, beta_start: float = 1e-4,
                  beta_end: float = 2e-2) -> NoiseSchedule:
    if timesteps < 2:
        raise ValueError(f"need at least 2 timesteps, got {timesteps}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
    alphas_cumprod = torch.cumprod(1.0 - betas, dim=0)
    return NoiseSchedule(timesteps=timesteps, betas=betas,
                         alphas_cumprod=alphas_cumprod)


def schedule_from_config(cfg: ScheduleConfig) -> NoiseSchedule:
    return make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)


def add_noise(x0: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, per-sample t allowed."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(x0.shape[0]) if x0.dim() == 4 else t.reshape(1)
    if (t < 0).any() or (t >= sched.timesteps).any():
        raise ValueError(f"timestep out of range [0, {sched.timesteps})")
    abar = sched.alphas_cumprod[t]
    shape = (-1,) + (1,) * (x0.dim() - 1)
    sqrt_abar = abar.sqrt().reshape(shape).to(x0.dtype)
    sqrt_rest = (1.0 - abar).sqrt().reshape(shape).to(x0.dtype)
    return sqrt_abar * x0 + sqrt_rest * eps


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


class TimeEmbed(nn.Module):
    """Sinusoidal timestep features through a 2-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("time embedding dim must be even")
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0)
            * torch.arange(half, dtype=torch.float32, device=t.device)
            / max(1, half - 1)
        )
        args = t.float()[:, None] * freqs[None, :]
        emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        return self.fc2(F.silu(self.fc1(emb)))


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = (
            nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        )

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttnBlock(nn.Module):
    """Multi-head cross-attention from image tokens to text context.

    Captured maps use detached queries: identical values to the forward
    attention, but the loss gradient cannot enter the image-query path.
    """

    def __init__(self, channels: int, text_dim: int, heads: int, block_id: str):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.block_id = block_id
        self.heads = heads
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(text_dim, channels, bias=False)
        self.to_v = nn.Linear(text_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, context, capture: bool = False):
        b, c, h, w = x.shape
        tokens = x.reshape(b, c, h * w).permute(0, 2, 1)
        q = self.to_q(self.norm(tokens))
        k = self.to_k(context)
        v = self.to_v(context)
        dh = c // self.heads

        def split(tensor):
            return tensor.reshape(b, -1, self.heads, dh).transpose(1, 2)

        qh, kh, vh = split(q), split(k), split(v)
        scale = dh ** -0.5
        attn = (qh @ kh.transpose(-1, -2) * scale).softmax(dim=-1)
        out = (attn @ vh).transpose(1, 2).reshape(b, h * w, c)
        y = tokens + self.to_out(out)
        y = y.permute(0, 2, 1).reshape(b, c, h, w)
        cap = None
        if capture:
            cap = (qh.detach() @ kh.transpose(-1, -2) * scale).softmax(dim=-1)
        return y, cap


class EncoderCore(nn.Module):
    """Stem + three attention resolutions + mid; emits per-level skips."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w0, w1, w2 = cfg.widths
        g = cfg.norm_groups
        self.stem = nn.Conv2d(cfg.channels, w0, 3, padding=1)
        self.res0 = ResBlock(w0, w0, cfg.time_dim, g)
        self.attn0 = CrossAttnBlock(w0, cfg.text_dim, cfg.heads, "enc.0")
        self.down0 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.res1 = ResBlock(w1, w1, cfg.time_dim, g)
        self.attn1 = CrossAttnBlock(w1, cfg.text_dim, cfg.heads, "enc.1")
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.res2 = ResBlock(w2, w2, cfg.time_dim, g)
        self.attn2 = CrossAttnBlock(w2, cfg.text_dim, cfg.heads, "enc.2")
        self.mid = ResBlock(w2, w2, cfg.time_dim, g)
        self.mid_attn = CrossAttnBlock(w2, cfg.text_dim, cfg.heads, "mid")

    def forward(self, x, temb, context, capture=()):
        caps = {}

        def run_attn(block, feat):
            out, cap = block(feat, context, capture=block.block_id in capture)
            if cap is not None:
                caps[block.block_id] = cap
            return out

        h = self.stem(x)
        h = run_attn(self.attn0, self.res0(h, temb))
        s0 = h
        h = run_attn(self.attn1, self.res1(self.down0(h), temb))
        s1 = h
        h = run_attn(self.attn2, self.res2(self.down1(h), temb))
        s2 = h
        mid = run_attn(self.mid_attn, self.mid(h, temb))
        return [s0, s1, s2], mid, caps


class Decoder(nn.Module):
    """Convolution-only decoder consuming the (possibly injected) skips."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w0, w1, w2 = cfg.widths
        g = cfg.norm_groups
        self.res2 = ResBlock(w2 + w2, w2, cfg.time_dim, g)
        self.up1 = nn.ConvTranspose2d(w2, w1, 4, stride=2, padding=1)
        self.res1 = ResBlock(w1 + w1, w1, cfg.time_dim, g)
        self.up0 = nn.ConvTranspose2d(w1, w0, 4, stride=2, padding=1)
        self.res0 = ResBlock(w0 + w0, w0, cfg.time_dim, g)
        self.out_norm = nn.GroupNorm(g, w0)
        self.out_conv = nn.Conv2d(w0, cfg.channels, 3, padding=1)

    def forward(self, mid, skips, temb):
        s0, s1, s2 = skips
        h = self.res2(torch.cat([mid, s2], dim=1), temb)
        h = self.res1(torch.cat([self.up1(h), s1], dim=1), temb)
        h = self.res0(torch.cat([self.up0(h), s0], dim=1), temb)
        return self.out_conv(F.silu(self.out_norm(h)))


class BaseDenoiser(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.time = TimeEmbed(cfg.time_dim)
        self.core = EncoderCore(cfg)
        self.decoder = Decoder(cfg)


class CondEmbed(nn.Module):
    """Four convolutions mapping the rendered condition down to the image
    resolution and the denoiser's input channel count."""

    def __init__(self, in_ch: int, out_ch: int, cond_res: int, image_res: int):
        super().__init__()
        factor = cond_res // image_res
        n_strided = int(math.log2(factor))
        strides = [2] * n_strided + [1] * (4 - n_strided)
        chans = [in_ch, 16, 32, 32, out_ch]
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=strides[i], padding=1)
            for i in range(4)
        )

    def forward(self, c):
        h = c
        for conv in self.convs[:-1]:
            h = F.silu(conv(h))
        return self.convs[-1](h)


class AdapterBranch(nn.Module):
    """Trainable copy of the encoder plus the condition embedding stack."""

    def __init__(self, base_core: EncoderCore, cfg: ModelConfig):
        super().__init__()
        self.core = copy.deepcopy(base_core)
        self.cond_embed = CondEmbed(
            cfg.spr_channels, cfg.channels, cfg.cond_resolution, cfg.image_size
        )


class ZeroConvs(nn.Module):
    """The 1x1 injection convolutions; every weight starts at exactly zero."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w0, w1, w2 = cfg.widths
        self.z_cond = nn.Conv2d(cfg.channels, cfg.channels, 1)
        self.z_skips = nn.ModuleList(
            [nn.Conv2d(w, w, 1) for w in (w0, w1, w2)]
        )
        self.z_mid = nn.Conv2d(w2, w2, 1)
        for p in self.parameters():
            nn.init.zeros_(p)


class SprModule(nn.Module):
    """Embedding MLP plus the frozen seed matrix, checkpointed together."""

    def __init__(self, cfg: ModelConfig, n_keypoints: int):
        super().__init__()
        self.g = EmbeddingModule(
            in_dim=cfg.seed_dim, hidden_dim=cfg.spr_hidden,
            out_dim=cfg.spr_channels,
        )
        seed = init_seed(n_keypoints, cfg.seed_dim, cfg.embed_seed)
        self.register_buffer("seed_vectors", seed.vectors)

    def forward(self):
        return self.g(self.seed_vectors.detach())


@dataclass(eq=False)
class AttentionRecord:
    """Per-sample captured attention, keyed by (block_id, timestep)."""

    entries: dict  # (block_id, int t) -> heads x HW x L tensor
    token_positions: dict  # keypoint index -> prompt position


class SparsePoseModel(nn.Module):
    """Frozen denoiser + trainable adapter, embeddings, and keypoint tokens.

    Child names double as checkpoint group names: base, adapter, zero_convs,
    spr_module, kpt_tokens, text_encoder.
    """

    def __init__(self, cfg: ModelConfig, spec: SkeletonSpec):
        super().__init__()
        self.cfg = cfg
        self.spec = spec
        self.base = BaseDenoiser(cfg)
        self.adapter = AdapterBranch(self.base.core, cfg)
        self.zero_convs = ZeroConvs(cfg)
        self.spr_module = SprModule(cfg, spec.n)
        self.text_encoder = TextEncoder(
            dim=cfg.text_dim, context_len=cfg.context_len, heads=cfg.heads
        )
        self.registry = make_registry(spec, cfg.text_dim, seed=cfg.init_seed)
        self.kpt_tokens = self.registry.v_kpt
        self.base.requires_grad_(False)
        self.text_encoder.requires_grad_(False)

    # -- text ---------------------------------------------------------------

    def encode_prompt(self, prompt: str) -> TextEncoding:
        return encode_text(
            prompt, self.registry, self.text_encoder.table.detach(),
            self.kpt_tokens, self.cfg.context_len,
        )

    def text_context(self, encodings: Sequence[TextEncoding]) -> torch.Tensor:
        stacked = torch.stack([e.embeddings for e in encodings])
        return self.text_encoder(stacked)

    # -- condition ----------------------------------------------------------

    def keypoint_embeddings(self, train_mode: bool = False) -> torch.Tensor:
        self.spr_module.train(train_mode)
        return self.spr_module()

    # -- denoising ----------------------------------------------------------

    def denoise(self, x_t: torch.Tensor, t, encodings: Sequence[TextEncoding],
                cond: Optional[torch.Tensor] = None, cond_scale: float = 1.0,
                capture: Sequence[str] = (),
                attention_source: Optional[str] = None):
        """Predict epsilon for a batch.

        cond: B x C' x Hc x Wc rendered conditions, or None for the pure
        unconditional pass. Returns (eps, records) where records is a list of
        per-sample AttentionRecord (None when capture is empty).
        """
        if x_t.dim() != 4:
            raise ValueError("x_t must be B x C x H x W")
        if x_t.shape[-1] != self.cfg.image_size or x_t.shape[-2] != self.cfg.image_size:
            raise ValueError(
                f"x_t resolution {tuple(x_t.shape[-2:])} != configured "
                f"{self.cfg.image_size}"
            )
        t = torch.as_tensor(t, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(x_t.shape[0])
        source = attention_source or self.cfg.attention_source
        capture = tuple(capture)
        for block in capture:
            if block not in BLOCK_IDS:
                raise ValueError(f"unknown attention block {block!r}")
        if cond is None and capture and source == "adapter":
            raise ValueError("cannot capture adapter attention without a condition")

        context = self.text_context(encodings)
        temb = self.base.time(t)
        base_capture = capture if source == "base" else ()
        skips, mid, caps = self.base.core(x_t, temb, context, base_capture)

        if cond is not None:
            if cond.shape[-1] != self.cfg.cond_resolution:
                raise ValueError(
                    f"condition resolution {cond.shape[-1]} != configured "
                    f"{self.cfg.cond_resolution}"
                )
            adapter_capture = capture if source == "adapter" else ()
            c = self.adapter.cond_embed(cond)
            xa = x_t + self.zero_convs.z_cond(c)
            a_skips, a_mid, a_caps = self.adapter.core(
                xa, temb, context, adapter_capture
            )
            caps = caps if source == "base" else a_caps
            skips = [
                s + cond_scale * z(a)
                for s, a, z in zip(skips, a_skips, self.zero_convs.z_skips)
            ]
            mid = mid + cond_scale * self.zero_convs.z_mid(a_mid)

        eps = self.base.decoder(mid, skips, temb)

        records = None
        if capture:
            records = []
            for b in range(x_t.shape[0]):
                entries = {
                    (block, int(t[b])): caps[block][b] for block in caps
                }
                records.append(
                    AttentionRecord(
                        entries=entries,
                        token_positions=dict(encodings[b].kpt_positions),
                    )
                )
        return eps, records


def build_model(cfg: ModelConfig, spec: SkeletonSpec) -> SparsePoseModel:
    """Construct a model with a reproducible initialization."""
    torch.manual_seed(cfg.init_seed)
    return SparsePoseModel(cfg, spec)


# ---------------------------------------------------------------------------
# Parameter groups and checkpoints
# ---------------------------------------------------------------------------

GROUP_NAMES = ("base", "adapter", "zero_convs", "spr_module", "kpt_tokens",
               "text_encoder")

TRAINABLE_GROUPS = ("adapter", "zero_convs", "spr_module", "kpt_tokens")

FROZEN_GROUPS = ("base", "text_encoder")


def group_of(param_name: str) -> str:
    head = param_name.split(".", 1)[0]
    if head not in GROUP_NAMES:
        raise ValueError(f"parameter {param_name!r} outside known groups")
    return head


def grouped_state(model: SparsePoseModel) -> dict:
    groups: dict = {name: {} for name in GROUP_NAMES}
    for key, tensor in model.state_dict().items():
        groups[group_of(key)][key] = tensor
    return groups


def shape_manifest(model: SparsePoseModel) -> dict:
    return {k: list(v.shape) for k, v in model.state_dict().items()}


def parameter_group_hashes(model: SparsePoseModel) -> dict:
    """sha256 per group over the concatenated parameter bytes."""
    out = {}
    for name, tensors in grouped_state(model).items():
        h = hashlib.sha256()
        for key in sorted(tensors):
            h.update(key.encode("utf-8"))
            h.update(tensors[key].detach().cpu().contiguous().numpy().tobytes())
        out[name] = h.hexdigest()
    return out


def trainable_parameters(model: SparsePoseModel):
    """Exactly the adapter, zero-conv, embedding-MLP, and token parameters."""
    params = []
    for name, p in model.named_parameters():
        if group_of(name) in TRAINABLE_GROUPS:
            params.append(p)
    return params


def save_checkpoint(path, model: SparsePoseModel, config_dict: dict,
                    step: int = 0, optimizer: Optional[torch.optim.Optimizer] = None,
                    extra: Optional[dict] = None) -> None:
    payload = {
        "groups": grouped_state(model),
        "manifest": shape_manifest(model),
        "config": config_dict,
        "step": step,
        "registry_tokens": list(model.registry.tokens),
        "spec": model.spec.to_dict(),
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    if extra:
        payload.update(extra)
    torch.save(payload, path)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, model: SparsePoseModel) -> dict:
    """Load parameters into the model, validating the shape manifest."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    own = shape_manifest(model)
    theirs = payload.get("manifest", {})
    if set(own) != set(theirs):
        missing = set(own) ^ set(theirs)
        raise CheckpointError(f"parameter name mismatch: {sorted(missing)[:5]}")
    for key, shape in theirs.items():
        if list(own[key]) != list(shape):
            raise CheckpointError(
                f"shape mismatch for {key}: checkpoint {shape}, model {own[key]}"
            )
    flat = {}
    for tensors in payload["groups"].values():
        flat.update(tensors)
    model.load_state_dict(flat)
    return payload


def load_trained_model(path):
    """Rebuild model and config from a checkpoint file alone."""
    from .config import config_from_dict

    payload = torch.load(path, map_location="cpu", weights_only=False)
    if "config" not in payload or "spec" not in payload:
        raise CheckpointError("checkpoint carries no config or skeleton spec")
    cfg = config_from_dict(payload["config"])
    spec = SkeletonSpec.from_dict(payload["spec"])
    model = build_model(cfg.model, spec)
    load_checkpoint(path, model)
    model.eval()
    return model, cfg
