"""Spatial pose representation: frozen seed vectors, the learnable embedding
MLP, and rasterization of poses into condition images and Gaussian heatmaps.

The raster pipeline is split in two so coverage stays bit-reproducible while
values stay differentiable: integer owner maps come from the raster kernels,
then the condition image is composed in torch as a table lookup, so gradients
reach the keypoint embeddings but never depend on float blending.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import raster
from .pose import PoseError, PoseSet


@dataclass(eq=False, frozen=True)
class EmbeddingSeed:
    """Frozen per-keypoint seed vectors; never updated by training."""

    vectors: torch.Tensor  # N x C, float32, requires_grad False
    seed: int
    init_mode: str


def init_seed(n: int, c: int, seed: int, init_mode: str = "random",
              vector_file=None) -> EmbeddingSeed:
    """Create the frozen seed matrix.

    random mode draws N x C standard normals from the given seed; text mode
    loads a JSON list of N vectors of length C from vector_file.
    """
    if n < 1 or c < 1:
        raise ValueError(f"seed dims must be >= 1, got N={n}, C={c}")
    if init_mode == "random":
        gen = torch.Generator(device="cpu").manual_seed(seed)
        vecs = torch.randn(n, c, generator=gen, dtype=torch.float32)
    elif init_mode == "text":
        if vector_file is None:
            raise ValueError("text init mode needs a vector file")
        with open(vector_file, "r", encoding="utf-8") as fh:
            rows = json.load(fh)
        if len(rows) != n:
            raise ValueError(f"vector file has {len(rows)} rows, expected {n}")
        for idx, row in enumerate(rows):
            if len(row) != c:
                raise ValueError(
                    f"vector {idx} has length {len(row)}, expected {c}"
                )
        vecs = torch.tensor(rows, dtype=torch.float32)
    else:
        raise ValueError(f"unknown init mode {init_mode!r}")
    vecs.requires_grad_(False)
    return EmbeddingSeed(vectors=vecs, seed=seed, init_mode=init_mode)


class _EmbeddingBlock(nn.Module):
    def __init__(self, dim: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.act = nn.GELU()
        self.drop = nn.Dropout(dropout)
        self.fc2 = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        return self.norm(self.fc2(self.drop(self.act(self.fc1(x)))))


class EmbeddingModule(nn.Module):
    """MLP mapping seed vectors to raster fill embeddings.

    Two standalone linear layers book-end three blocks of
    linear -> GELU -> dropout -> linear -> layer-norm.
    """

    def __init__(self, in_dim: int = 768, hidden_dim: int = 256,
                 out_dim: int = 3, dropout: float = 0.1):
        super().__init__()
        self.enter = nn.Linear(in_dim, hidden_dim)
        self.blocks = nn.ModuleList(
            [_EmbeddingBlock(hidden_dim, dropout) for _ in range(3)]
        )
        self.exit = nn.Linear(hidden_dim, out_dim)
        self.in_dim = in_dim
        self.out_dim = out_dim

    def forward(self, x):
        x = self.enter(x)
        for block in self.blocks:
            x = block(x)
        return self.exit(x)


def embed_forward(seed: EmbeddingSeed, module: EmbeddingModule,
                  train_mode: bool = False) -> torch.Tensor:
    """E_kpt = G(E_0): gradients flow to the module only, never the seed."""
    if seed.vectors.shape[1] != module.in_dim:
        raise ValueError(
            f"seed dim {seed.vectors.shape[1]} != module input {module.in_dim}"
        )
    module.train(train_mode)
    return module(seed.vectors.detach())


@dataclass(frozen=True)
class RenderStyle:
    """Raster stroke geometry; None fields resolve against the raster height."""

    point_radius: Optional[float] = None
    line_width: Optional[float] = None

    def resolve(self, out_h: int) -> tuple[float, float]:
        default = float(max(1, round(out_h / 64)))
        pr = default if self.point_radius is None else float(self.point_radius)
        lw = default if self.line_width is None else float(self.line_width)
        return pr, lw


@dataclass(eq=False)
class SpatialPoseImage:
    """H x W x C' condition image; background pixels exactly zero."""

    data: torch.Tensor
    spec_name: str
    channel_dim: int


@dataclass(eq=False)
class HeatmapStack:
    """Per-keypoint Gaussian targets for keypoints valid in any instance."""

    maps: list  # float64 numpy arrays, H' x W'
    valid_indices: list
    sigma: float

    def map_for(self, keypoint_index: int):
        return self.maps[self.valid_indices.index(keypoint_index)]


def _compose_from_table(owner: np.ndarray, table: torch.Tensor,
                        n_codes: int) -> torch.Tensor:
    """Differentiable owner-code -> embedding-row lookup.

    table rows: codes 0..n_codes-1, then the background row at n_codes.
    """
    idx = np.where(owner < 0, n_codes, owner)
    return table[torch.from_numpy(np.ascontiguousarray(idx)).long()]


def render_spatial_pose(pose_set: PoseSet, e_kpt: torch.Tensor,
                        out_size: tuple[int, int],
                        style: RenderStyle = RenderStyle(),
                        skeleton_embedding: Optional[torch.Tensor] = None,
                        interpolate_edges: bool = False) -> SpatialPoseImage:
    """Rasterize a pose with learned keypoint fills.

    Per instance, edges between valid endpoints are painted with the all-ones
    vector (width style.line_width), then valid keypoints as disks of their
    e_kpt row (radius style.point_radius); disks overwrite edges and later
    instances overwrite earlier ones. Off-image geometry is clipped.

    skeleton_embedding and interpolate_edges are opt-in ablation paths: a
    learned edge fill vector instead of all-ones, and per-pixel linear
    interpolation between endpoint embeddings along each edge.
    """
    n = pose_set.spec.n
    if e_kpt.shape[0] != n:
        raise ValueError(f"e_kpt has {e_kpt.shape[0]} rows, spec wants {n}")
    out_h, out_w = out_size
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bad raster size {out_size}")
    cdim = int(e_kpt.shape[1])
    pr, lw = style.resolve(out_h)

    if not interpolate_edges:
        owner = raster.owner_map(pose_set, out_size, pr, lw)
        edge_row = (
            torch.ones(1, cdim, dtype=e_kpt.dtype)
            if skeleton_embedding is None
            else skeleton_embedding.reshape(1, cdim).to(e_kpt.dtype)
        )
        table = torch.cat(
            [e_kpt, edge_row.expand(len(pose_set.spec.edges), cdim),
             torch.zeros(1, cdim, dtype=e_kpt.dtype)]
        )
        data = _compose_from_table(owner, table, n + len(pose_set.spec.edges))
        return SpatialPoseImage(data=data, spec_name=pose_set.spec.name,
                                channel_dim=cdim)

    # Ablation path: edge pixels blend endpoint embeddings by the projection
    # parameter t along the edge. Owner codes carry instance identity so each
    # instance's edges keep their own t fields.
    stride = n + len(pose_set.spec.edges)
    owner = raster.owner_map(pose_set, out_size, pr, lw, per_instance=True)
    data = torch.zeros(out_h, out_w, cdim, dtype=e_kpt.dtype)
    local = np.where(owner >= 0, owner % stride, -1)
    kp_mask = (local >= 0) & (local < n)
    if kp_mask.any():
        rows = torch.from_numpy(np.ascontiguousarray(local[kp_mask])).long()
        data[torch.from_numpy(kp_mask)] = e_kpt[rows]
    grid_y = np.arange(out_h, dtype=np.float64)[:, None]
    grid_x = np.arange(out_w, dtype=np.float64)[None, :]
    for k, inst in enumerate(pose_set.instances):
        for j, (a, b) in enumerate(pose_set.spec.edges):
            code = k * stride + n + j
            mask = owner == code
            if not mask.any():
                continue
            ax, ay = raster.scale_point(*inst.keypoints[a][:2],
                                        pose_set.image_size, out_size)
            bx, by = raster.scale_point(*inst.keypoints[b][:2],
                                        pose_set.image_size, out_size)
            ux, uy = bx - ax, by - ay
            l2 = ux * ux + uy * uy
            if l2 == 0.0:
                t = np.zeros_like(grid_x + grid_y)
            else:
                t = ((grid_x - ax) * ux + (grid_y - ay) * uy) / l2
                t = np.clip(t, 0.0, 1.0)
            tv = torch.from_numpy(t[mask]).to(e_kpt.dtype).unsqueeze(1)
            data[torch.from_numpy(mask)] = (1.0 - tv) * e_kpt[a] + tv * e_kpt[b]
    return SpatialPoseImage(data=data, spec_name=pose_set.spec.name,
                            channel_dim=cdim)


def edge_palette(n_edges: int) -> list[tuple[float, float, float]]:
    """Uniformly sampled hue wheel for edge strokes, values in [0, 1]."""
    return [colorsys.hsv_to_rgb(j / max(1, n_edges), 1.0, 1.0)
            for j in range(n_edges)]


def render_openpose_rgb(pose_set: PoseSet, out_size: tuple[int, int],
                        style: RenderStyle = RenderStyle()) -> SpatialPoseImage:
    """Baseline RGB skeleton raster: spec colors for keypoints, hue-wheel
    colors per edge, same geometry and overwrite rules as the learned raster."""
    spec = pose_set.spec
    out_h, out_w = out_size
    pr, lw = style.resolve(out_h)
    owner = raster.owner_map(pose_set, out_size, pr, lw)
    kp_rows = torch.tensor(
        [[c / 255.0 for c in rgb] for rgb in spec.render_colors],
        dtype=torch.float32,
    )
    edge_rows = torch.tensor(edge_palette(len(spec.edges)), dtype=torch.float32)
    table = torch.cat([kp_rows, edge_rows, torch.zeros(1, 3)])
    data = _compose_from_table(owner, table, spec.n + len(spec.edges))
    return SpatialPoseImage(data=data, spec_name=spec.name, channel_dim=3)


def render_heatmaps(pose_set: PoseSet, out_size: tuple[int, int],
                    sigma: float = 2.0) -> HeatmapStack:
    """Gaussian targets at heatmap resolution, max-combined over instances."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    maps, valid = raster.heatmap_arrays(pose_set, out_size, sigma)
    return HeatmapStack(maps=maps, valid_indices=valid, sigma=sigma)
