"""Joint training of the adapter, embedding MLP, and keypoint tokens.

Every step reseeds both its own draw generator and the global torch RNG
from (config seed, step index), and batches index the dataset statelessly
as (step * batch_size + j) % len(dataset). Together these make a resumed
run bit-identical to an uninterrupted one: nothing about a step depends on
how many steps ran before it in this process.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import List, Optional, Sequence

import torch

from .backbone import (
    NoiseSchedule,
    SparsePoseModel,
    add_noise,
    build_model,
    load_checkpoint,
    save_checkpoint,
    schedule_from_config,
    trainable_parameters,
)
from .config import FullConfig, config_to_dict
from .kcl import augment_prompt, heatmap_loss
from .pose import SkeletonSpec
from .spr import render_spatial_pose, render_heatmaps
from .synth import SyntheticSample


class NonFiniteLossError(RuntimeError):
    pass


@dataclasses.dataclass(eq=False)
class TrainState:
    model: SparsePoseModel
    optimizer: torch.optim.Optimizer
    schedule: NoiseSchedule
    step: int = 0


def make_train_state(cfg: FullConfig, spec: SkeletonSpec) -> TrainState:
    model = build_model(cfg.model, spec)
    optimizer = torch.optim.Adam(trainable_parameters(model), lr=cfg.train.lr)
    return TrainState(model=model, optimizer=optimizer,
                      schedule=schedule_from_config(cfg.schedule))


def step_seed(seed: int, step: int, stream: str) -> int:
    """Stable 63-bit seed for one step's RNG stream."""
    digest = hashlib.blake2s(
        f"{stream}:{seed}:{step}".encode("utf-8")
    ).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def drop_mask(bsz: int, prob: float, gen: torch.Generator) -> torch.Tensor:
    """Per-sample prompt-drop decisions for one step."""
    return torch.rand(bsz, generator=gen) < prob


def train_step(batch: Sequence[SyntheticSample], state: TrainState,
               cfg: FullConfig):
    """One optimizer step over a batch; returns (state, metrics).

    Per sample: draw t and epsilon, noise the image, decide the prompt drop
    BEFORE keypoint-token augmentation (a dropped prompt carries no tokens),
    run the conditional denoiser with attention capture on the gated blocks,
    and score eq-weighted epsilon MSE plus eta times the heatmap loss.
    """
    model = state.model
    train_cfg = cfg.train
    model.train()
    gen = torch.Generator().manual_seed(
        step_seed(train_cfg.seed, state.step, "draw"))
    torch.manual_seed(step_seed(train_cfg.seed, state.step, "torch"))

    x0 = torch.stack([
        torch.from_numpy(sample.image).permute(2, 0, 1) * 2.0 - 1.0
        for sample in batch
    ])
    bsz = x0.shape[0]
    t = torch.randint(0, state.schedule.timesteps, (bsz,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen)
    x_t = add_noise(x0, eps, t, state.schedule)

    dropped = drop_mask(bsz, train_cfg.prompt_drop_prob, gen)
    encodings = []
    for sample, drop in zip(batch, dropped.tolist()):
        caption = "" if drop else sample.caption
        if not drop or not train_cfg.drop_kpt_tokens_with_prompt:
            caption = augment_prompt(caption, sample.pose_set, model.registry)
        encodings.append(model.encode_prompt(caption))

    e_kpt = model.keypoint_embeddings(train_mode=True)
    cond_size = (cfg.model.cond_resolution, cfg.model.cond_resolution)
    cond = torch.stack([
        render_spatial_pose(sample.pose_set, e_kpt, cond_size)
        .data.permute(2, 0, 1)
        for sample in batch
    ])

    capture = cfg.gating.blocks if train_cfg.eta > 0 else ()
    eps_pred, records = model.denoise(x_t, t, encodings, cond=cond,
                                      capture=capture)
    l_ldm = ((eps_pred - eps) ** 2).mean()

    if train_cfg.eta > 0:
        hm_size = cfg.heatmap_size()
        l_ht = torch.zeros(())
        for b in range(bsz):
            heatmaps = render_heatmaps(batch[b].pose_set, hm_size,
                                       train_cfg.heatmap_sigma)
            l_ht = l_ht + heatmap_loss(records[b], encodings[b], heatmaps,
                                       cfg.gating, int(t[b]))
        l_ht = l_ht / bsz
        total = l_ldm + train_cfg.eta * l_ht
    else:
        l_ht = torch.zeros(())
        total = l_ldm

    if not torch.isfinite(total):
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step}: "
            f"l_ldm={l_ldm.item()}, l_ht={l_ht.item()}"
        )

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.step += 1
    return state, {
        "step": state.step,
        "l_ldm": l_ldm.item(),
        "l_ht": l_ht.item(),
        "total": total.item(),
    }


def _batch_for_step(dataset: Sequence[SyntheticSample], step: int,
                    batch_size: int) -> List[SyntheticSample]:
    n = len(dataset)
    return [dataset[(step * batch_size + j) % n] for j in range(batch_size)]


def run_training(cfg: FullConfig, dataset: Sequence[SyntheticSample],
                 resume: Optional[str] = None) -> Path:
    """Train to cfg.train.max_steps; returns the final checkpoint path.

    Writes per-step metrics as newline-delimited JSON and a checkpoint every
    checkpoint_every steps under cfg.train.out_dir.
    """
    if not dataset:
        raise ValueError("empty dataset")
    out_dir = Path(cfg.train.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = dataset[0].pose_set.spec
    state = make_train_state(cfg, spec)
    if resume is not None:
        payload = load_checkpoint(resume, state.model)
        if "optimizer" in payload:
            state.optimizer.load_state_dict(payload["optimizer"])
        state.step = int(payload.get("step", 0))

    cfg_dict = config_to_dict(cfg)
    metrics_path = out_dir / "metrics.ndjson"
    mode = "a" if resume is not None and state.step > 0 else "w"
    with open(metrics_path, mode, encoding="utf-8") as log:
        while state.step < cfg.train.max_steps:
            batch = _batch_for_step(dataset, state.step, cfg.train.batch_size)
            state, metrics = train_step(batch, state, cfg)
            log.write(json.dumps(metrics) + "\n")
            if state.step % cfg.train.checkpoint_every == 0:
                save_checkpoint(
                    out_dir / f"ckpt_{state.step:06d}.pt", state.model,
                    cfg_dict, step=state.step, optimizer=state.optimizer,
                )
    final = out_dir / "ckpt_final.pt"
    save_checkpoint(final, state.model, cfg_dict, step=state.step,
                    optimizer=state.optimizer)
    return final
