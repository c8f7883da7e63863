"""Paired-eta ablation: does the attention constraint move the metrics?

Trains one model per eta value on the same synthetic dataset with identical
seeds, then scores each on held-out poses two ways: fraction of keypoint-token
attention mass within 2 sigma of the keypoint, and centroid-estimator pose mAP
over fresh generations. Reports per-run metrics plus the margin of each eta
over the first (reference) eta.
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .backbone import load_trained_model, schedule_from_config
from .config import FullConfig, ModelConfig, SamplingConfig, TrainConfig
from .evaluation import PredictionSet, centroid_estimator, pose_map
from .kcl import GatingConfig
from .pose import SkeletonSpec, default_skeleton
from .sampler import AttentionMap, SampleRequest, sample
from .synth import SyntheticSample, make_synthetic_dataset
from .tensorio import save_png
from .trainer import run_training


@dataclasses.dataclass(frozen=True)
class ExperimentProfile:
    """Everything that sizes one ablation run; etas[0] is the reference."""

    name: str = "desk32"
    image_size: int = 32
    widths: tuple = (16, 24, 32)
    time_dim: int = 32
    text_dim: int = 64
    context_len: int = 40
    seed_dim: int = 64
    spr_hidden: int = 32
    point_radius: int = 2
    dataset_size: int = 512
    train_steps: int = 10000
    batch_size: int = 8
    lr: float = 1e-4
    prompt_drop_prob: float = 0.5
    heatmap_sigma: float = 1.0
    gate_low: int = 250
    gate_high: int = 500
    etas: tuple = (0.0, 0.1)
    seed: int = 0
    eval_count: int = 64
    eval_seed: int = 9000
    eval_steps: int = 20
    eval_cfg_scale: float = 3.0
    save_images: bool = False

    def __post_init__(self):
        if len(self.etas) < 2:
            raise ValueError("need at least a reference eta and one variant")
        if self.eval_seed == self.seed:
            raise ValueError("eval poses must not reuse the training seed")

    def full_config(self, eta: float, out_dir: str) -> FullConfig:
        return FullConfig(
            model=ModelConfig(
                image_size=self.image_size,
                widths=self.widths,
                time_dim=self.time_dim,
                text_dim=self.text_dim,
                context_len=self.context_len,
                seed_dim=self.seed_dim,
                spr_hidden=self.spr_hidden,
                cond_resolution=self.image_size,
            ),
            gating=GatingConfig(t_low=self.gate_low, t_high=self.gate_high,
                                blocks=("enc.2",)),
            train=TrainConfig(
                eta=eta,
                lr=self.lr,
                prompt_drop_prob=self.prompt_drop_prob,
                batch_size=self.batch_size,
                max_steps=self.train_steps,
                seed=self.seed,
                heatmap_sigma=self.heatmap_sigma,
                checkpoint_every=self.train_steps + 1,
                out_dir=out_dir,
                dataset_size=self.dataset_size,
                dataset_seed=self.seed,
            ),
            sampling=SamplingConfig(steps=self.eval_steps,
                                    cfg_scale=self.eval_cfg_scale),
        )


# Canonical run sizes. "micro" fits a test suite on one CPU core; "desk32"
# is the overnight-CPU scale; "desk64" is the full commodity-accelerator
# scale. Margins from the first run of each are pinned in
# experiments/kcl_baselines.json.
PROFILES = {
    "micro": ExperimentProfile(
        name="micro", image_size=16, widths=(8, 12, 16), time_dim=16,
        text_dim=32, context_len=24, seed_dim=32, spr_hidden=16,
        point_radius=1, dataset_size=64, train_steps=1500, batch_size=4,
        lr=2e-3, eval_count=12, eval_steps=10, eval_cfg_scale=2.0,
    ),
    "desk32": ExperimentProfile(
        name="desk32", image_size=32, widths=(16, 24, 32), time_dim=32,
        text_dim=64, context_len=40, seed_dim=64, spr_hidden=32,
        point_radius=2, dataset_size=512, train_steps=10000, batch_size=8,
        lr=1e-3, eval_count=64, eval_steps=20, eval_cfg_scale=3.0,
    ),
    "desk64": ExperimentProfile(
        name="desk64", image_size=64, widths=(16, 32, 48), time_dim=64,
        text_dim=128, context_len=77, seed_dim=768, spr_hidden=256,
        point_radius=2, dataset_size=512, train_steps=10000, batch_size=8,
        lr=1e-3, eval_count=64, eval_steps=20, eval_cfg_scale=3.0,
    ),
}


def attention_mass_near_keypoints(maps: Sequence[AttentionMap],
                                  sample_pose, image_size: int,
                                  sigma: float) -> Optional[float]:
    """Mean fraction of each token's attention mass within 2 sigma of its
    keypoint, in heatmap-grid units. None when no map carries mass."""
    inst = sample_pose.instances[0]
    fractions = []
    for amap in maps:
        x, y, v = inst.keypoints[amap.keypoint_index]
        if v < 1:
            continue
        grid = np.asarray(amap.map, dtype=np.float64)
        res = grid.shape[0]
        total = grid.sum()
        if total <= 0.0:
            continue
        scale = res / image_size
        cx, cy = x * scale, y * scale
        rows = np.arange(res)[:, None] + 0.5
        cols = np.arange(res)[None, :] + 0.5
        within = (rows - cy) ** 2 + (cols - cx) ** 2 <= (2.0 * sigma) ** 2
        fractions.append(float(grid[within].sum() / total))
    if not fractions:
        return None
    return float(np.mean(fractions))


def _evaluate_run(checkpoint: Path, profile: ExperimentProfile,
                  eval_samples: Sequence[SyntheticSample],
                  image_dir: Optional[Path] = None) -> Dict:
    model, cfg = load_trained_model(checkpoint)
    schedule = schedule_from_config(cfg.schedule)
    spec = model.spec

    masses: List[float] = []
    by_image = {}
    for i, item in enumerate(eval_samples):
        req = SampleRequest(
            pose_set=item.pose_set,
            caption=item.caption,
            seed=profile.eval_seed + i,
            steps=profile.eval_steps,
            cfg_scale=profile.eval_cfg_scale,
            cond_scale=1.0,
            capture_attention=True,
        )
        image, maps = sample(model, schedule, req, gating=cfg.gating)
        if image_dir is not None:
            save_png(image_dir / f"gen_{i:03d}.png", image)
        mass = attention_mass_near_keypoints(
            maps, item.pose_set, profile.image_size, profile.heatmap_sigma)
        if mass is not None:
            masses.append(mass)
        pred = centroid_estimator(image, spec)
        by_image[str(item.pose_set.image_id)] = (pred,)

    preds = PredictionSet(spec_name=spec.name, by_image=by_image)
    gts = [item.pose_set for item in eval_samples]
    scored = pose_map(preds, gts)
    return {
        "attention_mass": float(np.mean(masses)) if masses else 0.0,
        "pose_map": scored["mAP"],
        "n_eval": len(eval_samples),
    }


def run_kcl_experiment(profile: ExperimentProfile, out_dir,
                       spec: Optional[SkeletonSpec] = None) -> Dict:
    """Train one model per eta and score both metrics on held-out poses."""
    spec = spec or default_skeleton()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    size = (profile.image_size, profile.image_size)

    dataset = make_synthetic_dataset(
        profile.dataset_size, spec, seed=profile.seed,
        image_size=size, point_radius=profile.point_radius)
    eval_samples = make_synthetic_dataset(
        profile.eval_count, spec, seed=profile.eval_seed,
        image_size=size, point_radius=profile.point_radius)

    runs = []
    for eta in profile.etas:
        run_dir = out_dir / f"eta_{eta:g}"
        cfg = profile.full_config(eta, str(run_dir))
        checkpoint = run_training(cfg, dataset)
        image_dir = None
        if profile.save_images:
            image_dir = run_dir / "generations"
            image_dir.mkdir(parents=True, exist_ok=True)
        metrics = _evaluate_run(checkpoint, profile, eval_samples, image_dir)
        runs.append({"eta": eta, "checkpoint": str(checkpoint), **metrics})

    reference = runs[0]
    margins = [
        {
            "eta": run["eta"],
            "attention_mass": run["attention_mass"] - reference["attention_mass"],
            "pose_map": run["pose_map"] - reference["pose_map"],
        }
        for run in runs[1:]
    ]
    report = {
        "profile": dataclasses.asdict(profile),
        "runs": runs,
        "margins": margins,
    }
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report
