"""Command line front end: training, generation, serving, evaluation."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path


def _cmd_train(args) -> int:
    from .config import load_config
    from .pose import default_skeleton, load_skeleton_spec
    from .synth import make_synthetic_dataset
    from .trainer import run_training

    cfg = load_config(args.config)
    spec = load_skeleton_spec(args.spec) if args.spec else default_skeleton()
    size = (cfg.model.image_size, cfg.model.image_size)
    dataset = make_synthetic_dataset(
        cfg.train.dataset_size, spec, seed=cfg.train.dataset_seed,
        image_size=size)
    final = run_training(cfg, dataset, resume=args.resume)
    print(f"final checkpoint: {final}")
    return 0


def _cmd_generate(args) -> int:
    from .backbone import load_trained_model, schedule_from_config
    from .pose import load_pose_document
    from .sampler import SampleRequest, sample
    from .tensorio import save_png

    model, cfg = load_trained_model(args.checkpoint)
    schedule = schedule_from_config(cfg.schedule)
    pose_set = load_pose_document(args.pose, model.spec)
    req = SampleRequest(
        pose_set=pose_set,
        caption=args.prompt,
        seed=args.seed,
        steps=args.steps if args.steps else cfg.sampling.steps,
        cfg_scale=args.cfg_scale if args.cfg_scale is not None
        else cfg.sampling.cfg_scale,
        cond_scale=args.cond_scale if args.cond_scale is not None
        else cfg.sampling.cond_scale,
        capture_attention=args.attention_out is not None,
    )
    image, maps = sample(model, schedule, req, gating=cfg.gating)
    save_png(args.out, image)
    print(f"wrote {args.out}")
    if args.attention_out is not None:
        payload = [
            {"keypoint": m.keypoint_name, "map": m.map.tolist()}
            for m in maps
        ]
        with open(args.attention_out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
        print(f"wrote {args.attention_out}")
    return 0


def _cmd_serve(args) -> int:
    from .config import load_config
    from .service import serve

    cfg = load_config(args.config)
    checkpoint = cfg.service.checkpoint or str(
        Path(cfg.train.out_dir) / "ckpt_final.pt")
    host = args.host or cfg.service.host
    port = args.port or cfg.service.port
    serve(checkpoint, host=host, port=port)
    return 0


def _cmd_evaluate(args) -> int:
    from .evaluation import evaluate_generations, load_predictions
    from .pose import load_skeleton_spec, parse_coco_keypoints

    spec = load_skeleton_spec(args.spec)
    gts = parse_coco_keypoints(args.gt, spec)
    preds = load_predictions(args.pred, spec)
    report = evaluate_generations(preds, gts)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(f"mAP {report['mAP']:.2f} over {report['n_images']} images "
          f"({report['n_gt_instances']} instances); wrote {args.out}")
    return 0


def _cmd_make_data(args) -> int:
    from .pose import default_skeleton, load_skeleton_spec, serialize_pose
    from .synth import make_synthetic_dataset
    from .tensorio import save_png

    spec = load_skeleton_spec(args.spec) if args.spec else default_skeleton()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = make_synthetic_dataset(
        args.count, spec, seed=args.seed,
        image_size=(args.image_size, args.image_size),
        point_radius=args.point_radius)
    manifest = []
    for item in samples:
        name = f"{item.pose_set.image_id}.png"
        save_png(out / name, item.image)
        manifest.append({
            "image": name,
            "image_id": item.pose_set.image_id,
            "caption": item.caption,
            "pose": json.loads(serialize_pose(item.pose_set)),
        })
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def _cmd_kcl_ablation(args) -> int:
    from .experiment import PROFILES, run_kcl_experiment

    profile = PROFILES[args.profile]
    overrides = {}
    if args.train_steps is not None:
        overrides["train_steps"] = args.train_steps
    if args.dataset_size is not None:
        overrides["dataset_size"] = args.dataset_size
    if args.eval_count is not None:
        overrides["eval_count"] = args.eval_count
    if args.etas is not None:
        overrides["etas"] = tuple(float(v) for v in args.etas.split(","))
    if args.save_images:
        overrides["save_images"] = True
    if overrides:
        profile = dataclasses.replace(profile, **overrides)
    report = run_kcl_experiment(profile, args.out)
    for run in report["runs"]:
        print(f"eta {run['eta']:g}: attention mass {run['attention_mass']:.4f}, "
              f"pose mAP {run['pose_map']:.2f}")
    for margin in report["margins"]:
        print(f"margin eta {margin['eta']:g} vs {report['runs'][0]['eta']:g}: "
              f"attention mass {margin['attention_mass']:+.4f}, "
              f"pose mAP {margin['pose_map']:+.2f}")
    print(f"wrote {Path(args.out) / 'report.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsepose",
        description="Pose-conditioned toy diffusion: train, sample, serve, "
                    "and evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--spec", default=None, help="skeleton spec JSON")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="sample one image from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pose", required=True, help="pose document JSON")
    p.add_argument("--prompt", default="")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--cfg-scale", type=float, default=None)
    p.add_argument("--cond-scale", type=float, default=None)
    p.add_argument("--attention-out", default=None,
                   help="also write per-keypoint attention maps as JSON")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("serve", help="run the generation HTTP service")
    p.add_argument("--config", required=True)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--host", default=None)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("evaluate", help="score predictions against COCO gt")
    p.add_argument("--pred", required=True, help="predictions JSON")
    p.add_argument("--gt", required=True, help="COCO keypoint annotations")
    p.add_argument("--spec", required=True, help="skeleton spec JSON")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("make-data", help="write a synthetic dataset to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--point-radius", type=int, default=2)
    p.add_argument("--spec", default=None)
    p.set_defaults(func=_cmd_make_data)

    p = sub.add_parser("kcl-ablation",
                       help="paired-eta training runs plus metric comparison")
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=("micro", "desk32", "desk64"),
                   default="desk32")
    p.add_argument("--train-steps", type=int, default=None)
    p.add_argument("--dataset-size", type=int, default=None)
    p.add_argument("--eval-count", type=int, default=None)
    p.add_argument("--etas", default=None, help="comma-separated eta values")
    p.add_argument("--save-images", action="store_true")
    p.set_defaults(func=_cmd_kcl_ablation)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
