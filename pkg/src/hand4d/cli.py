"""Command-line surface: gen, train-vae, train-diffusion, infer, eval.

Every command honors --threads (1 guarantees determinism) and the
HAND4D_SEED environment variable, which overrides any configured seed.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import argparse
import sys

import numpy as np
import torch

from .container import read_container, write_container
from .datagen import (GenSpec, TEST_SEEDS, TRAIN_SEEDS, gen_scene,
                      load_scene, save_scene, write_manifest)
from .diffusion import SamplerConfig
from .errors import Hand4dError
from .hand_model import HandPose
from .trainer import (TrainConfig, evaluate, infer, load_models,
                      load_scenes, load_train_config, seed_with_env,
                      train_stage1_vae, train_stage2_diffusion)

CONDITION_CHOICES = ("keypoints2d", "keypoints3d", "mano", "vision")


def _split_kinds(raw: str) -> List[str]:
    kinds = [k.strip() for k in raw.split(",") if k.strip()]
    for k in kinds:
        if k not in CONDITION_CHOICES:
            raise argparse.ArgumentTypeError(f"unknown condition {k!r}")
    return kinds


def _add_sampler_flags(p: argparse.ArgumentParser):
    p.add_argument("--method", choices=("ddim", "ddpm"), default="ddim")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--cfg-scale", type=float, default=2.0)
    p.add_argument("--eta", type=float, default=0.0)


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML file mirroring TrainConfig fields")
    p.add_argument("--data", help="scene directory with manifest.json")
    p.add_argument("--out", help="checkpoint output directory")
    p.add_argument("--preset", default=None, choices=("paper", "desk"))
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)


def _train_config(args, stage: str) -> TrainConfig:
    overrides = {"stage": stage, "threads": args.threads}
    flag_map = {"data_dir": args.data, "out_dir": args.out,
                "preset": args.preset, "total_iters": args.iters,
                "warmup_iters": args.warmup, "batch_size": args.batch,
                "lr": args.lr, "window": args.window, "seed": args.seed}
    if stage == "diffusion":
        flag_map["vae_checkpoint"] = args.vae_ckpt
    overrides.update({k: v for k, v in flag_map.items() if v is not None})
    if args.config:
        return load_train_config(args.config, **overrides)
    if "data_dir" not in overrides or "out_dir" not in overrides:
        raise Hand4dError("--data and --out are required without --config")
    cfg = TrainConfig(**overrides)
    return replace(cfg, seed=seed_with_env(cfg.seed))


def _cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base_seeds = list(TRAIN_SEEDS if args.split == "train" else TEST_SEEDS)
    if args.count > len(base_seeds):
        raise Hand4dError(f"split {args.split} allows at most {len(base_seeds)} scenes")
    names = []
    for i in range(args.count):
        camera = args.camera if args.camera != "mixed" \
            else ("static", "dynamic")[i % 2]
        regime = args.regime if args.regime != "mixed" \
            else ("clean", "bursty")[i % 2]
        spec = GenSpec(seed=base_seeds[i], n_frames=args.frames,
                       camera_mode=camera, occlusion_regime=regime)
        scene = gen_scene(spec)
        name = f"{scene.scene_id}.h4dc"
        save_scene(scene, out / name)
        names.append(name)
    write_manifest(out, names, {"frames": args.frames, "camera": args.camera,
                                "regime": args.regime}, split=args.split)
    print(f"wrote {len(names)} scenes to {out}")
    return 0


def _cmd_train_vae(args) -> int:
    cfg = _train_config(args, "vae")
    scenes = load_scenes(cfg.data_dir)
    ckpt = train_stage1_vae(cfg, scenes)
    tail = ckpt.extra["losses_tail"][-1]
    print(f"stage-1 done: {cfg.total_iters} iters, final loss {tail:.6f}, "
          f"checkpoint {Path(cfg.out_dir) / 'vae.ckpt'}")
    return 0


def _cmd_train_diffusion(args) -> int:
    cfg = _train_config(args, "diffusion")
    scenes = load_scenes(cfg.data_dir)
    ckpt = train_stage2_diffusion(cfg, scenes)
    tail = ckpt.extra["losses_tail"][-1]
    print(f"stage-2 done: {cfg.total_iters} iters, final loss {tail:.6f}, "
          f"checkpoint {Path(cfg.out_dir) / 'diffusion.ckpt'}")
    return 0


def _load_first_frame(path) -> Optional[HandPose]:
    if path is None:
        return None
    kind, _, arrays = read_container(path)
    if kind != "pose" or "pose" not in arrays:
        raise Hand4dError(f"{path} is not a pose file")
    return HandPose.from_vector(arrays["pose"].astype(np.float64))


def _cmd_infer(args) -> int:
    torch.set_num_threads(args.threads)
    scene = load_scene(args.scene)
    models = load_models(args.vae_ckpt, args.diffusion_ckpt)
    sampler = SamplerConfig(args.method, args.steps, args.cfg_scale, args.eta)
    seed = seed_with_env(args.seed)
    motion, latents = infer(models, scene, args.conditions, sampler, seed,
                            first_frame=_load_first_frame(args.first_frame))
    write_container(args.out, "motion",
                    {"n_frames": motion.n_frames, "seed": seed,
                     "scene": scene.scene_id},
                    {"params": motion.params,
                     "latents": latents[0].numpy()})
    print(f"wrote {motion.n_frames}-frame motion to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    torch.set_num_threads(args.threads)
    scenes = load_scenes(args.data)
    if not args.use_gt and not (args.vae_ckpt and args.diffusion_ckpt):
        raise Hand4dError("eval needs --vae-ckpt and --diffusion-ckpt "
                          "unless --use-gt is set")
    models = None if args.use_gt \
        else load_models(args.vae_ckpt, args.diffusion_ckpt)
    sampler = SamplerConfig(args.method, args.steps, args.cfg_scale, args.eta)
    report = evaluate(models, scenes, args.csv, args.json, sampler,
                      args.conditions, seed=seed_with_env(args.seed),
                      use_gt=args.use_gt)
    overall = report["overall"]
    print(f"evaluated {report['n_scenes']} scenes: "
          f"PA-MPJPE {overall['pa_mpjpe_mm']:.3f} mm, AUC_J {overall['auc_j']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hand4d",
        description="Synthetic 4D hand-motion generation: data, training, "
                    "sampling, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a seeded synthetic scene split")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--frames", type=int, default=48)
    p.add_argument("--camera", choices=("static", "dynamic", "mixed"),
                   default="mixed")
    p.add_argument("--regime", choices=("clean", "bursty", "mixed"),
                   default="mixed")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train-vae", help="stage 1: fit the joint VAE")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train_vae)

    p = sub.add_parser("train-diffusion",
                       help="stage 2: fit the denoiser against a frozen VAE")
    _add_train_flags(p)
    p.add_argument("--vae-ckpt", default=None)
    p.set_defaults(func=_cmd_train_diffusion)

    p = sub.add_parser("infer", help="sample a motion for one scene")
    p.add_argument("--vae-ckpt", required=True)
    p.add_argument("--diffusion-ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--conditions", type=_split_kinds,
                   default=["vision", "keypoints2d"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--first-frame", default=None,
                   help="pose container standing in for a detector output")
    _add_sampler_flags(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="run inference over a split and report metrics")
    p.add_argument("--vae-ckpt")
    p.add_argument("--diffusion-ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--json", required=True)
    p.add_argument("--conditions", type=_split_kinds,
                   default=["vision", "keypoints2d"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--use-gt", action="store_true",
                   help="score ground truth against itself (pipeline self-check)")
    _add_sampler_flags(p)
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Hand4dError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
