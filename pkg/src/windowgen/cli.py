"""Command-line entry point: data synthesis, training stages, generation, evaluation."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import traceback
from pathlib import Path

import numpy as np
import torch

from . import io
from .autoregression import run_layout, run_perpetual, run_sparse_interpolation
from .checkpoint import Checkpoint
from .config import Config, load_config
from .data import build_scene_records, read_dataset, write_dataset
from .geometry import CameraModel
from .metrics import (align_trajectory, frame_report, keyframe_indices, oracle_pose_estimator,
                      pose_metrics, write_manifest)
from .scene_synth import TRAJECTORY_KINDS
from .training import (STAGES, Ablation, SceneVideoModel, pretrain_autoencoder,
                       pretrain_backbone, train_stage)

log = logging.getLogger("windowgen")

ABLATION_FLAGS = ("no_spatial_cond", "no_temporal_cond", "no_depth_input", "no_depth_loss",
                  "fix_lrm", "use_gt_depth_cloud")
CHECKPOINT_NAME = "checkpoint.ckpt"


def _common() -> argparse.ArgumentParser:
    # SUPPRESS lets the global flags appear before or after the subcommand.
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="windowgen", parents=[common],
                                     description="Window-by-window scene video generation "
                                                 "on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="render a synthetic dataset")
    p.add_argument("--scene-seeds", type=int, nargs="+", default=None)
    p.add_argument("--kinds", nargs="+", default=list(TRAJECTORY_KINDS),
                   choices=TRAJECTORY_KINDS)
    p.add_argument("--length", type=int, default=None)
    p.add_argument("--traj-seed", type=int, default=0)

    p = sub.add_parser("pretrain-ae", parents=[common], help="pretrain the frame autoencoder")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("pretrain-backbone", parents=[common],
                       help="pretrain the unconditional video denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("train", parents=[common], help="run one conditioning training stage")
    p.add_argument("--stage", required=True, choices=STAGES)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=None)
    for flag in ABLATION_FLAGS:
        p.add_argument("--" + flag.replace("_", "-"), action="store_true")

    p = sub.add_parser("generate", parents=[common], help="run a generation task")
    p.add_argument("task", choices=("interp", "perpetual", "layout"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset supplying inputs and poses")
    p.add_argument("--clip", type=int, default=0)
    p.add_argument("--length", type=int, default=None)
    p.add_argument("--two-pass", type=int, default=None, metavar="M")
    p.add_argument("--sample-steps", type=int, default=None)
    for flag in ("no_spatial_cond", "no_temporal_cond", "no_depth_input"):
        p.add_argument("--" + flag.replace("_", "-"), action="store_true")

    p = sub.add_parser("eval", parents=[common], help="score generated frames")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--estimated", default=None,
                   help="poses.json-style file of estimated poses for the generated frames")
    p.add_argument("--oracle-rot-deg", type=float, default=0.0)
    p.add_argument("--oracle-trans", type=float, default=0.0)

    p = sub.add_parser("inspect-checkpoint", parents=[common], help="print checkpoint summary")
    p.add_argument("path")
    return parser


# ---------------------------------------------------------------------- commands

def _seed(args) -> int:
    return getattr(args, "seed", 0)


def _ablation(args) -> Ablation:
    return Ablation(**{f: bool(getattr(args, f, False)) for f in ABLATION_FLAGS})


def _load_model(path) -> SceneVideoModel:
    p = Path(path)
    if p.is_dir():
        p = p / CHECKPOINT_NAME
    return SceneVideoModel.from_checkpoint(Checkpoint.load(p))


def _metrics_logger(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    f = open(out / "metrics.jsonl", "w")

    def write(rec):
        f.write(json.dumps(rec, sort_keys=True) + "\n")
        f.flush()
    return f, write


def cmd_synth_data(args, cfg: Config, out: Path) -> dict:
    seeds = args.scene_seeds or [cfg.scene_seed]
    length = args.length or cfg.trajectory_length
    records = []
    for s in seeds:
        _, recs = build_scene_records(s, tuple(args.kinds), length, args.traj_seed,
                                      camera=CameraModel.from_fov(cfg.image_size, cfg.image_size,
                                                                  cfg.fov_deg))
        records.extend(recs)
    write_dataset(out, records, cfg.window)
    return {"clips": len(records), "frames_per_clip": length}


def cmd_pretrain_ae(args, cfg: Config, out: Path) -> dict:
    torch.manual_seed(_seed(args))
    records, _ = read_dataset(args.data)
    model = SceneVideoModel(cfg)
    frames = np.concatenate([r.images for r in records])
    f, logger = _metrics_logger(out)
    with f:
        hist = pretrain_autoencoder(model.ae, frames, args.steps or cfg.ae_steps, cfg.ae_batch,
                                    lr=cfg.ae_lr, seed=_seed(args), log_fn=logger)
    ck = model.to_checkpoint("ae", {"steps": len(hist)})
    ck.save(out / CHECKPOINT_NAME)
    return {"checkpoint": ck.content_hash(), "final_mse": hist[-1]["mse"] if hist else None}


def cmd_pretrain_backbone(args, cfg: Config, out: Path) -> dict:
    torch.manual_seed(_seed(args))
    records, _ = read_dataset(args.data)
    model = _load_model(args.checkpoint)
    f, logger = _metrics_logger(out)
    with f:
        hist = pretrain_backbone(model, records, args.steps or cfg.backbone_steps,
                                 seed=_seed(args), log_fn=logger)
    ck = model.to_checkpoint("backbone", {"steps": len(hist)})
    ck.save(out / CHECKPOINT_NAME)
    return {"checkpoint": ck.content_hash()}


STAGE_STEPS = {"lrm_ccn_warmup": "warmup_stage_steps", "lrm_ccn_intervals": "intervals_stage_steps",
               "joint": "joint_steps", "layout": "layout_steps"}


def cmd_train(args, cfg: Config, out: Path) -> dict:
    torch.manual_seed(_seed(args))
    records, _ = read_dataset(args.data)
    model = _load_model(args.checkpoint)
    ablation = _ablation(args)
    steps = args.steps if args.steps is not None else getattr(model.cfg, STAGE_STEPS[args.stage])
    f, logger = _metrics_logger(out)
    with f:
        hist = train_stage(model, records, args.stage, steps, seed=_seed(args),
                           ablation=ablation, log_fn=logger)
    ck = model.to_checkpoint(args.stage, {"steps": len(hist), "ablation": ablation.to_dict()})
    ck.save(out / CHECKPOINT_NAME)
    return {"checkpoint": ck.content_hash(), "ablation": ablation.to_dict(),
            "group_hashes": {g: ck.group_hash(g) for g in ck.groups}}


def cmd_generate(args, cfg: Config, out: Path) -> dict:
    model = _load_model(args.checkpoint)
    torch.manual_seed(_seed(args))
    records, _ = read_dataset(args.data)
    rec = records[args.clip]
    window = model.cfg.window
    ablation = _ablation(args)
    seed = _seed(args)
    if args.task == "interp":
        length = args.length or (window if args.two_pass is None
                                 else args.two_pass * (window - 1) + 1)
        poses = rec.poses[:length]
        res = run_sparse_interpolation(model, rec.frame(0), rec.frame(length - 1), poses,
                                       args.two_pass, seed, ablation, args.sample_steps)
    elif args.task == "perpetual":
        length = args.length or len(rec)
        poses = rec.poses[:length]
        first = rec.frame(0)
        res = run_perpetual(model, first, poses, seed, ablation,
                            reference_mean_depth=float(first.depth.mean()),
                            steps=args.sample_steps)
    else:
        length = args.length or len(rec)
        poses = rec.poses[:length]
        layout = [(rec.depths[i], rec.semantic[i]) for i in range(length)]
        res = run_layout(model, layout, poses, seed, args.sample_steps)
    io.write_frames(out / "frames", list(res.frames), poses, model.camera,
                    extra={"task": args.task})
    io.write_json_atomic(out / "windows.json", res.windows)
    return {"task": args.task, "frames": len(res.frames), "windows": res.windows,
            "checkpoint": Checkpoint.load(_ckpt_path(args.checkpoint)).content_hash()}


def _ckpt_path(p) -> Path:
    p = Path(p)
    return p / CHECKPOINT_NAME if p.is_dir() else p


def cmd_eval(args, cfg: Config, out: Path) -> dict:
    gen, gen_poses, _ = io.read_frames(args.generated)
    ref, ref_poses, _ = io.read_frames(args.reference)
    n = min(len(gen), len(ref))
    report = frame_report(gen[:n], ref[:n])
    if args.estimated:
        doc = io.read_json(args.estimated)
        est = [io.pose_from_list(m) for m in doc["poses"]][:n]
    else:
        est = oracle_pose_estimator(gen_poses[:n], args.oracle_rot_deg, args.oracle_trans,
                                    seed=_seed(args))
    keys = keyframe_indices(n)
    if len(keys) < 2:
        keys = list(range(n))
    if len(keys) >= 2:
        aligned = align_trajectory([est[i] for i in keys], [ref_poses[i] for i in keys])
        report.r_dist, report.t_dist = pose_metrics(aligned.poses, [ref_poses[i] for i in keys])
    report.meta = {"frames": n, "keyframes": keys}
    io.write_json_atomic(out / "report.json", report.to_dict())
    return {"report": report.to_dict()}


def cmd_inspect(args, cfg: Config, out: Path) -> dict:
    summary = Checkpoint.load(_ckpt_path(args.path)).summary()
    print(json.dumps(summary, indent=2, sort_keys=True))
    return {"summary": summary}


COMMANDS = {"synth-data": cmd_synth_data, "pretrain-ae": cmd_pretrain_ae,
            "pretrain-backbone": cmd_pretrain_backbone, "train": cmd_train,
            "generate": cmd_generate, "eval": cmd_eval, "inspect-checkpoint": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(getattr(args, "out", None) or "runs/" + args.command)
    seed = _seed(args)
    t0 = time.time()
    cfg = None
    try:
        cfg = load_config(getattr(args, "config", None))
        torch.manual_seed(seed)
        out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](args, cfg, out)
    except Exception as exc:  # report and exit nonzero
        print(f"error: {exc}", file=sys.stderr)
        log.debug(traceback.format_exc())
        if out.exists():
            write_manifest(out, command=args.command, argv=list(argv or sys.argv[1:]),
                           seed=seed, config=cfg.to_dict() if cfg else None, status="error",
                           error=str(exc), elapsed=time.time() - t0)
        return 1
    write_manifest(out, command=args.command, argv=list(argv if argv is not None
                                                          else sys.argv[1:]),
                   seed=seed, config=cfg.to_dict(), status="ok", result=result,
                   elapsed=time.time() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
