"""Command-line entry point: gen-data, train, eval, profile, params."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import ExperimentConfig, load_config
from .data import load_dataset, synthetic_dataset, write_dataset
from .errors import UsageError, VSRError
from .metrics import as_model, evaluate, save_profile, temporal_profile
from .student import build_student, count_params
from .training import Trainer, student_from_checkpoint
from .video import load_clip


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def cmd_gen_data(args) -> int:
    ds = synthetic_dataset(args.clips, args.frames, tuple(args.size), args.seed, args.motion)
    write_dataset(ds, args.out)
    print(json.dumps({"out": str(args.out), "clips": len(ds.clips), "train": len(ds.train_ids), "val": len(ds.val_ids)}))
    return 0


def _train_config(args, resume) -> ExperimentConfig:
    if args.config or args.profile or resume is None or resume.stage != args.stage:
        return load_config(args.config, args.profile)
    # resuming mid-stage without a config: re-use the echo stored in the checkpoint
    from .config import config_from_dict

    return config_from_dict(resume.meta["config"], apply_env=True)


def cmd_train(args) -> int:
    resume = load_checkpoint(args.resume) if args.resume else None
    cfg = _train_config(args, resume)
    if args.iterations:
        cfg.stage_cfg(args.stage).iterations = args.iterations
    data_dir = args.data or cfg.data_dir
    if not data_dir:
        raise UsageError("no dataset: pass --data or set data_dir in the config")
    cfg.data_dir = str(data_dir)
    data = load_dataset(data_dir)

    if resume is not None and resume.stage == args.stage:
        trainer = Trainer.from_checkpoint(resume, data, cfg)
    elif args.stage == 1:
        if resume is not None:
            raise UsageError(f"--resume {args.resume} is a stage-{resume.stage} checkpoint, cannot resume stage 1")
        trainer = Trainer(cfg, data, 1)
    else:
        stage1 = resume
        if stage1 is None:
            if not cfg.stage1_checkpoint:
                raise UsageError("stage 2 requires a stage-1 checkpoint: set stage1_checkpoint in the config or pass --resume")
            stage1 = load_checkpoint(cfg.stage1_checkpoint)
        else:
            cfg.stage1_checkpoint = str(args.resume)
        if stage1.stage != 1:
            raise UsageError("stage 2 must start from a stage-1 checkpoint")
        trainer = Trainer(cfg, data, 2, stage1=stage1)

    out = Path(args.out)
    trainer.extra_meta["command"] = ["train", "--stage", str(args.stage), "--data", cfg.data_dir, "--out", str(out)]
    ckpt = trainer.run(out, out / f"stage{args.stage}_log.jsonl")
    last = trainer.history[-1] if trainer.history else {}
    print(json.dumps({"checkpoint": str(out / f"stage{args.stage}.ckpt"), "iteration": ckpt.iteration, "last": last}))
    return 0


def cmd_eval(args) -> int:
    net, cfg = student_from_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    ids = ds.val_ids or list(range(len(ds.clips)))
    clips = [ds.clips[i] for i in ids]
    flows = [ds.flows[i] for i in ids]
    report = evaluate(as_model(net), clips, flows, cfg.degradation, seed=cfg.seed)
    report.dataset = str(args.data)
    report.checkpoint = str(args.ckpt)
    report.config_echo["config"] = cfg.to_dict()
    report.config_echo["command"] = ["eval", "--ckpt", str(args.ckpt), "--data", str(args.data), "--report", str(args.report)]
    report.write(args.report)
    print(json.dumps({"report": str(args.report), "psnr": report.psnr, "ssim": report.ssim, "e_warp_star": report.e_warp_star}))
    return 0


def cmd_profile(args) -> int:
    clip = load_clip(args.video)
    row = args.row if args.row == "center" else int(args.row)
    save_profile(temporal_profile(clip, row), args.out)
    print(json.dumps({"profile": str(args.out)}))
    return 0


def cmd_params(args) -> int:
    if args.ckpt:
        net, _ = student_from_checkpoint(args.ckpt)
    else:
        cfg = load_config(args.config, args.profile)
        net = build_student(cfg.student, cfg.seed)
    print(json.dumps(count_params(net)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vsrdistill", description="Compact video SR student: data, training, evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a procedural clip dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--clips", type=int, default=8)
    g.add_argument("--frames", type=int, default=5)
    g.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--motion", default="mixed")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run training stage 1 or 2")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--config")
    t.add_argument("--profile")
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--iterations", type=int, help="override the stage's iteration count")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on held-out clips")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("profile", help="write the width-time slice of a clip")
    pr.add_argument("--video", required=True)
    pr.add_argument("--row", default="center")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_profile)

    pa = sub.add_parser("params", help="print the parameter breakdown")
    pa.add_argument("--ckpt")
    pa.add_argument("--config")
    pa.add_argument("--profile")
    pa.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except VSRError as exc:
        print(f"error[{exc.code}]: {exc}".replace("\n", " "), file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error[E_IO]: {exc}".replace("\n", " "), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
