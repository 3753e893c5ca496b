"""End-to-end desk run: data, both training stages, evaluation and a temporal profile.

    python3 scripts/desk_pipeline.py --out runs/desk
    python3 scripts/desk_pipeline.py --out runs/quick --stage1-iters 50 --stage2-iters 20
"""
import argparse
import json
import sys
from pathlib import Path

from vsrdistill.cli import main as cli


def step(*argv) -> None:
    argv = [str(a) for a in argv]
    print("$ vsrdistill " + " ".join(argv), flush=True)
    code = cli(argv)
    if code:
        sys.exit(code)


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--profile", default="default")
    p.add_argument("--config", help="YAML overrides applied on top of the profile")
    p.add_argument("--clips", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stage1-iters", type=int)
    p.add_argument("--stage2-iters", type=int)
    return p.parse_args(argv)


def run(args) -> dict:
    out = Path(args.out)
    data = out / "data"
    if not (data / "dataset.json").is_file():
        step("gen-data", "--out", data, "--clips", args.clips, "--frames", 5, "--size", 64, 64, "--seed", args.seed)

    common = ["--profile", args.profile, "--data", data]
    if args.config:
        common += ["--config", args.config]
    s1 = ["--iterations", args.stage1_iters] if args.stage1_iters else []
    step("train", "--stage", 1, *common, "--out", out / "stage1", *s1)
    ck1 = out / "stage1" / "stage1.ckpt"

    reports = {}
    step("eval", "--ckpt", ck1, "--data", data, "--report", out / "eval_stage1.json")
    reports["stage1"] = json.loads((out / "eval_stage1.json").read_text())["metrics"]
    s2 = ["--iterations", args.stage2_iters] if args.stage2_iters else []
    step("train", "--stage", 2, *common, "--resume", ck1, "--out", out / "stage2", *s2)
    step("eval", "--ckpt", out / "stage2" / "stage2.ckpt", "--data", data, "--report", out / "eval_stage2.json")
    reports["stage2"] = json.loads((out / "eval_stage2.json").read_text())["metrics"]

    manifest = json.loads((data / "dataset.json").read_text())
    clip = data / manifest["split"]["val"][0]
    step("profile", "--video", clip, "--row", "center", "--out", out / "profile_gt.png")
    print(json.dumps(reports, indent=2))
    (out / "summary.json").write_text(json.dumps(reports, indent=2))
    return reports


if __name__ == "__main__":
    run(parse_args())
