"""Run a shortened desk pipeline per ablation profile and tabulate held-out metrics.

    python3 scripts/ablation_sweep.py --out runs/sweep --profiles 2d_only 2d_1d single_head
    python3 scripts/ablation_sweep.py --out runs/sweep --group split
"""
import argparse
import json
from pathlib import Path

from desk_pipeline import parse_args as pipeline_args
from desk_pipeline import run as run_pipeline

from vsrdistill.config import PROFILES

GROUPS = {
    "architecture": ["2d_only", "2d_1d", "temporal_doubled", "temporal_attention"],
    "discriminator": ["single_head", "single_domain", "2d_1d"],
    "split": ["split_100_0", "split_75_25", "split_50_50", "split_25_75", "split_0_100"],
    "curation": ["no_shuffled", "video_detail_real", "2d_1d"],
    "recipe": ["no_adv", "gt_teacher", "reference_hparams"],
}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="runs/sweep")
    p.add_argument("--profiles", nargs="*")
    p.add_argument("--group", choices=sorted(GROUPS))
    p.add_argument("--stage1-iters", type=int, default=100)
    p.add_argument("--stage2-iters", type=int, default=50)
    args = p.parse_args(argv)
    names = args.profiles or GROUPS.get(args.group) or sorted(PROFILES)

    out = Path(args.out)
    rows = {}
    for name in names:
        run_args = pipeline_args(
            ["--out", str(out / name), "--profile", name,
             "--stage1-iters", str(args.stage1_iters), "--stage2-iters", str(args.stage2_iters)]
        )
        reports = run_pipeline(run_args)
        rows[name] = reports["stage2"]

    print(f"{'profile':<22}{'PSNR':>8}{'SSIM':>8}{'E*warp':>10}")
    for name, m in rows.items():
        ew = "-" if m["e_warp_star"] is None else f"{m['e_warp_star']:.3f}"
        print(f"{name:<22}{m['psnr']:>8.2f}{m['ssim']:>8.3f}{ew:>10}")
    (out / "sweep.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
