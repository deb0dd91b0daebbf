"""The desk-scale ablation: ours vs baseline and the single-component removals.

Trains every variant on the 256x256 flat_targets scene for 5k iterations,
regenerating the scene per seed, and prints the mean table. One run takes about
four minutes on one core; the runner uses one worker process per core.

Run: python demos/desk_ablation.py [out_dir] [seeds] [variant ...]
e.g. python demos/desk_ablation.py demo_runs/desk 0,1,2 ours baseline "w/o pixel gradient"
"""

import sys
from pathlib import Path

import numpy as np

from splatlab import harness


def main(out_dir="demo_runs/desk", seeds="0", *variants):
    harness.tune_allocator()
    spec = harness.ours_vs_ablations(harness.desk_config("ours"), list(variants) or None)
    seeds = [int(s) for s in seeds.split(",")]
    workers = harness.default_workers()
    print(f"{len(spec.variants)} variants x {len(seeds)} seeds on {workers} worker(s)")
    results = harness.run_ablation("synthetic:flat_targets:0", spec, out_dir, seeds, workers,
                                   dataset_per_seed=True)
    print(f"{'variant':<26}{'psnr':>8}{'ssim':>8}{'gaussians':>11}")
    for name, runs in results.items():
        print(f"{name:<26}{np.mean([r['psnr'] for r in runs]):8.3f}{np.mean([r['ssim'] for r in runs]):8.4f}"
              f"{np.mean([r['gaussians'] for r in runs]):11.1f}")
    run_dirs = [Path(out_dir) / harness.slug(n) / f"seed_{seeds[0]}" for n in results]
    harness.make_report(run_dirs, Path(out_dir) / "report")
    print("tables and plots under", out_dir)


if __name__ == "__main__":
    main(*sys.argv[1:])
