"""Run a miniature version of the whole study and print its reports.

Sizes are cut down so this finishes in well under a minute; the numbers are
not meaningful, only the plumbing is. Use ``pinngrid reproduce`` for the
real thing.

    python3 demos/small_study.py [out_dir]
"""
import sys
from pathlib import Path

from pinngrid.baselines import ForestConfig, GbtConfig
from pinngrid.nn import TrainConfig
from pinngrid.pipeline import DataSizes, RunConfig, acceptance_gates, cmd_reproduce

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo")
cfg = RunConfig(out=str(out),
                data=DataSizes(generative=2000, per_bin=200, episodes=5, horizon=96),
                forest=ForestConfig(trees=10, max_depth=8),
                gbt=GbtConfig(rounds=20, max_depth=4),
                train=TrainConfig(max_steps=1500, batch_size=256, lr=2e-3, check_every=100,
                                  patience=40, lr_patience=5, min_lr=1e-5))
res = cmd_reproduce(cfg)
for md in sorted((out / "reports").glob("*.md")):
    print(md.read_text())
for g in acceptance_gates(res, cfg.load_case().storage[0].soc_max):
    print(f"{'PASS' if g.passed else 'FAIL'}  {g.name}")
