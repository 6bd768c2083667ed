"""Paired NTP vs NTP+KLAL comparison on the intersection task.

    python demos/03_regime_comparison.py OUT_DIR [STEPS]

Both regimes start from the same initialisation for each seed and see the
same batches, so the only difference is the attention term.  The default
step count keeps the demo to a few minutes on one core with a reduced model;
the full-size run lives in the acceptance suite (and ``klal report``).
"""

import sys
from pathlib import Path

import numpy as np

from klal.dataset import make_dataset
from klal.train import REGIMES, TrainConfig, compare_regimes

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out")
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 400

train_set = make_dataset("intersection", 400, seed=0)
test_set = make_dataset("intersection", 200, seed=0, offset=400)
cfg = TrainConfig(steps=steps, layers=2, heads=4, d_model=64, lr=1e-3, warmup=50, checkpoint_dir=str(out))

comp = compare_regimes(cfg, seeds=[0, 1, 2], train_set=train_set, test_set=test_set)
(out / "comparison.txt").write_text(comp.to_text())

print(f"{'regime':<10}{'seed':>5}{'accuracy':>10}{'attn ratio':>12}{'norm ratio':>12}")
for regime in REGIMES:
    for run in comp.by(regime):
        s = run.report.summary()
        print(f"{regime:<10}{run.seed:>5}{s['accuracy.intersection']:>10.3f}{s['attention_ratio.mean']:>12.3f}{s['embedding_norm_ratio']:>12.3f}")
d = comp.deltas("accuracy.intersection")
print(f"accuracy gain from the attention term: {100 * d.mean():+.1f} pp (sd {100 * d.std():.1f})")
print("confusion (truth.prediction -> count) for NTP+KLAL seed 0:")
conf = comp.by("ntp+klal")[0].report.confusion
print("  " + ", ".join(f"{t}.{p}:{c}" for (t, p), c in sorted(conf.items())))
