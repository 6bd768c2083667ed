"""Watch the attention term pull a fresh model's focus onto the target patches.

    python demos/02_attention_supervision.py OUT_DIR

A small model is trained for a few dozen steps on the intersection task with
a heavy attention weight.  Before and after, the script reports the two loss
terms and the attention ratio (mean attention on target patches over mean
attention on all patches; 1.0 means no preference), and saves the
anchor-row attention overlays for one held-out sample.
"""

import sys
from pathlib import Path

from klal.dataset import ForgeConfig, make_dataset
from klal.supervision import Batch, total_loss
from klal.train import TrainConfig, attention_ratio, train
from klal import tensor as T
from klal.viz import HeatmapSpec, heatmap_values, render_overlay, save_image

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out")
out.mkdir(parents=True, exist_ok=True)
grid = ForgeConfig().grid

train_set = make_dataset("intersection", 64, seed=1)
held_out = make_dataset("intersection", 32, seed=1, offset=64)
cfg = TrainConfig(regime="ntp+klal", lam=4.0, steps=60, batch_size=8, layers=2, heads=2, d_model=32, lr=3e-3, warmup=5)


def losses(model):
    batch = Batch.from_samples(held_out[:8])
    with T.no_grad():
        _, parts = total_loss(model.forward(batch.inputs, batch.images, batch.visual_start), batch, cfg.lam)
    return parts


res = train(cfg, train_set)
sample = held_out[0]
spec = HeatmapSpec("attention", alpha=0.6)
for name, model in (("before", res.init), ("after", res.model)):
    parts = losses(model)
    ratio = attention_ratio(model, held_out)
    print(f"{name:>6}: ntp {parts.ntp:.3f}  klal {parts.klal:.3f}  attention ratio {ratio.mean:.3f}"
          f"  (per layer {', '.join(f'{x:.3f}' for x in ratio.per_layer_mean)})")
    save_image(render_overlay(sample.image, heatmap_values(model, sample, spec), grid, spec), out / f"attention-{name}.png")

save_image(render_overlay(sample.image, sample.gt_array(), grid, spec), out / "attention-target.png")
print("overlays written to", out)
