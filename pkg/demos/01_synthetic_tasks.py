"""Generate one sample per task and save the image next to its target overlay.

    python demos/01_synthetic_tasks.py OUT_DIR

For every task the script prints the instruction, the answer, the supervised
patches, and the anchor position, then writes ``<task>.png`` (the raw image)
and ``<task>-gt.png`` (the target map blended over it).
"""

import sys
from pathlib import Path

import numpy as np

from klal import vocab
from klal.dataset import ForgeConfig, make_gridpatch_sample, make_intersection_sample, make_tracing_sample, label_of
from klal.geometry import gen_graph
from klal.viz import HeatmapSpec, heatmap_values, render_overlay, save_image

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out")
out.mkdir(parents=True, exist_ok=True)
grid = ForgeConfig().grid

g = gen_graph(4)
u, v = g.edges[0]
samples = {
    "intersection": make_intersection_sample(seed=4, count=2),
    "tracing": make_tracing_sample(4, (g.nodes[u].label, g.nodes[v].label)),
    "gridpatch": make_gridpatch_sample(seed=4),
}

for task, s in samples.items():
    lay = s.layout
    print(f"[{task}]")
    print("  question:", " ".join(vocab.decode(lay.instruction)))
    print("  answer:  ", " ".join(vocab.decode(lay.content_answer)), "->", label_of(s))
    print("  targets: ", list(s.targets))
    print(f"  sequence length {len(lay)}, visual tokens {lay.visual_start}..{lay.visual_end - 1}, anchor row {lay.anchor}")
    gt = s.gt_array()
    print(f"  target map: sum {gt.sum():.9f}, peak {gt.max():.4f} at patch {int(np.argmax(gt))}, floor {gt.min():.5f}")
    save_image(s.image, out / f"{task}.png")
    overlay = render_overlay(s.image, heatmap_values(None, s, HeatmapSpec("gt-map")), grid, HeatmapSpec("gt-map", alpha=0.55))
    save_image(overlay, out / f"{task}-gt.png")

print("images written to", out)
