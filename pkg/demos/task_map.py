"""t-SNE map of every scan in one session, colored by condition.

    python demos/task_map.py [out.svg]
"""

import sys

import numpy as np

from connectome_id.connectome import group_from_time_series
from connectome_id.ingest import SynthConfig, generate_synthetic_cohort
from connectome_id.pipeline import render_scatter_svg
from connectome_id.tsne import TsneParams, nn_classify, tsne_embed

out = sys.argv[1] if len(sys.argv) > 1 else "task_map.svg"

cohort = generate_synthetic_cohort(SynthConfig(30, 40, 100, n_tasks=4, task_strength=2.0, seed=1))
blocks, labels = [], []
for task in cohort.tasks:
    gm = group_from_time_series(cohort.scans(1, task), cohort.session_order(1))
    blocks.append(gm.a.T)
    labels += [task] * gm.n_columns
x, labels = np.vstack(blocks), np.array(labels)

emb = tsne_embed(x, TsneParams(perplexity=20, seed=0))
print(f"KL {emb.kl_trace[0]:.3f} -> {emb.final_kl:.3f}")

# label every other scan, predict the rest
idx = np.arange(len(labels))
known, unknown = idx[::2], idx[1::2]
pred = nn_classify(emb, known, labels[known], unknown)
print("nearest-neighbor accuracy", np.mean(pred == labels[unknown]))

render_scatter_svg(emb.y, list(labels), out)
print("wrote", out)
