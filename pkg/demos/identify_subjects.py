"""Re-identify subjects across two resting sessions of a synthetic cohort.

    python demos/identify_subjects.py [out_dir]
"""

import sys

import numpy as np

from connectome_id.connectome import group_from_time_series
from connectome_id.ingest import SynthConfig, generate_synthetic_cohort
from connectome_id.matcher import cross_similarity, match_subjects
from connectome_id.pipeline import render_heatmap
from connectome_id.sketch import leverage_scores, principal_features, restrict_features

out = sys.argv[1] if len(sys.argv) > 1 else "identify_demo.pgm"

cohort = generate_synthetic_cohort(SynthConfig(50, 60, 200, seed=7))
ref = group_from_time_series(cohort.scans(1, "rest"), cohort.session_order(1))
tgt = group_from_time_series(cohort.scans(2, "rest"), cohort.session_order(2))
print("group matrix:", ref.a.shape)  # features x subjects

prof = leverage_scores(ref)
print("rank", prof.rank, "sum of leverage", round(prof.scores.sum(), 6))

for t in (10, 30, 100, 300):
    sel = principal_features(ref, t)
    sim = cross_similarity(restrict_features(ref, sel), restrict_features(tgt, sel))
    res = match_subjects(sim, cohort.truth_array())
    print(f"t={t:4d}  accuracy {res.accuracy:.2f}  mean margin {np.mean(res.margin):.3f}")

# target columns are shuffled, so reorder them to put matches on the diagonal
sel = principal_features(ref, 100)
sim = cross_similarity(restrict_features(ref, sel), restrict_features(tgt, sel))
render_heatmap(sim.sim[:, cohort.truth_array()], out)
print("wrote", out)
