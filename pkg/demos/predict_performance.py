"""Predict a planted behavioral score from top-leverage connectome features."""

from connectome_id.ingest import SynthConfig, generate_synthetic_cohort
from connectome_id.regress import plant_performance, random_performance, run_performance_experiment

cohort = generate_synthetic_cohort(SynthConfig(100, 60, 30, n_tasks=7, signature_regions=15, seed=0))

planted, features = plant_performance(cohort, "wm", n_features=5, seed=0)
print("planted on features", features.tolist())

for t in (5, 30, 100):
    rep = run_performance_experiment(planted, "wm", t=t, repeats=20, seed=0)
    print(f"t={t:3d}  train {rep.train_nrmse_mean:5.2f}%  test {rep.test_nrmse_mean:5.2f}%")

# a score unrelated to the scans gives no better than guessing the mean
null = random_performance(cohort, "wm", seed=0)
rep = run_performance_experiment(null, "wm", t=5, repeats=20, seed=0)
print(f"null model test {rep.test_nrmse_mean:.2f}%")
