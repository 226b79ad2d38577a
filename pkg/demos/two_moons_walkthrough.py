# Two interleaving half circles, six labels, ~800 unlabeled points.
# Train the three methods on the same split and seed, then dump features for plotting.

from dataclasses import replace

import numpy as np

from mlsn.data import gen_two_moons, split_ssl, standardize
from mlsn.trainer import TrainConfig, evaluate, export_features, method_config, train, write_feature_csvs

ds = gen_two_moons(1000, 0.15, np.random.default_rng(123))
split = standardize(split_ssl(ds, 6, 0.2, True, np.random.default_rng(4)))
print(len(split.labeled), "labeled /", len(split.unlabeled), "unlabeled /", len(split.test), "test")

# Wider input noise and a heavier consistency weight than the defaults suit this toy problem.
cfg = TrainConfig(epochs=40, noise_sigma=0.3, lambda1_max=10.0, lambda3_max=1.0, seed=4)

results = {}
for method in ("supervised", "mt", "mlsn"):
    res = train(method_config(cfg, method), split)
    results[method] = res
    print(f"{method:>10}: test error {evaluate(res.teacher, split.test):.3f}")

# Per-epoch losses; total always equals l_c + sum(lambda_i * l_i).
for row in results["mlsn"].metrics[::10]:
    print(row.epoch, round(row.l_c, 4), round(row.l_t, 4), round(row.l_s, 4), round(row.l_sc, 4))

export = export_features(results["mlsn"].student, split.test)
write_feature_csvs(export, "moons_pca.csv", "moons_features.csv")
print("wrote moons_pca.csv and moons_features.csv")

# Same run with the similarity branch off: the labeled/unlabeled batches are identical.
quiet = train(replace(cfg, enable_similarity=False, epochs=2), split)
print("similarity column without the branch:", [float(r.l_s) for r in quiet.metrics])
