# Weak supervision on the 8x8 digits: 100 labels plus 5000 "same class or not" pairs.

from mlsn.data import load_digits_dataset
from mlsn.trainer import SplitSpec, TrainConfig, make_split, make_weak_pairs, method_config, train, evaluate

ds = load_digits_dataset()
spec = SplitSpec(ds, n_labeled=100, test_fraction=0.2, n_weak_pairs=5000)
split = make_split(spec, seed=0)
pairs = make_weak_pairs(spec, split, seed=0)
print("weak pairs:", len(pairs), "same-class fraction", pairs.pairs[:, 2].mean().round(3))

cfg = TrainConfig(epochs=30, learning_rate=0.05, noise_sigma=0.3, lambda1_max=10.0,
                  lambda2_max=1.0, lambda3_max=0.03)

base = train(method_config(cfg, "supervised"), split)
weak = train(cfg, split, weak_pairs=pairs)
print("labels only   ", evaluate(base.teacher, split.test))
print("+ weak pairs  ", evaluate(weak.teacher, split.test))
