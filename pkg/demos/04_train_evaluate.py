"""Short end-to-end training runs: supervised baseline vs. the full method.

Uses a deliberately small episode budget so the demo finishes in under a
minute; accuracy numbers are indicative, not converged.
"""

import numpy as np

from sala import data, training
from sala.core import RunMode
from sala.data import EpisodeSpec
from sala.training import TrainConfig

dataset = data.make_split(
    data.gen_synthetic(100, 8, 1.0, 3.0, 100, seed=0), 0.4, seed=0)

def config(mode):
    return TrainConfig(
        model={"kind": "mlp", "in_dim": 8, "hidden": [32, 32], "out_dim": 16},
        episode=EpisodeSpec(ways=5, shots=1, query=15, unlabeled_per_class=15),
        mode=mode,
        total_episodes=3000, eval_every=1000, eval_episodes_val=50,
        test_episodes=300, seed=0,
    )

for name, mode in [("supervised", RunMode.supervised()),
                   ("soft k-means", RunMode.soft_kmeans()),
                   ("full method", RunMode.sala())]:
    cfg = config(mode)
    result = training.train(cfg, dataset)
    trained = training.load_models(result.best_checkpoint)
    report = training.evaluate(trained, dataset, cfg.test_spec, cfg.test_episodes,
                               cfg.test_schedule(), cfg.mode, seed=0)
    print(f"{name:>12}: best val {result.best_val_acc:.4f}  "
          f"test {report.mean_acc:.4f} +/- {report.ci95:.4f}")
