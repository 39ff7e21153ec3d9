"""One episode, step by step.

Walks the full per-episode pipeline by hand: embed, prototype, generate
task weights, pseudo-label, select progressively, refine, and score.
"""

import numpy as np

from sala import autodiff as ad
from sala import core, data, models
from sala.autodiff import Tensor
from sala.core import RunMode, SelectionSchedule
from sala.data import EpisodeSpec

dataset = data.make_split(
    data.gen_synthetic(40, 8, 1.0, 4.0, 50, seed=7), 0.4, seed=7)
spec = EpisodeSpec(ways=5, shots=1, query=15, unlabeled_per_class=15, seed=3)
sampled = data.sample_episode(dataset, spec, "train")
ep = sampled.episode

pair = models.ModelPair(models.MlpNet(8, (32, 32), 16, seed=1),
                        models.SqueezeExciteNet(16, 4, seed=1))

with ad.Tape():
    # 1. embed support, unlabeled, and queries
    s_emb = pair.embed(Tensor(ep.support_x))
    u_emb = pair.embed(Tensor(ep.unlabeled_x))
    q_emb = pair.embed(Tensor(ep.query_x))

    # 2. class prototypes from the support set
    protos = models.compute_prototypes(s_emb, ep.support_y, 5)
    print(f"prototypes: {protos.centers.shape}, counts {protos.counts}")

    # 3. per-class metric weights from the squeeze-excite generator
    weights = models.generate_task_weights(pair.se, protos)
    print(f"task weights in ({weights.data.min():.3f}, {weights.data.max():.3f})")

    # 4. pseudo-label the unlabeled pool under the task-adaptive metric
    table = core.pseudo_label(protos, weights, u_emb, RunMode.sala())
    print(f"pseudo-label table: best distances "
          f"{table.best_distance.min():.2f}..{table.best_distance.max():.2f}")

    # 5. progressive selection: how many to trust depends on training progress
    schedule = SelectionSchedule(eta=5.0, m0=75, total_episodes=1000)
    for idx in (0, 500, 999):
        print(f"  episode {idx}: keep n={core.selection_count(schedule, idx)} of 75")
    selected = core.select_top_n(table, core.selection_count(schedule, 500))

    # 6. fold the selected samples into the prototypes
    refined = core.refine_prototypes(protos, s_emb, ep.support_y, table,
                                     selected, u_emb)
    moved = np.linalg.norm(refined.centers.data - protos.centers.data, axis=1)
    print(f"prototype movement after refinement: {np.round(moved, 3)}")

    # 7. score the queries against the refined prototypes
    loss = core.episode_loss(refined, weights, q_emb, ep.query_y, RunMode.sala())
    print(f"episode loss: {float(loss.data):.3f}")
    ad.backward(loss)

grads = [np.abs(p.grad).max() for p in pair.parameters()]
print(f"max |grad| over {len(grads)} parameter tensors: {max(grads):.4f}")

# or simply run the whole thing in one call
res = core.run_episode(pair, ep, schedule, 500, RunMode.sala(),
                       hidden_truth=sampled.hidden_truth,
                       class_ids=sampled.class_ids)
print(f"\nrun_episode metrics: {res.metrics}")
