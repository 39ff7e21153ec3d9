"""Acceptance suite: one test per criterion, one printed pass/fail line each.

The heavy synthetic end-to-end gates (20k-episode trainings) share
module-scoped fixtures; the full module runs single-threaded in well under
30 minutes. Run with ``pytest tests/test_acceptance.py -v -s`` to see the
per-criterion lines.
"""

import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from sala import autodiff as ad
from sala import cli, core, data, models, training
from sala.autodiff import Tensor
from sala.core import RunMode, SelectionSchedule
from sala.data import EpisodeSpec
from sala.models import ModelPair
from sala.training import TrainConfig, derive_seed

REPO = Path(__file__).resolve().parent.parent


def report(name: str, ok: bool, detail: str = ""):
    print(f"\n{'PASS' if ok else 'FAIL'}  {name}" + (f": {detail}" if detail else ""))
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# shared synthetic datasets and trained models
# ---------------------------------------------------------------------------

MODEL = {"kind": "mlp", "in_dim": 8, "hidden": [32, 32], "out_dim": 16}


def gate_config(mode, distractors=0, eta=5.0, seed=0, episodes=20_000,
                eval_every=2_500, eval_episodes_val=100):
    return TrainConfig(
        model=MODEL,
        episode=EpisodeSpec(ways=5, shots=1, query=15, unlabeled_per_class=15,
                            distractors=distractors),
        mode=mode, eta=eta, reduction_ratio=4,
        total_episodes=episodes, eval_every=eval_every,
        eval_episodes_val=eval_episodes_val, test_episodes=1_000, seed=seed,
    )


@pytest.fixture(scope="module")
def hard_dataset():
    """100 isotropic clusters at separation/std = 3 in 8 dimensions."""
    return data.make_split(data.gen_synthetic(100, 8, 1.0, 3.0, 100, 0), 0.4, 0)


@pytest.fixture(scope="module")
def easy_dataset():
    """Same composition at separation/std = 20."""
    return data.make_split(data.gen_synthetic(100, 8, 1.0, 20.0, 100, 1), 0.4, 1)


def train_and_eval(config, dataset):
    result = training.train(config, dataset)
    trained = training.load_models(result.best_checkpoint)
    return training.evaluate(trained, dataset, config.test_spec, config.test_episodes,
                             config.test_schedule(), config.mode, seed=0)


@pytest.fixture(scope="module")
def sala_vs_supervised(hard_dataset):
    sup = train_and_eval(gate_config(RunMode.supervised()), hard_dataset)
    sala = train_and_eval(gate_config(RunMode.sala()), hard_dataset)
    return sala, sup


class TestGradientIntegrity:
    def test_full_episode_gradients_match_finite_differences(self, hard_dataset):
        t0 = time.time()
        pair = ModelPair(models.MlpNet(8, (16, 16), 16, seed=11),
                         models.SqueezeExciteNet(16, 4, seed=11))
        spec = EpisodeSpec(ways=5, shots=1, query=15, unlabeled_per_class=2, seed=77)
        sampled = data.sample_episode(hard_dataset, spec, "train")
        # eta=5, m0=10, t=0.6 -> floor(10 * exp(-0.8)) = 4 selected of 10 unlabeled
        schedule = SelectionSchedule(eta=5.0, m0=10, total_episodes=11)
        assert core.selection_count(schedule, 6) == 4

        def build():
            return core.run_episode(pair, sampled.episode, schedule, 6, RunMode.sala(),
                                    train=True).loss

        params = pair.parameters()
        ad.zero_grads(params)
        with ad.Tape():
            ad.backward(build())
        worst = 0.0
        n_checked = 0
        for p in params:
            num = oracles.finite_diff_grad(lambda: build().item(), p.data, h=1e-5)
            worst = max(worst, oracles.rel_err(p.grad, num))
            n_checked += p.data.size
        elapsed = time.time() - t0
        report("gradient integrity",
               worst < 1e-3 and elapsed < 60.0,
               f"{n_checked} parameter scalars, max rel err {worst:.2e}, {elapsed:.1f}s")


class TestMetricReduction:
    def test_unit_weights_reduce_to_euclidean_on_10k_pairs(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(10_000):
            d = rng.integers(2, 32)
            x, c = rng.normal(size=d), rng.normal(size=d)
            worst = max(worst, abs(core.adaptive_distance(x, c, np.ones(d))
                                   - core.euclidean_distance(x, c)))
        report("metric reduction oracle", worst < 1e-12,
               f"max |adaptive - euclidean| = {worst:.1e} over 10k pairs")


class TestSoftKMeansEquivalence:
    def test_tm_off_pns_off_matches_independent_soft_kmeans(self, hard_dataset):
        pair = ModelPair(models.MlpNet(8, (16, 16), 12, seed=5),
                         models.SqueezeExciteNet(12, 4, seed=5))
        schedule = SelectionSchedule(eta=5.0, m0=75, total_episodes=10)
        spec = EpisodeSpec(ways=5, shots=3, query=5, unlabeled_per_class=6)
        worst = 0.0
        for i in range(100):
            sampled = data.sample_episode(hard_dataset, spec.with_seed(derive_seed(4, i)),
                                          "train")
            ep = sampled.episode
            res = core.run_episode(pair, ep, schedule, 0, RunMode.soft_kmeans(),
                                   train=True)
            s_emb = pair.embed(Tensor(ep.support_x)).data
            u_emb = pair.embed(Tensor(ep.unlabeled_x)).data
            ref = oracles.soft_kmeans_step(s_emb, ep.support_y, u_emb, 5)
            worst = max(worst, float(np.max(np.abs(res.prototypes - ref))))
        report("soft k-means equivalence", worst < 1e-10,
               f"max prototype deviation {worst:.1e} over 100 episodes")


class TestScheduleProperties:
    def test_endpoint_monotonicity_and_frozen_value(self):
        s = SelectionSchedule(eta=5.0, m0=75, total_episodes=1_000)
        ok_end = s.weight(1.0) == 1.0
        counts = [core.selection_count(s, i) for i in range(1_000)]
        ok_mono = all(a <= b for a, b in zip(counts, counts[1:])) and counts[-1] == 75
        mid = SelectionSchedule(eta=5.0, m0=75, total_episodes=3)
        ok_value = core.selection_count(mid, 1) == 21  # t = 0.5
        report("schedule properties", ok_end and ok_mono and ok_value,
               f"w(1)={s.weight(1.0)}, n(t=0.5)={core.selection_count(mid, 1)}, "
               f"nondecreasing over 1000 indices: {ok_mono}")


class TestNormalization:
    def test_probability_vectors_sum_to_one_over_1000_episode_fuzz(self, hard_dataset):
        schedule = SelectionSchedule(eta=5.0, m0=9, total_episodes=10)
        spec = EpisodeSpec(ways=3, shots=1, query=3, unlabeled_per_class=3)
        worst = 0.0
        pair = None
        for i in range(1_000):
            if i % 100 == 0:
                pair = ModelPair(models.MlpNet(8, (8, 8), 6, seed=i),
                                 models.SqueezeExciteNet(6, 2, seed=i))
            sampled = data.sample_episode(hard_dataset, spec.with_seed(derive_seed(6, i)),
                                          "train")
            res = core.run_episode(pair, sampled.episode, schedule, i % 10,
                                   RunMode.sala(), train=True)
            rows = res.table.probabilities.data.sum(axis=1)
            worst = max(worst, float(np.max(np.abs(rows - 1.0))))
            for row in oracles.softmax_neg(res.table.distances):
                worst = max(worst, abs(float(row.sum()) - 1.0))
        report("probability normalization", worst < 1e-9,
               f"max |sum - 1| = {worst:.1e} across 1000 episodes")


class TestSyntheticEndToEnd:
    def test_a_supervised_on_separable_data(self, easy_dataset):
        rep = train_and_eval(gate_config(RunMode.supervised()), easy_dataset)
        report("synthetic gate (a): supervised at separation/std=20",
               rep.mean_acc >= 0.95, f"accuracy {rep.mean_acc:.4f}")

    def test_b_semi_supervised_beats_supervised_with_confidence(self, sala_vs_supervised):
        sala, sup = sala_vs_supervised
        diff = np.array(sala.accs) - np.array(sup.accs)
        lower = diff.mean() - 1.96 * diff.std(ddof=1) / np.sqrt(len(diff))
        report("synthetic gate (b): semi-supervised margin at separation/std=3",
               lower > 0.0,
               f"sala {sala.mean_acc:.4f} vs supervised {sup.mean_acc:.4f}, "
               f"paired 95% lower bound {lower:+.4f} over {len(diff)} shared episodes")

    def test_c_far_distractors_are_never_mislabeled_early(self):
        # distractor class means are >= 10 cluster widths from every mean
        far = data.make_split(data.gen_synthetic(50, 8, 1.0, 10.0, 60, 2), 0.4, 2)
        pair = ModelPair(models.identity_mlp(8), models.SqueezeExciteNet(8, 2, seed=0))
        spec = EpisodeSpec(ways=5, shots=1, query=5, unlabeled_per_class=15,
                           distractors=5)
        schedule = SelectionSchedule(eta=5.0, m0=75, total_episodes=1_000)
        checked = 0
        precisions = []
        for i in range(200):
            episode_index = (i * 3) % 300  # sweeps t over [0, 0.3) of 1000 episodes
            sampled = data.sample_episode(far, spec.with_seed(derive_seed(8, i)), "test")
            res = core.run_episode(pair, sampled.episode, schedule, episode_index,
                                   RunMode.sala(), train=True,
                                   hidden_truth=sampled.hidden_truth,
                                   class_ids=sampled.class_ids)
            assert not sampled.distractor_mask[res.selected].any()
            if res.metrics["pseudo_precision"] is not None:
                precisions.append(res.metrics["pseudo_precision"])
                checked += 1
        report("synthetic gate (c): distractor-safe early selection",
               checked > 100 and all(p == 1.0 for p in precisions),
               f"pseudo-label precision 1.0 on all {checked} episodes with n > 0")


class TestAblationStructure:
    def test_2x2_grid_direction(self, tmp_path):
        ds_dir = tmp_path / "ds"
        rc = cli.main(["gen-synth", "--classes", "100", "--dim", "8",
                       "--cluster-std", "1.0", "--separation", "3.0",
                       "--samples-per-class", "100", "--labeled-fraction", "0.4",
                       "--seed", "0", "--out", str(ds_dir)])
        assert rc == 0
        cfg = tmp_path / "config.json"
        cfg.write_text(json.dumps({
            "model": MODEL,
            "episode": {"ways": 5, "shots": 1, "query": 15,
                        "unlabeled_per_class": 15, "distractors": 5},
            "schedule": {"eta": 1.0},
            "reduction_ratio": 4,
            "train": {"total_episodes": 20_000, "eval_every": 2_500,
                      "eval_episodes_val": 100, "test_episodes": 1_000},
            "seed": 0,
        }))
        out = tmp_path / "ablation"
        rc = cli.main(["ablate", "--config", str(cfg), "--data", str(ds_dir),
                       "--out", str(out)])
        assert rc == 0
        lines = (out / "ablation.csv").read_text().splitlines()
        assert lines[1] == "tm,pns,mean_acc,ci95"
        rows = {(r[0], r[1]): float(r[2])
                for r in (line.split(",") for line in lines[2:])}
        ok_shape = set(rows) == {("0", "0"), ("0", "1"), ("1", "0"), ("1", "1")}
        baseline = rows[("0", "0")]
        full = rows[("1", "1")]
        report("ablation structure",
               ok_shape and full >= baseline,
               f"grid complete; tm+pns {full:.4f} >= baseline {baseline:.4f}")


class TestEvaluationProtocol:
    def test_1000_episode_reports_and_chance_level(self, hard_dataset):
        cfg = gate_config(RunMode.supervised())
        chance = training.build_models(cfg)
        for p in chance.parameters():
            p.data[...] = 0.0
        rep = training.evaluate(chance, hard_dataset, cfg.test_spec, 1_000,
                                cfg.test_schedule(), cfg.mode, seed=0)
        ok = (rep.episodes == 1_000
              and abs(rep.mean_acc - 0.20) <= max(rep.ci95, 1e-12)
              and rep.ci95 >= 0.0)
        report("evaluation protocol", ok,
               f"chance model {rep.mean_acc:.4f} +/- {rep.ci95:.4f} over {rep.episodes} episodes")


class TestConverterRoundTrip:
    """Secondary component: the image-folder converter feeds load_dataset."""

    CLI = REPO / "dataset_prep" / "dist" / "cli.js"

    @staticmethod
    def write_ppm(path: Path, size: int, seed: int):
        rng = np.random.default_rng(seed)
        pixels = rng.integers(0, 256, size=size * size * 3, dtype=np.uint8)
        path.write_bytes(f"P6\n{size} {size}\n255\n".encode() + pixels.tobytes())

    def test_toy_folder_round_trip(self, tmp_path):
        src = tmp_path / "toy"
        for c in range(3):
            d = src / f"class{c}"
            d.mkdir(parents=True)
            for i in range(5):
                self.write_ppm(d / f"img{i}.ppm", size=12, seed=c * 10 + i)
        out = tmp_path / "sdt"
        proc = subprocess.run(
            ["node", str(self.CLI), "convert", str(src), "--layout", "mini",
             "--size", "8", "--partition", "all-train", "--out", str(out)],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        ds = data.load_dataset(out)
        counts_ok = (ds.n_classes == 3
                     and all(arr.shape == (5, 3, 8, 8) for arr in ds.samples))
        range_ok = all(arr.min() >= 0.0 and arr.max() <= 1.0 for arr in ds.samples)
        report("converter round-trip", counts_ok and range_ok,
               f"3 classes x 5 samples of shape {ds.samples[0].shape[1:]}, "
               f"pixels within [0, 1]")

    def test_omniglot_scheme_partition_counts(self, tmp_path):
        classes = tmp_path / "classes.txt"
        classes.write_text("".join(f"glyph{i:04d}\n" for i in range(1623)))
        out = tmp_path / "partition.txt"
        proc = subprocess.run(
            ["node", str(self.CLI), "make-partition", "--classes", str(classes),
             "--scheme", "omniglot", "--out", str(out)],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        lines = [l.rsplit(" ", 1) for l in out.read_text().splitlines() if l.strip()]
        tallies = {"train": 0, "validation": 0, "test": 0}
        for _, part in lines:
            tallies[part] += 1
        report("omniglot partition scheme",
               tallies == {"train": 1200, "validation": 0, "test": 423},
               f"counts {tallies}")


class TestDeterminism:
    def test_identical_seed_and_config_give_identical_artifacts(self, hard_dataset,
                                                                 tmp_path):
        cfg = gate_config(RunMode.sala(), episodes=300, seed=4, eval_every=150,
                          eval_episodes_val=20)
        training.train(cfg, hard_dataset, out_dir=tmp_path / "a")
        training.train(cfg, hard_dataset, out_dir=tmp_path / "b")
        logs_equal = ((tmp_path / "a" / "metrics.jsonl").read_bytes()
                      == (tmp_path / "b" / "metrics.jsonl").read_bytes())
        ckpt_equal = ((tmp_path / "a" / "checkpoint.bin").read_bytes()
                      == (tmp_path / "b" / "checkpoint.bin").read_bytes())
        report("determinism", logs_equal and ckpt_equal,
               "metrics logs and checkpoints byte-identical across reruns")
