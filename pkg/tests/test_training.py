import json

import numpy as np
import pytest

import oracles
from sala import data, training
from sala.autodiff import Tensor
from sala.core import RunMode
from sala.data import EpisodeSpec
from sala.training import AdamState, TrainConfig, adam_step


def small_config(**overrides):
    base = dict(
        model={"kind": "mlp", "in_dim": 8, "hidden": [16, 16], "out_dim": 8},
        episode=EpisodeSpec(ways=5, shots=1, query=5, unlabeled_per_class=5),
        mode=RunMode.sala(),
        eta=5.0,
        reduction_ratio=2,
        total_episodes=40,
        eval_every=20,
        eval_episodes_val=10,
        test_episodes=20,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def synthetic_dataset(sep=12.0, std=1.0, n_classes=30, seed=0, samples=40):
    ds = data.gen_synthetic(n_classes, 8, std, sep, samples, seed)
    return data.make_split(ds, 0.4, seed)


class TestAdam:
    def test_zero_gradient_keeps_parameters_and_bumps_step(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True, name="p")
        state = AdamState([p])
        adam_step([p], state, lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert state.step == 1

    def test_first_step_matches_single_step_oracle(self):
        rng = np.random.default_rng(0)
        w0 = rng.normal(size=(3, 4))
        g = rng.normal(size=(3, 4))
        p = Tensor(w0.copy(), requires_grad=True, name="w")
        p.grad += g
        adam_step([p], AdamState([p]), lr=1e-3)
        expected = oracles.adam_single_step(w0, g, lr=1e-3)
        assert np.max(np.abs(p.data - expected)) < 1e-12
        np.testing.assert_array_equal(p.grad, 0.0)  # consumed

    def test_quadratic_convergence(self):
        # minimize (x - 3)^2 / 2, gradient x - 3
        p = Tensor(np.array([0.0]), requires_grad=True, name="x")
        state = AdamState([p])
        for _ in range(100):
            p.grad += p.data - 3.0
            adam_step([p], state, lr=0.1)
        assert abs(p.data[0] - 3.0) < 0.5

    def test_nan_gradient_names_parameter(self):
        p = Tensor(np.array([1.0]), requires_grad=True, name="embed.fc1.w")
        p.grad += np.nan
        with pytest.raises(FloatingPointError, match="embed.fc1.w"):
            adam_step([p], AdamState([p]), lr=0.1)


class TestTrainConfig:
    def test_round_trips_through_dict(self):
        cfg = small_config()
        again = TrainConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_unknown_keys_rejected(self):
        tree = small_config().to_dict()
        tree["learning_rat"] = 0.1
        with pytest.raises(ValueError, match="unknown config keys"):
            TrainConfig.from_dict(tree)
        tree = small_config().to_dict()
        tree["train"]["momentum"] = 0.9
        with pytest.raises(ValueError, match="unknown config keys"):
            TrainConfig.from_dict(tree)

    def test_mode_strings(self):
        tree = small_config().to_dict()
        tree["mode"] = "soft-kmeans"
        cfg = TrainConfig.from_dict(tree)
        assert cfg.mode == RunMode.soft_kmeans()

    def test_eval_cadence_validated(self):
        with pytest.raises(ValueError, match="eval_every"):
            small_config(total_episodes=10, eval_every=20)

    def test_default_m0_rule(self):
        cfg = small_config(episode=EpisodeSpec(5, 1, 5, 15))
        assert cfg.schedule().m0 == 75
        cfg = small_config(episode=EpisodeSpec(5, 1, 5, 15, distractors=5))
        assert cfg.schedule().m0 == 75  # (5+5)*15 // 2

    def test_m0_override(self):
        cfg = small_config(m0=10)
        assert cfg.schedule().m0 == 10


class TestTrain:
    def test_zero_episodes_returns_initial_parameters_and_empty_log(self):
        cfg = small_config(total_episodes=0, eval_every=1)
        ds = synthetic_dataset()
        result = training.train(cfg, ds)
        assert result.log == []
        fresh = training.build_models(cfg)
        loaded = training.load_models(result.best_checkpoint)
        for a, b in zip(fresh.parameters(), loaded.parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_seeded_runs_are_byte_identical(self, tmp_path):
        ds = synthetic_dataset()
        cfg = small_config(total_episodes=30, eval_every=15, eval_episodes_val=5)
        training.train(cfg, ds, out_dir=tmp_path / "a")
        training.train(cfg, ds, out_dir=tmp_path / "b")
        assert ((tmp_path / "a" / "metrics.jsonl").read_bytes()
                == (tmp_path / "b" / "metrics.jsonl").read_bytes())
        assert ((tmp_path / "a" / "checkpoint.bin").read_bytes()
                == (tmp_path / "b" / "checkpoint.bin").read_bytes())

    def test_metrics_file_embeds_config_and_episode_records(self, tmp_path):
        ds = synthetic_dataset()
        cfg = small_config(total_episodes=10, eval_every=5, eval_episodes_val=4)
        result = training.train(cfg, ds, out_dir=tmp_path)
        lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert lines[0] == {"config": cfg.to_dict()}
        episode_recs = [l for l in lines[1:] if "val_acc" not in l]
        val_recs = [l for l in lines[1:] if "val_acc" in l]
        assert len(episode_recs) == 10
        assert len(val_recs) == 2
        assert result.best_val_acc == max(v["val_acc"] for v in val_recs)

    def test_best_checkpoint_beats_every_validation_record(self):
        ds = synthetic_dataset(sep=4.0)
        cfg = small_config(total_episodes=60, eval_every=15, eval_episodes_val=8, seed=3)
        result = training.train(cfg, ds)
        val_accs = [r["val_acc"] for r in result.log if "val_acc" in r]
        assert result.best_val_acc >= max(val_accs)

    def test_short_run_on_separable_data_reaches_95_percent(self):
        ds = synthetic_dataset(sep=20.0, std=1.0)
        cfg = small_config(total_episodes=2_000, eval_every=500, eval_episodes_val=50,
                           mode=RunMode.supervised(), seed=1)
        result = training.train(cfg, ds)
        assert result.best_val_acc >= 0.95

    def test_loss_trend_decreases(self):
        ds = synthetic_dataset(sep=10.0, std=1.0)
        cfg = small_config(total_episodes=1_500, eval_every=1_500, eval_episodes_val=5,
                           mode=RunMode.supervised(), seed=2)
        result = training.train(cfg, ds)
        n_query = 5 * cfg.episode.query
        per_query = [r["loss"] / n_query for r in result.log if "loss" in r]
        decile = len(per_query) // 10
        assert np.mean(per_query[-decile:]) < np.mean(per_query[:decile])
        assert np.mean(per_query[-decile:]) < 0.1 * np.log(5)


class TestEvaluate:
    def test_chance_level_model_scores_exactly_one_fifth(self):
        ds = synthetic_dataset()
        cfg = small_config(mode=RunMode.supervised())
        models_ = training.build_models(cfg)
        for p in models_.parameters():
            p.data[...] = 0.0  # every embedding collapses to the origin
        report = training.evaluate(models_, ds, cfg.test_spec, episodes=50,
                                   schedule=cfg.test_schedule(), mode=cfg.mode, seed=0)
        assert report.mean_acc == pytest.approx(0.2, abs=1e-12)
        assert report.episodes == 50

    def test_same_checkpoint_and_seed_give_identical_reports(self):
        ds = synthetic_dataset()
        cfg = small_config(total_episodes=10, eval_every=10, eval_episodes_val=4)
        result = training.train(cfg, ds)
        models_ = training.load_models(result.best_checkpoint)
        r1 = training.evaluate(models_, ds, cfg.test_spec, 30, cfg.test_schedule(),
                               cfg.mode, seed=5)
        models_2 = training.load_models(result.best_checkpoint)
        r2 = training.evaluate(models_2, ds, cfg.test_spec, 30, cfg.test_schedule(),
                               cfg.mode, seed=5)
        assert r1 == r2

    def test_ci_halves_when_episodes_quadruple(self):
        ds = synthetic_dataset(sep=3.0, std=1.0)
        cfg = small_config(seed=9)
        models_ = training.build_models(cfg)  # untrained: noisy accuracies
        small = training.evaluate(models_, ds, cfg.test_spec, 200, cfg.test_schedule(),
                                  cfg.mode, seed=1)
        big = training.evaluate(models_, ds, cfg.test_spec, 800, cfg.test_schedule(),
                                cfg.mode, seed=1)
        assert small.ci95 > 0
        ratio = small.ci95 / big.ci95
        assert abs(ratio - 2.0) < 0.2

    def test_ci_formula(self):
        ds = synthetic_dataset()
        cfg = small_config()
        models_ = training.build_models(cfg)
        rep = training.evaluate(models_, ds, cfg.test_spec, 40, cfg.test_schedule(),
                                cfg.mode, seed=2)
        sd = np.std(rep.accs, ddof=1)
        assert rep.ci95 == pytest.approx(1.96 * sd / np.sqrt(40))
