"""Adam optimization, the episodic training loop, and the evaluation protocol.

Training runs one episode at a time: sample, forward, backward, Adam step.
Every ``eval_every`` episodes the model is scored on validation episodes
(with the selection schedule frozen at the current training progress) and the
best-scoring parameters are retained. Evaluation reports mean query accuracy
over a fixed number of test episodes with a normal-approximation 95%
confidence interval, always at full selection (t = 1) and with batchnorm in
eval mode. Given the same seed and config, training is bitwise reproducible.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import RunMode, SelectionSchedule, default_m0, run_episode
from .data import Dataset, EpisodeSpec, sample_episode
from .models import (
    ConvNet4,
    MlpNet,
    ModelPair,
    SqueezeExciteNet,
    load_checkpoint,
    parse_checkpoint,
)

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_step",
    "TrainResult",
    "EvalReport",
    "train",
    "evaluate",
    "build_models",
    "load_models",
    "derive_seed",
]

METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "checkpoint.bin"

# seed stream tags, so sampling streams never collide
_STREAM_INIT = 0
_STREAM_TRAIN = 1
_STREAM_VAL = 2
_STREAM_TEST = 3


def derive_seed(*key: int) -> int:
    """Stable 32-bit seed derived from a tuple of integers."""
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs; serializes to/from a plain JSON tree."""

    model: dict
    episode: EpisodeSpec
    episode_val: EpisodeSpec | None = None
    episode_test: EpisodeSpec | None = None
    mode: RunMode = field(default_factory=RunMode.sala)
    eta: float = 5.0
    m0: int | None = None
    reduction_ratio: int = 4
    learning_rate: float = 1e-3
    total_episodes: int = 20_000
    eval_every: int = 2_500
    eval_episodes_val: int = 200
    test_episodes: int = 1_000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.total_episodes < 0:
            raise ValueError(f"total_episodes must be >= 0, got {self.total_episodes}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.total_episodes and self.eval_every > self.total_episodes:
            raise ValueError(
                f"eval_every ({self.eval_every}) exceeds total_episodes ({self.total_episodes})"
            )
        for name in ("learning_rate", "beta1", "beta2", "adam_eps", "eta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def val_spec(self) -> EpisodeSpec:
        return self.episode_val or self.episode

    @property
    def test_spec(self) -> EpisodeSpec:
        return self.episode_test or self.episode

    def schedule(self) -> SelectionSchedule:
        m0 = self.m0 if self.m0 is not None else default_m0(self.episode)
        return SelectionSchedule(eta=self.eta, m0=m0,
                                 total_episodes=max(self.total_episodes, 1))

    def test_schedule(self) -> SelectionSchedule:
        m0 = self.m0 if self.m0 is not None else default_m0(self.test_spec)
        return SelectionSchedule(eta=self.eta, m0=m0,
                                 total_episodes=max(self.total_episodes, 1))

    def to_dict(self) -> dict:
        def spec_dict(s: EpisodeSpec | None):
            if s is None:
                return None
            return {"ways": s.ways, "shots": s.shots, "query": s.query,
                    "unlabeled_per_class": s.unlabeled_per_class,
                    "distractors": s.distractors}

        return {
            "seed": self.seed,
            "mode": {"tm": self.mode.use_task_metric,
                     "pns": self.mode.use_progressive_selection,
                     "unlabeled": self.mode.use_unlabeled},
            "model": dict(self.model),
            "reduction_ratio": self.reduction_ratio,
            "schedule": {"eta": self.eta, "m0": self.m0},
            "episode": spec_dict(self.episode),
            "episode_val": spec_dict(self.episode_val),
            "episode_test": spec_dict(self.episode_test),
            "train": {
                "learning_rate": self.learning_rate,
                "total_episodes": self.total_episodes,
                "eval_every": self.eval_every,
                "eval_episodes_val": self.eval_episodes_val,
                "test_episodes": self.test_episodes,
                "beta1": self.beta1,
                "beta2": self.beta2,
                "adam_eps": self.adam_eps,
            },
        }

    @classmethod
    def from_dict(cls, tree: dict) -> "TrainConfig":
        def reject_unknown(d: dict, allowed, where: str):
            unknown = set(d) - set(allowed)
            if unknown:
                raise ValueError(f"unknown config keys in {where}: {sorted(unknown)}")

        reject_unknown(tree, {"seed", "mode", "model", "reduction_ratio", "schedule",
                              "episode", "episode_val", "episode_test", "train"},
                       "config root")

        def parse_spec(d, where):
            if d is None:
                return None
            reject_unknown(d, {"ways", "shots", "query", "unlabeled_per_class",
                               "distractors"}, where)
            return EpisodeSpec(ways=d["ways"], shots=d["shots"], query=d["query"],
                               unlabeled_per_class=d["unlabeled_per_class"],
                               distractors=d.get("distractors", 0))

        mode = tree.get("mode", {"tm": True, "pns": True, "unlabeled": True})
        if isinstance(mode, str):
            mode = {"sala": RunMode.sala(), "soft-kmeans": RunMode.soft_kmeans(),
                    "supervised": RunMode.supervised()}[mode]
        else:
            reject_unknown(mode, {"tm", "pns", "unlabeled"}, "mode")
            mode = RunMode(use_task_metric=mode.get("tm", True),
                           use_progressive_selection=mode.get("pns", True),
                           use_unlabeled=mode.get("unlabeled", True))

        sched = tree.get("schedule", {})
        reject_unknown(sched, {"eta", "m0"}, "schedule")
        tr = tree.get("train", {})
        reject_unknown(tr, {"learning_rate", "total_episodes", "eval_every",
                            "eval_episodes_val", "test_episodes", "beta1", "beta2",
                            "adam_eps"}, "train")

        return cls(
            model=dict(tree["model"]),
            episode=parse_spec(tree["episode"], "episode"),
            episode_val=parse_spec(tree.get("episode_val"), "episode_val"),
            episode_test=parse_spec(tree.get("episode_test"), "episode_test"),
            mode=mode,
            eta=sched.get("eta", 5.0),
            m0=sched.get("m0"),
            reduction_ratio=tree.get("reduction_ratio", 4),
            learning_rate=tr.get("learning_rate", 1e-3),
            total_episodes=tr.get("total_episodes", 20_000),
            eval_every=tr.get("eval_every", 2_500),
            eval_episodes_val=tr.get("eval_episodes_val", 200),
            test_episodes=tr.get("test_episodes", 1_000),
            beta1=tr.get("beta1", 0.9),
            beta2=tr.get("beta2", 0.999),
            adam_eps=tr.get("adam_eps", 1e-8),
            seed=tree.get("seed", 0),
        )


def build_models(config: TrainConfig) -> ModelPair:
    spec = dict(config.model)
    kind = spec.pop("kind")
    if kind == "mlp":
        net = MlpNet(in_dim=spec["in_dim"], hidden=tuple(spec["hidden"]),
                     out_dim=spec["out_dim"], seed=config.seed)
    elif kind == "convnet4":
        net = ConvNet4(in_shape=tuple(spec["in_shape"]), seed=config.seed,
                       bn_eps=spec.get("bn_eps", 1e-5),
                       bn_momentum=spec.get("bn_momentum", 0.9))
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    se = SqueezeExciteNet(net.output_dim, config.reduction_ratio, seed=config.seed)
    return ModelPair(net, se)


def load_models(source) -> ModelPair:
    """Rebuild a model pair from a checkpoint file path or raw bytes."""
    if isinstance(source, (bytes, bytearray)):
        echo, named = parse_checkpoint(bytes(source))
    else:
        echo, named = load_checkpoint(source)
    mconf = echo["model"]
    emb = mconf["embedding"]
    if emb["kind"] == "mlp":
        net = MlpNet(emb["in_dim"], tuple(emb["hidden"]), emb["out_dim"], seed=0)
    elif emb["kind"] == "convnet4":
        net = ConvNet4(tuple(emb["in_shape"]), seed=0, bn_eps=emb["bn_eps"],
                       bn_momentum=emb["bn_momentum"])
    else:
        raise ValueError(f"unknown model kind {emb['kind']!r} in checkpoint")
    se = SqueezeExciteNet(mconf["se"]["dim"], mconf["se"]["reduction_ratio"], seed=0)
    pair = ModelPair(net, se)
    pair.load_state_arrays(named)
    return pair


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment buffers per parameter, plus the shared step count."""

    def __init__(self, params: list[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step = 0


def adam_step(params: list[Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; gradients are consumed and zeroed."""
    state.step += 1
    t = state.step
    for i, p in enumerate(params):
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        mhat = state.m[i] / (1.0 - beta1 ** t)
        vhat = state.v[i] / (1.0 - beta2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
        p.grad[...] = 0.0


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    log: list[dict]
    best_checkpoint: bytes
    best_val_acc: float | None
    best_episode: int
    metrics_path: Path | None = None
    checkpoint_path: Path | None = None


def _run_eval_episodes(models: ModelPair, dataset: Dataset, spec: EpisodeSpec,
                       partition: str, episodes: int, schedule: SelectionSchedule,
                       episode_index: int, mode: RunMode, seed_key: tuple) -> list[dict]:
    out = []
    for i in range(episodes):
        s = sample_episode(dataset, spec.with_seed(derive_seed(*seed_key, i)), partition)
        res = run_episode(models, s.episode, schedule, episode_index, mode, train=False,
                          hidden_truth=s.hidden_truth, class_ids=s.class_ids)
        out.append(res.metrics)
    return out


def train(config: TrainConfig, dataset: Dataset, out_dir=None) -> TrainResult:
    """Run the episodic loop, retaining the best-validation checkpoint.

    The returned log holds one record per training episode plus a
    ``{"episode", "val_acc"}`` record per validation round. With ``out_dir``
    set, the log is written as JSON lines (first line: the config echo)
    alongside the best checkpoint.
    """
    models = build_models(config)
    params = models.parameters()
    adam = AdamState(params)
    schedule = config.schedule()
    echo = config.to_dict()
    log: list[dict] = []

    best_blob: bytes | None = None
    best_acc: float | None = None
    best_episode = 0

    for e in range(config.total_episodes):
        spec = config.episode.with_seed(derive_seed(config.seed, _STREAM_TRAIN, e))
        sampled = sample_episode(dataset, spec, "train")
        with ad.Tape():
            res = run_episode(models, sampled.episode, schedule, e, config.mode,
                              train=True, hidden_truth=sampled.hidden_truth,
                              class_ids=sampled.class_ids)
            if not np.isfinite(res.loss.data):
                raise FloatingPointError(f"non-finite loss at episode {e}")
            ad.backward(res.loss)
        adam_step(params, adam, config.learning_rate, config.beta1, config.beta2,
                  config.adam_eps)
        log.append({"episode": e, **res.metrics})

        if (e + 1) % config.eval_every == 0:
            recs = _run_eval_episodes(models, dataset, config.val_spec, "validation",
                                      config.eval_episodes_val, schedule, e, config.mode,
                                      seed_key=(config.seed, _STREAM_VAL, e))
            val_acc = float(np.mean([r["query_acc"] for r in recs]))
            log.append({"episode": e, "val_acc": val_acc})
            if best_acc is None or val_acc > best_acc:
                best_acc = val_acc
                best_episode = e
                best_blob = models.serialize({"config": echo})

    if best_blob is None:
        best_blob = models.serialize({"config": echo})
        best_episode = max(config.total_episodes - 1, 0)

    result = TrainResult(log=log, best_checkpoint=best_blob, best_val_acc=best_acc,
                         best_episode=best_episode)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / METRICS_FILE
        with open(metrics_path, "w") as f:
            f.write(json.dumps({"config": echo}) + "\n")
            for rec in log:
                f.write(json.dumps(rec) + "\n")
        ckpt_path = out_dir / CHECKPOINT_FILE
        ckpt_path.write_bytes(best_blob)
        result.metrics_path = metrics_path
        result.checkpoint_path = ckpt_path
    return result


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    mean_acc: float
    ci95: float
    episodes: int
    accs: list[float]
    mean_pseudo_precision: float | None

    def to_dict(self, config_echo=None, checkpoint_hash=None) -> dict:
        out = {"mean_acc": self.mean_acc, "ci95": self.ci95, "episodes": self.episodes}
        if config_echo is not None:
            out["config_echo"] = config_echo
        if checkpoint_hash is not None:
            out["checkpoint_hash"] = checkpoint_hash
        return out


def checkpoint_hash(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def evaluate(models: ModelPair, dataset: Dataset, spec: EpisodeSpec, episodes: int,
             schedule: SelectionSchedule, mode: RunMode, seed: int,
             partition: str = "test") -> EvalReport:
    """Score ``episodes`` freshly sampled test episodes at full selection (t=1).

    Deterministic for a given seed; the confidence interval is the normal
    approximation 1.96 * sd / sqrt(episodes).
    """
    recs = _run_eval_episodes(models, dataset, spec, partition, episodes, schedule,
                              schedule.total_episodes - 1, mode,
                              seed_key=(seed, _STREAM_TEST))
    accs = [r["query_acc"] for r in recs]
    mean = float(np.mean(accs))
    sd = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
    ci = 1.96 * sd / np.sqrt(len(accs))
    prec = [r["pseudo_precision"] for r in recs if r["pseudo_precision"] is not None]
    return EvalReport(mean_acc=mean, ci95=float(ci), episodes=len(accs), accs=accs,
                      mean_pseudo_precision=float(np.mean(prec)) if prec else None)
