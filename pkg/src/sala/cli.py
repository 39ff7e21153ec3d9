"""Command-line entry point: dataset generation, training, evaluation, and
the 2x2 ablation sweep.

Every flag overrides the matching config-file entry; every artifact written
embeds the merged config (and therefore the seed) so it can be regenerated
from its own header. All output lands inside the ``--out`` directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .core import RunMode
from .data import gen_synthetic, load_dataset, make_split, save_dataset
from .models import parse_checkpoint
from .training import (
    TrainConfig,
    checkpoint_hash,
    evaluate,
    load_models,
    train,
)

CURVE_FILE = "curve.csv"
REPORT_FILE = "report.json"
ABLATION_FILE = "ablation.csv"

MODE_NAMES = ("sala", "soft-kmeans", "supervised")


def _add_episode_flags(p: argparse.ArgumentParser):
    p.add_argument("--ways", type=int, help="classes per episode")
    p.add_argument("--shots", type=int, help="labeled samples per class")
    p.add_argument("--query", type=int, help="query samples per class")
    p.add_argument("--unlabeled-per-class", type=int, help="unlabeled samples per class")
    p.add_argument("--distractors", type=int, help="distractor classes per episode")


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    _add_episode_flags(p)
    p.add_argument("--eta", type=float, help="selection rate parameter")
    p.add_argument("--reduction-ratio", type=int, help="squeeze-excite bottleneck ratio")
    p.add_argument("--m0", type=int, help="largest trusted unlabeled count")
    p.add_argument("--episodes", type=int, help="training episodes (eval: test episodes)")
    p.add_argument("--eval-every", type=int, help="validation cadence in episodes")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--mode", choices=MODE_NAMES, help="feature preset")
    p.add_argument("--out", type=Path, required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sala",
        description="semi-supervised few-shot classification runs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="generate a synthetic Gaussian-cluster dataset")
    g.add_argument("--classes", type=int, default=30)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--cluster-std", type=float, default=1.0)
    g.add_argument("--separation", type=float, default=3.0)
    g.add_argument("--samples-per-class", type=int, default=100)
    g.add_argument("--labeled-fraction", type=float, default=0.4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="train a model and keep the best checkpoint")
    _add_run_flags(t)

    e = sub.add_parser("eval", help="score a checkpoint on test episodes")
    _add_run_flags(e)
    e.add_argument("--checkpoint", type=Path, required=True)

    a = sub.add_parser("ablate", help="run the 2x2 task-metric x progressive-selection grid")
    _add_run_flags(a)
    return parser


def _merge_config(args, model_fallback=None, episodes_target="total_episodes") -> dict:
    """Config file plus flag overrides, with the model inferred when absent.

    ``--episodes`` means training episodes for train/ablate and test episodes
    for eval; ``episodes_target`` picks the destination.
    """
    tree: dict = {}
    if args.config:
        tree = json.loads(Path(args.config).read_text())

    def setdefault_path(*keys):
        node = tree
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        return node, keys[-1]

    overrides = [
        (("seed",), args.seed),
        (("mode",), args.mode),
        (("reduction_ratio",), args.reduction_ratio),
        (("schedule", "eta"), args.eta),
        (("schedule", "m0"), args.m0),
        (("episode", "ways"), args.ways),
        (("episode", "shots"), args.shots),
        (("episode", "query"), args.query),
        (("episode", "unlabeled_per_class"), args.unlabeled_per_class),
        (("episode", "distractors"), args.distractors),
        (("train", episodes_target), args.episodes),
        (("train", "eval_every"), args.eval_every),
        (("train", "learning_rate"), args.lr),
    ]
    for path, value in overrides:
        if value is not None:
            node, leaf = setdefault_path(*path)
            node[leaf] = value

    tree.setdefault("episode", {})
    for key, default in (("ways", 5), ("shots", 1), ("query", 15),
                         ("unlabeled_per_class", 15), ("distractors", 0)):
        tree["episode"].setdefault(key, default)
    if "model" not in tree and model_fallback is not None:
        tree["model"] = model_fallback
    return tree


def _infer_model(dataset) -> dict:
    shape = dataset.sample_shape
    if len(shape) == 1:
        return {"kind": "mlp", "in_dim": shape[0], "hidden": [32, 32], "out_dim": 16}
    if len(shape) == 3:
        return {"kind": "convnet4", "in_shape": list(shape)}
    raise ValueError(f"cannot infer a model for sample shape {shape}")


def _write_csv(path: Path, config_echo: dict, header: str, rows) -> None:
    with open(path, "w") as f:
        f.write("# config: " + json.dumps(config_echo) + "\n")
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(str(v) for v in row) + "\n")


def cmd_gen_synth(args) -> int:
    ds = gen_synthetic(args.classes, args.dim, args.cluster_std, args.separation,
                       args.samples_per_class, args.seed)
    ds = make_split(ds, args.labeled_fraction, args.seed)
    out = Path(args.out)
    save_dataset(ds, out)
    echo = {
        "classes": args.classes, "dim": args.dim, "cluster_std": args.cluster_std,
        "separation": args.separation, "samples_per_class": args.samples_per_class,
        "labeled_fraction": args.labeled_fraction, "seed": args.seed,
    }
    (out / "config.json").write_text(json.dumps(echo, indent=2) + "\n")
    print(f"wrote {ds.n_classes}-class dataset to {out}")
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    tree = _merge_config(args, model_fallback=_infer_model(dataset))
    config = TrainConfig.from_dict(tree)
    out = Path(args.out)
    result = train(config, dataset, out_dir=out)
    val_rows = [(r["episode"], r["val_acc"]) for r in result.log if "val_acc" in r]
    _write_csv(out / CURVE_FILE, config.to_dict(), "episode,val_acc", val_rows)
    print(f"trained {config.total_episodes} episodes; "
          f"best validation accuracy {result.best_val_acc}; artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    blob = Path(args.checkpoint).read_bytes()
    models = load_models(blob)
    echo, _ = parse_checkpoint(blob)
    fallback = echo.get("config", {}).get("model") or _infer_model(dataset)
    tree = _merge_config(args, model_fallback=fallback, episodes_target="test_episodes")
    config = TrainConfig.from_dict(tree)

    report = evaluate(models, dataset, config.test_spec, config.test_episodes,
                      config.test_schedule(), config.mode, seed=config.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict(config_echo=config.to_dict(),
                             checkpoint_hash=checkpoint_hash(blob))
    (out / REPORT_FILE).write_text(json.dumps(payload, indent=2) + "\n")
    print(f"accuracy {report.mean_acc:.4f} +/- {report.ci95:.4f} "
          f"over {report.episodes} episodes; report in {out / REPORT_FILE}")
    return 0


def cmd_ablate(args) -> int:
    dataset = load_dataset(args.data)
    tree = _merge_config(args, model_fallback=_infer_model(dataset))
    tree.pop("mode", None)
    base = TrainConfig.from_dict(tree)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for tm in (False, True):
        for pns in (False, True):
            mode = RunMode(use_task_metric=tm, use_progressive_selection=pns,
                           use_unlabeled=True)
            cell = TrainConfig.from_dict({**base.to_dict(), "mode": mode.flags()})
            result = train(cell, dataset, out_dir=out / f"tm{int(tm)}_pns{int(pns)}")
            models = load_models(result.best_checkpoint)
            report = evaluate(models, dataset, cell.test_spec, cell.test_episodes,
                              cell.test_schedule(), mode, seed=cell.seed)
            rows.append((int(tm), int(pns),
                         f"{report.mean_acc:.6f}", f"{report.ci95:.6f}"))
            print(f"tm={int(tm)} pns={int(pns)}: "
                  f"{report.mean_acc:.4f} +/- {report.ci95:.4f}")

    _write_csv(out / ABLATION_FILE, base.to_dict(), "tm,pns,mean_acc,ci95", rows)
    print(f"ablation table in {out / ABLATION_FILE}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen-synth": cmd_gen_synth,
        "train": cmd_train,
        "eval": cmd_eval,
        "ablate": cmd_ablate,
    }
    try:
        return handlers[args.command](args)
    except Exception as err:  # runtime failure: message on stderr, exit 1
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
