"""Command-line entry point.

One binary, subcommand style: train / convert / cost / exit-eval /
analyze / backdoor.  Pipelines compose through files: checkpoints,
metrics CSVs, trace CSVs and JSON reports.  Report paths also render
figures next to their delimited output unless --no-figures is given.

Settings come from an optional key=value config file; command-line flags
override config values, and ``--set key=value`` overrides anything.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import figures as figs
from .analysis import (
    confidence_indicator_report,
    confusion_histogram,
    confusion_normalize,
    confusion_scores,
    error_indicator_report,
    overthinking_report,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, load_config
from .cost import DEFAULT_TARGETS, build_cost_profile, eligible_placements, select_placements
from .data import (
    LabeledDataset,
    TriggerSpec,
    apply_trigger,
    load_idx_dir,
    poison,
    split_holdout,
    synthetic_shapes,
)
from .errors import ConfigurationError, SdnetError
from .exits import ExitPolicy, calibrate_threshold, evaluate_policy_traces, trace_dataset
from .graph import Backbone, load_architecture
from .sdn import SdnModel, build_sdn
from .tracefiles import read_probs_csv, write_histogram_csv, write_probs_csv, write_trace_csv
from .trainer import TrainConfig, evaluate_heads, train, write_metrics_csv

logger = logging.getLogger(__name__)


def _config_from_args(args) -> Config:
    cfg = Config(load_config(args.config) if getattr(args, "config", None) else {})
    direct = {
        "arch": getattr(args, "arch", None),
        "seed": getattr(args, "seed", None),
        "out": getattr(args, "out", None),
        "data.kind": getattr(args, "data_kind", None),
        "data.dir": getattr(args, "data_dir", None),
        "data.limit_train": getattr(args, "limit_train", None),
        "train.regime": getattr(args, "regime", None),
        "train.epochs": getattr(args, "epochs", None),
        "train.backbone_checkpoint": getattr(args, "backbone_checkpoint", None),
        "sdn.targets": getattr(args, "targets", None),
        "exit.q": getattr(args, "q", None),
        "exit.budget": getattr(args, "budget", None),
        "exit.holdout_fraction": getattr(args, "holdout_fraction", None),
        "trigger.patch": getattr(args, "patch_size", None),
        "trigger.target": getattr(args, "target_class", None),
        "trigger.rate": getattr(args, "poison_rate", None),
    }
    cfg.update(direct)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.update({key.strip(): value.strip()})
    if getattr(args, "no_figures", False):
        cfg.update({"figures": "false"})
    return cfg


def _out_dir(cfg: Config, default: str) -> Path:
    out = Path(cfg.get_str("out", default))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_datasets(cfg: Config) -> tuple[LabeledDataset, LabeledDataset]:
    kind = cfg.get_str("data.kind", "idx")
    if kind == "idx":
        directory = cfg.get_str("data.dir")
        classes = cfg.get_int("data.classes", 10)
        train_set, test_set = load_idx_dir(directory, num_classes=classes)
    elif kind == "shapes":
        classes = cfg.get_int("data.classes", 4)
        seed = cfg.get_int("data.seed", cfg.get_int("seed", 0))
        train_set = synthetic_shapes(cfg.get_int("data.n", 2000), classes, seed)
        test_set = synthetic_shapes(cfg.get_int("data.test_n", 500), classes, seed + 1)
        test_set.split = "test"
    else:
        raise ConfigurationError(f"unknown data.kind {kind!r} (expected idx or shapes)")
    limit_train = cfg.get_int("data.limit_train", 0)
    limit_test = cfg.get_int("data.limit_test", 0)
    if limit_train:
        train_set = train_set.head(limit_train)
    if limit_test:
        test_set = test_set.head(limit_test, split="test")
    return train_set, test_set


def _train_config(cfg: Config, regime: str, default_epochs: int = 15) -> TrainConfig:
    return TrainConfig(
        regime=regime,
        epochs=cfg.get_int("train.epochs", default_epochs),
        batch_size=cfg.get_int("train.batch_size", 128),
        lr=cfg.get_float("train.lr", 1e-3),
        lr_decay_epochs=cfg.get_ints("train.lr_decay_epochs", (8, 12)),
        lr_decay_factor=cfg.get_float("train.lr_decay_factor", 0.5),
        seed=cfg.get_int("seed", 0),
        augment=cfg.get_bool("train.augment", True),
        hflip=cfg.get_bool("train.hflip", False),
    )


def _save_model(model, path) -> None:
    state = {name: p.data for name, p in model.named_parameters().items()}
    save_checkpoint(path, state)


def _load_model(cfg: Config, checkpoint_path):
    graph = load_architecture(cfg.get_str("arch"))
    state = load_checkpoint(checkpoint_path)
    backbone = Backbone.build(graph, seed=cfg.get_int("seed", 0))
    if any(name.startswith("ic1.") for name in state):
        model = build_sdn(backbone, cfg.get_floats("sdn.targets", DEFAULT_TARGETS))
        model.load_state(state)
        return model
    backbone.load_state(state)
    return backbone


def _run_training(cfg: Config, regime: str, out: Path,
                  train_set: LabeledDataset, test_set: LabeledDataset):
    graph = load_architecture(cfg.get_str("arch"))
    seed = cfg.get_int("seed", 0)
    targets = cfg.get_floats("sdn.targets", DEFAULT_TARGETS)

    if regime == "backbone":
        model = Backbone.build(graph, seed=seed)
    elif regime == "ic_only":
        ckpt = cfg.get_str("train.backbone_checkpoint", "")
        if not ckpt:
            raise ConfigurationError(
                "train.backbone_checkpoint is required for the ic_only regime"
            )
        backbone = Backbone.build(graph, seed=seed)
        backbone.load_state(load_checkpoint(ckpt))
        model = build_sdn(backbone, targets, seed=seed)
    elif regime == "sdn":
        model = build_sdn(Backbone.build(graph, seed=seed), targets, seed=seed)
    else:
        raise ConfigurationError(f"unknown training regime {regime!r}")

    default_epochs = 8 if regime == "ic_only" else 15
    tc = _train_config(cfg, regime, default_epochs)
    result = train(model, train_set, tc, test_set=test_set)

    _save_model(model, out / "checkpoint.sdn")
    write_metrics_csv(result.metrics, out / "metrics.csv")
    if cfg.get_bool("figures", True):
        figs.training_curves(result.metrics, out / "figures" / "training_curves.png")
    return model, result


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    regime = cfg.get_str("train.regime", "backbone")
    out = _out_dir(cfg, "runs/train")
    train_set, test_set = _load_datasets(cfg)
    model, result = _run_training(cfg, regime, out, train_set, test_set)
    print(f"checkpoint: {out / 'checkpoint.sdn'}")
    print(f"final test accuracy: {result.final_accuracy():.4f}")
    return 0


def cmd_convert(args) -> int:
    """Attach heads to a trained backbone and train only them."""
    cfg = _config_from_args(args)
    cfg.update({"train.regime": "ic_only"})
    out = _out_dir(cfg, "runs/convert")
    train_set, test_set = _load_datasets(cfg)
    model, result = _run_training(cfg, "ic_only", out, train_set, test_set)
    accs = result.head_accuracies()
    print(f"checkpoint: {out / 'checkpoint.sdn'}")
    print("per-head test accuracy: " + " ".join(f"{a:.4f}" for a in accs))
    return 0


def cmd_cost(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(cfg, "runs/cost")
    graph = load_architecture(cfg.get_str("arch"))
    profile = build_cost_profile(graph)
    targets = cfg.get_floats("sdn.targets", DEFAULT_TARGETS)
    placements = select_placements(profile, eligible_placements(graph), targets)

    path = out / "cost.csv"
    with open(path, "w") as f:
        f.write("layer_index,kind,flops,cum_fraction\n")
        for i, spec in enumerate(graph.layers):
            f.write(f"{i},{spec.kind},{profile.layer_flops[i]},{profile.fractions[i]:.9f}\n")
    (out / "placements.json").write_text(
        json.dumps(
            {
                "targets": list(targets),
                "placements": placements,
                "placement_fractions": [profile.fractions[i] for i in placements],
                "total_flops": profile.total,
            },
            indent=2,
        )
    )
    if cfg.get_bool("figures", True):
        figs.cost_profile_figure(profile.fractions, placements, targets,
                                 out / "figures" / "cost_profile.png")
    print(f"total backbone FLOPs: {profile.total}")
    print(f"placements for targets {list(targets)}: {placements}")
    return 0


def _require_sdn(model) -> SdnModel:
    if not isinstance(model, SdnModel):
        raise ConfigurationError("this command needs an SDN checkpoint with internal classifiers")
    return model


def cmd_exit_eval(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(cfg, "runs/exit_eval")
    model = _require_sdn(_load_model(cfg, args.checkpoint))
    train_set, test_set = _load_datasets(cfg)
    batch = cfg.get_int("train.batch_size", 128)

    budget = cfg.get_float("exit.budget", 0.0)
    if cfg.has("exit.q"):
        policy = ExitPolicy(q=cfg.get_float("exit.q"))
    elif budget:
        frac = cfg.get_float("exit.holdout_fraction", 0.1)
        _, holdout = split_holdout(train_set, frac, cfg.get_int("seed", 0))
        policy = calibrate_threshold(model, holdout, budget, batch_size=batch)
    else:
        raise ConfigurationError("provide exit.q or exit.budget")

    traces = trace_dataset(model, test_set.images, batch_size=batch)
    evaluation = evaluate_policy_traces(traces, test_set.labels, policy)

    write_trace_csv(out / "traces.csv", evaluation.decisions, traces, test_set.labels)
    write_probs_csv(out / "probs.csv", traces, test_set.labels)
    if cfg.get_bool("exit.train_traces", True):
        train_traces = trace_dataset(model, train_set.images, batch_size=batch)
        write_probs_csv(out / "probs_train.csv", train_traces, train_set.labels)

    summary = {
        "q": policy.q,
        "feasible": policy.feasible,
        "budget": budget or None,
        **evaluation.to_json(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    if cfg.get_bool("figures", True):
        figs.exit_counts_figure(evaluation.exit_counts, out / "figures" / "exit_counts.png",
                                title=f"q={policy.q:.2f}")
    print(f"q={policy.q:.3f} accuracy={evaluation.accuracy:.4f} "
          f"avg_cost={evaluation.avg_cost_fraction:.4f}")
    return 0


def cmd_analyze(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(cfg, "runs/analyze")
    traces, labels = read_probs_csv(args.traces)
    report = overthinking_report(traces, labels)

    scores = confusion_scores(traces)
    train_traces_path = args.train_traces
    if train_traces_path is None:
        sibling = Path(args.traces).parent / "probs_train.csv"
        train_traces_path = sibling if sibling.exists() else None
    if train_traces_path is not None:
        train_traces, _ = read_probs_csv(train_traces_path)
        train_scores = confusion_scores(train_traces)
    else:
        logger.warning("no training traces supplied; normalizing confusion with the "
                       "evaluation scores themselves")
        train_scores = scores
    normalized, stats = confusion_normalize(scores, train_scores)

    correct = np.array([t.predictions[-1] for t in traces]) == labels
    indicator = error_indicator_report(normalized, correct)
    baseline = confidence_indicator_report([t.confidences[-1] for t in traces], correct)

    (out / "report.json").write_text(json.dumps(report.to_json(indicator), indent=2))
    details = {
        "destructive_share_of_errors": report.destructive_share_of_errors,
        "ideal_exit_counts": list(report.ideal.exit_counts),
        "ideal_avg_cost_fraction": report.ideal.avg_cost_fraction,
        "milestones": {
            "closest_80_ic": report.milestones.closest_80_ic,
            "closest_90_ic": report.milestones.closest_90_ic,
            "max_ic": report.milestones.max_ic,
            "max_ic_accuracy": report.milestones.max_ic_accuracy,
        },
        "confusion_normalization": {"mu": stats.mu, "sigma": stats.sigma},
        "confidence_baseline": {
            "mean_correct": baseline.mean_correct,
            "mean_wrong": baseline.mean_wrong,
            "fn_rate": baseline.fn_rate,
        },
    }
    (out / "report_details.json").write_text(json.dumps(details, indent=2))

    hist = confusion_histogram(normalized, correct)
    write_histogram_csv(out / "confusion_hist.csv", hist)
    if cfg.get_bool("figures", True):
        figs.confusion_histogram_figure(hist, out / "figures" / "confusion_hist.png",
                                        indicator.mean_correct, indicator.mean_wrong)
        figs.head_accuracy_figure(report.per_head_accuracy,
                                  out / "figures" / "head_accuracy.png")
        figs.exit_counts_figure(report.ideal.exit_counts,
                                out / "figures" / "ideal_exit_counts.png",
                                title="perfect-oracle exits")
    print(f"final={report.final_accuracy:.4f} cumulative={report.cumulative_accuracy:.4f} "
          f"ideal_cost_reduction={report.ideal.cost_reduction:.4f}")
    return 0


def _attack_success(traces, target: int) -> list[float]:
    preds = np.stack([t.predictions for t in traces])
    return (preds == target).mean(axis=0).tolist()


def cmd_backdoor(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(cfg, "runs/backdoor")
    train_set, test_set = _load_datasets(cfg)
    trigger = TriggerSpec(
        patch_size=cfg.get_int("trigger.patch", 3),
        target=cfg.get_int("trigger.target", 0),
        rate=cfg.get_float("trigger.rate", 0.05),
        value=cfg.get_float("trigger.value", 1.0),
    )
    seed = cfg.get_int("seed", 0)
    batch = cfg.get_int("train.batch_size", 128)

    # the adversary trains the backbone on poisoned data; the defender then
    # converts it with heads trained on clean data
    poisoned_train = poison(train_set, trigger, seed) if trigger.rate > 0 else train_set
    graph = load_architecture(cfg.get_str("arch"))
    backbone = Backbone.build(graph, seed=seed)
    tc_backbone = _train_config(cfg, "backbone")
    train(backbone, poisoned_train, tc_backbone, test_set=test_set)
    _save_model(backbone, out / "backbone_poisoned.sdn")

    model = build_sdn(backbone, cfg.get_floats("sdn.targets", DEFAULT_TARGETS), seed=seed)
    head_epochs = cfg.get_int("backdoor.head_epochs", 8)
    tc_heads = TrainConfig(
        regime="ic_only", epochs=head_epochs, batch_size=tc_backbone.batch_size,
        lr=tc_backbone.lr, lr_decay_epochs=tc_backbone.lr_decay_epochs,
        lr_decay_factor=tc_backbone.lr_decay_factor, seed=seed,
        augment=tc_backbone.augment, hflip=tc_backbone.hflip,
    )
    train(model, train_set, tc_heads, test_set=test_set)
    _save_model(model, out / "checkpoint.sdn")

    triggered = apply_trigger(test_set.images, trigger)
    clean_traces = trace_dataset(model, test_set.images, batch_size=batch)
    trig_traces = trace_dataset(model, triggered, batch_size=batch)
    labels = test_set.labels

    clean_acc = float((np.stack([t.predictions[-1] for t in clean_traces]) == labels).mean())
    trig_preds = np.stack([t.predictions[-1] for t in trig_traces])
    triggered_acc = float((trig_preds == labels).mean())
    attack = float((trig_preds == trigger.target).mean())
    per_head_attack = _attack_success(trig_traces, trigger.target)
    per_head_trig_acc = [
        float((np.stack([t.predictions[h] for t in trig_traces]) == labels).mean())
        for h in range(model.num_ics + 1)
    ]

    budget = cfg.get_float("exit.budget", 0.5)
    frac = cfg.get_float("exit.holdout_fraction", 0.1)
    _, holdout = split_holdout(train_set, frac, seed)
    policy = calibrate_threshold(model, holdout, budget, batch_size=batch)
    exit_trig = evaluate_policy_traces(trig_traces, labels, policy)
    exit_trig_attack = float(
        np.mean([d.label == trigger.target for d in exit_trig.decisions])
    )
    exit_clean = evaluate_policy_traces(clean_traces, labels, policy)

    report = {
        "trigger": {"patch_size": trigger.patch_size, "target": trigger.target,
                     "rate": trigger.rate},
        "clean_accuracy": clean_acc,
        "triggered_accuracy": triggered_acc,
        "attack_success": attack,
        "per_head_attack_success": per_head_attack,
        "per_head_triggered_accuracy": per_head_trig_acc,
        "early_exit": {
            "q": policy.q,
            "feasible": policy.feasible,
            "budget": budget,
            "triggered_accuracy": exit_trig.accuracy,
            "attack_success": exit_trig_attack,
            "clean_accuracy": exit_clean.accuracy,
            "avg_cost_fraction": exit_trig.avg_cost_fraction,
        },
    }
    (out / "backdoor_report.json").write_text(json.dumps(report, indent=2))
    if cfg.get_bool("figures", True):
        figs.attack_success_figure(per_head_attack, out / "figures" / "attack_success.png")
        figs.head_accuracy_figure(
            per_head_trig_acc, out / "figures" / "triggered_accuracy.png",
            second=[float((np.stack([t.predictions[h] for t in clean_traces]) == labels).mean())
                    for h in range(model.num_ics + 1)],
            labels=("triggered", "clean"),
        )
    print(f"clean={clean_acc:.4f} triggered={triggered_acc:.4f} attack={attack:.4f} "
          f"exit_triggered={exit_trig.accuracy:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdnet",
        description="Multi-exit CNN engine: train, convert, evaluate early exits, analyze overthinking",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, traces=False):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--arch", help="architecture description file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key")
        p.add_argument("--no-figures", action="store_true", help="skip figure rendering")
        p.add_argument("--data-kind", choices=["idx", "shapes"])
        p.add_argument("--data-dir")
        p.add_argument("--limit-train", type=int)
        p.add_argument("--targets", help="comma list of placement cost fractions")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint to evaluate")
        if traces:
            p.add_argument("--traces", required=True, help="full per-head trace CSV")
            p.add_argument("--train-traces", help="training-set trace CSV for normalization")

    p = sub.add_parser("train", help="train a backbone, head-only or joint model")
    common(p)
    p.add_argument("--regime", choices=["backbone", "ic_only", "sdn"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--backbone-checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="attach heads to a trained backbone (head-only training)")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--backbone-checkpoint", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("cost", help="per-layer FLOPs report and head placements")
    common(p)
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("exit-eval", help="early-exit evaluation with a fixed or calibrated threshold")
    common(p, checkpoint=True)
    p.add_argument("--q", type=float, help="fixed confidence threshold")
    p.add_argument("--budget", type=float, help="average-cost budget fraction for calibration")
    p.add_argument("--holdout-fraction", type=float)
    p.set_defaults(func=cmd_exit_eval)

    p = sub.add_parser("analyze", help="overthinking and confusion report from traces")
    common(p, traces=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("backdoor", help="trigger-poisoning pipeline and early-exit recovery report")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--target-class", type=int)
    p.add_argument("--poison-rate", type=float)
    p.add_argument("--budget", type=float)
    p.set_defaults(func=cmd_backdoor)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SdnetError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
