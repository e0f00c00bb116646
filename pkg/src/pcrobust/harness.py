"""Experiment orchestration: config parsing, multi-arm runs, attack
benchmarking, and plot-data emission."""
from __future__ import annotations

import csv
import json
import os
import shutil
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .attacks import AttackConfig, run_attack
from .classifier import (
    ClassifierConfig,
    accuracy,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .curriculum import AdvisorConfig
from .data import SyntheticDatasetSpec, generate_dataset, save_dataset
from .errors import ConfigurationError, PCRobustError
from .training import (
    RunConfig,
    TrainingArm,
    adversarial_accuracy,
    load_log,
    run_arm,
    save_log,
)

OUTPUT_ROOT_ENV = "PCROBUST_OUTPUT_ROOT"


@dataclass
class ExperimentConfig:
    name: str
    dataset: SyntheticDatasetSpec
    classifier: ClassifierConfig
    attacks: dict  # name -> AttackConfig
    training: RunConfig
    advisor: AdvisorConfig
    arms: list
    seeds: list
    train_attack: str = "train_pgd"
    eval_attack: str = "eval_pgd"
    output_root: str = "runs"
    serial: bool = True

    def validate(self):
        if not self.arms:
            raise ConfigurationError("at least one arm required", field="arms")
        for arm in self.arms:
            TrainingArm.from_name(arm)
        if not self.seeds:
            raise ConfigurationError("at least one seed required", field="seeds")
        for key in (self.train_attack, self.eval_attack):
            if key not in self.attacks:
                raise ConfigurationError(f"attack name {key!r} not configured", field="attacks")
        self.dataset.validate()
        self.classifier.validate()
        self.training.validate()
        self.advisor.validate()
        for name, cfg in self.attacks.items():
            cfg.validate()


def _build(cls, mapping, path):
    if not isinstance(mapping, dict):
        raise ConfigurationError("expected a mapping", field=path)
    valid = set(cls.__dataclass_fields__)
    for key in mapping:
        if key not in valid:
            raise ConfigurationError(f"unknown key {key!r}", field=f"{path}.{key}")
    return cls(**mapping)


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a mapping", field="<root>")
    try:
        cfg = ExperimentConfig(
            name=raw.get("name", "experiment"),
            dataset=_build(SyntheticDatasetSpec, raw.get("dataset", {}), "dataset"),
            classifier=_build(ClassifierConfig, raw.get("classifier", {}), "classifier"),
            attacks={
                name: _build(AttackConfig, sub, f"attacks.{name}")
                for name, sub in raw.get("attacks", {}).items()
            },
            training=_build(RunConfig, raw.get("training", {}), "training"),
            advisor=_build(AdvisorConfig, raw.get("advisor", {}), "advisor"),
            arms=list(raw.get("arms", [])),
            seeds=list(raw.get("seeds", [0])),
            train_attack=raw.get("train_attack", "train_pgd"),
            eval_attack=raw.get("eval_attack", "eval_pgd"),
            output_root=raw.get("output_root", "runs"),
            serial=bool(raw.get("serial", True)),
        )
    except TypeError as exc:
        raise ConfigurationError(str(exc), field="<config>") from exc
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return config_from_dict(raw)


def _arm_dir(out_dir, arm, seed):
    return os.path.join(out_dir, f"{arm}_seed{seed}")


def run_experiment(config_path, output_root=None, seed_override=None) -> str:
    """Run every configured arm x seed; returns the populated output directory.

    Layout: <root>/<name>/{config.yaml, dataset.pcset, summary.json,
    index.txt, <arm>_seed<seed>/{log.jsonl, checkpoint.pt, mi_windows.json}}
    plus the plot-data CSVs from emit_plots.
    """
    cfg = load_config(config_path)
    root = output_root or os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_root
    seeds = [seed_override] if seed_override is not None else cfg.seeds
    out_dir = os.path.join(root, cfg.name)
    if os.path.exists(out_dir):
        shutil.rmtree(out_dir)
    os.makedirs(out_dir)
    shutil.copyfile(config_path, os.path.join(out_dir, "config.yaml"))

    dataset = generate_dataset(cfg.dataset)
    save_dataset(dataset, os.path.join(out_dir, "dataset.pcset"))

    summary = {"arms": {}}
    files = ["config.yaml", "dataset.pcset"]
    for arm_name in cfg.arms:
        arm = TrainingArm.from_name(arm_name)
        summary["arms"][arm_name] = {}
        for seed in seeds:
            run_cfg = replace(cfg.training, seed=seed)
            result = run_arm(
                dataset, arm, run_cfg, cfg.classifier,
                cfg.attacks[cfg.train_attack], cfg.advisor,
            )
            sub = _arm_dir(out_dir, arm_name, seed)
            os.makedirs(sub)
            save_log(result.records, arm, os.path.join(sub, "log.jsonl"))
            save_checkpoint(result.model, os.path.join(sub, "checkpoint.pt"))
            with open(os.path.join(sub, "mi_windows.json"), "w") as fh:
                json.dump(
                    {"natural": result.nat_window, "adversarial": result.adv_window},
                    fh,
                    sort_keys=True,
                )
            clean_acc = accuracy(result.model, result.probe_clouds)
            adv_acc = adversarial_accuracy(
                result.model, result.probe_clouds, cfg.attacks[cfg.eval_attack]
            )
            summary["arms"][arm_name][str(seed)] = {
                "clean_acc": clean_acc,
                "adv_acc": adv_acc,
            }
            rel = os.path.relpath(sub, out_dir)
            files += [f"{rel}/log.jsonl", f"{rel}/checkpoint.pt", f"{rel}/mi_windows.json"]

    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    files.append("summary.json")
    files += emit_plots(out_dir)
    files.append("index.txt")
    with open(os.path.join(out_dir, "index.txt"), "w") as fh:
        fh.write("\n".join(sorted(files)) + "\n")
    return out_dir


def emit_plots(run_dir) -> list:
    """Write plot-data CSVs (no rendering): accuracy trajectories, pacing
    curves, and MI histograms. Returns the relative paths written."""
    written = []
    for entry in sorted(os.listdir(run_dir)):
        sub = os.path.join(run_dir, entry)
        log_path = os.path.join(sub, "log.jsonl")
        if not os.path.isdir(sub) or not os.path.exists(log_path):
            continue
        arm, records = load_log(log_path)
        acc_path = os.path.join(run_dir, f"accuracy_{entry}.csv")
        with open(acc_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "clean_acc", "adv_acc"])
            for r in records:
                if r.clean_acc is not None:
                    w.writerow([r.step, r.clean_acc, "" if r.adv_acc is None else r.adv_acc])
        written.append(os.path.basename(acc_path))
        eta_path = os.path.join(run_dir, f"eta_{entry}.csv")
        with open(eta_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "eta"])
            for r in records:
                w.writerow([r.step, r.eta])
        written.append(os.path.basename(eta_path))
        windows_path = os.path.join(sub, "mi_windows.json")
        if os.path.exists(windows_path):
            with open(windows_path) as fh:
                windows = json.load(fh)
            if windows["natural"] and windows["adversarial"]:
                written.append(_mi_histogram(run_dir, entry, windows))
    return written


def _mi_histogram(run_dir, entry, windows, bins: int = 20) -> str:
    nat = np.asarray(windows["natural"])
    adv = np.asarray(windows["adversarial"])
    lo = min(nat.min(), adv.min())
    hi = max(nat.max(), adv.max())
    if hi <= lo:
        hi = lo + 1e-9
    edges = np.linspace(lo, hi, bins + 1)
    nat_counts, _ = np.histogram(nat, bins=edges)
    adv_counts, _ = np.histogram(adv, bins=edges)
    path = os.path.join(run_dir, f"mi_hist_{entry}.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count_natural", "count_adversarial"])
        for i in range(bins):
            w.writerow([edges[i], edges[i + 1], int(nat_counts[i]), int(adv_counts[i])])
    return os.path.basename(path)


def benchmark_attacks(config_path, checkpoint_path, sample_size: int = 100, label: str = "model"):
    """Clean and per-attack accuracy for every configured attack on a probe
    sample. Returns {attack_name: accuracy} plus a 'clean' entry."""
    cfg = load_config(config_path)
    if not os.path.exists(checkpoint_path):
        raise PCRobustError(f"checkpoint not found: {checkpoint_path}")
    model = load_checkpoint(checkpoint_path)
    dataset = generate_dataset(cfg.dataset)
    rng = np.random.default_rng(cfg.seeds[0])
    sample = [dataset[i] for i in rng.permutation(len(dataset))[: min(sample_size, len(dataset))]]
    table = {"clean": accuracy(model, sample)}
    for name, attack_cfg in cfg.attacks.items():
        correct = 0
        for cloud in sample:
            record = run_attack(model, cloud, attack_cfg)
            pred = int(np.argmax(forward(model, record.perturbed)))
            correct += pred == cloud.label
        table[name] = correct / len(sample)
    return {label: table}


def write_benchmark(table: dict, path) -> None:
    attacks_cols = sorted({a for row in table.values() for a in row})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model"] + attacks_cols)
        for model_name, row in table.items():
            w.writerow([model_name] + [row.get(a, "") for a in attacks_cols])
