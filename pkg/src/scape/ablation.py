"""Paired-seed ablation sweeps over model variants."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .data import Dataset
from .evaluate import eval_episodes, evaluate
from .model import ModelConfig, ScapeModel
from .train import NumericFailure, train

log = logging.getLogger(__name__)

METRICS = ("pck", "auc", "nme", "pck_symmetric", "pck_occluded")

# (better, worse, metric): the directional claims the sweep is meant to check
COMPARISONS = (
    ("scape", "no_kar", "pck"),
    ("scape", "no_gkp", "pck"),
    ("no_kar", "shared_qk", "pck"),
    ("no_gkp", "shared_qk", "pck"),
    ("shared_qk", "map_regression_head", "pck"),
    ("map_regression_head", "matching_head", "pck"),
    ("scape", "mask_kk", "pck"),
    ("scape", "no_kar", "pck_occluded"),
    ("scape", "no_gkp", "pck_symmetric"),
    ("scape", "lite", "pck"),
)


@dataclass
class Budget:
    steps: int = 2000
    batch_size: int = 8
    base_lr: float = 2e-3
    n_shot: int = 1
    eval_episodes: int = 300
    eval_seed: int = 1234
    supervise_occluded: bool = True


@dataclass
class RunResult:
    variant: str
    seed: int
    metrics: dict[str, float | None]
    failed: bool = False
    note: str = ""


@dataclass
class AblationReport:
    runs: list[RunResult] = field(default_factory=list)

    def variants(self) -> list[str]:
        return list(dict.fromkeys(r.variant for r in self.runs))

    def per_seed(self, variant: str, metric: str = "pck") -> dict[int, float]:
        return {r.seed: r.metrics[metric] for r in self.runs
                if r.variant == variant and not r.failed and r.metrics.get(metric) is not None}

    def mean(self, variant: str, metric: str = "pck") -> float:
        vals = list(self.per_seed(variant, metric).values())
        return float(np.mean(vals)) if vals else math.nan

    def table(self) -> dict[str, tuple[float, list[float]]]:
        """variant -> (mean PCK, per-seed PCK)"""
        return {v: (self.mean(v), list(self.per_seed(v).values())) for v in self.variants()}

    def paired_deltas(self, better: str, worse: str, metric: str = "pck") -> dict[int, float]:
        a, b = self.per_seed(better, metric), self.per_seed(worse, metric)
        return {s: a[s] - b[s] for s in sorted(a.keys() & b.keys())}

    def holds(self, better: str, worse: str, metric: str = "pck") -> bool | None:
        d = self.paired_deltas(better, worse, metric)
        if not d:
            return None
        return self.mean(better, metric) > self.mean(worse, metric) and float(np.mean(list(d.values()))) > 0

    def to_csv(self) -> str:
        lines = ["variant,seed," + ",".join(METRICS) + ",failed"]
        for r in self.runs:
            vals = ["" if r.metrics.get(m) is None else f"{r.metrics[m]:.6f}" for m in METRICS]
            lines.append(f"{r.variant},{r.seed}," + ",".join(vals) + f",{int(r.failed)}")
        return "\n".join(lines) + "\n"

    def summary(self, comparisons=COMPARISONS) -> str:
        out = ["variant              mean_pck  seeds"]
        for v, (m, vals) in self.table().items():
            out.append(f"{v:<20} {m:8.4f}  " + " ".join(f"{x:.3f}" for x in vals))
        failed = [f"{r.variant}/seed{r.seed}" for r in self.runs if r.failed]
        if failed:
            out.append("excluded (non-finite loss): " + ", ".join(failed))
        out.append("")
        out.append("comparison                              metric         mean_delta  +/-  holds")
        have = set(self.variants())
        for better, worse, metric in comparisons:
            if better not in have or worse not in have:
                continue
            d = list(self.paired_deltas(better, worse, metric).values())
            if not d:
                continue
            pos, neg = sum(x > 0 for x in d), sum(x < 0 for x in d)
            out.append(f"{better + ' > ' + worse:<39} {metric:<14} {np.mean(d):+.4f}     "
                       f"{pos}/{neg}  {'yes' if self.holds(better, worse, metric) else 'no'}")
        return "\n".join(out) + "\n"


def run_one(variant: str, seed: int, dataset: Dataset, budget: Budget, episodes,
            base: ModelConfig | None = None) -> tuple[RunResult, ScapeModel]:
    cfg = replace(base or ModelConfig(), variant=variant, seed=seed)
    model = ScapeModel(cfg)
    try:
        train(model, dataset, budget.steps, budget.batch_size, budget.base_lr, seed=seed,
              n_shot=budget.n_shot, supervise_occluded=budget.supervise_occluded, log_every=50)
    except NumericFailure as e:
        log.warning("%s seed %d diverged at step %d", variant, seed, e.step)
        return RunResult(variant, seed, {m: None for m in METRICS}, True, str(e)), model
    res = evaluate(model, episodes, cfg.K_max)
    return RunResult(variant, seed, res.summary()), model


def run_ablation(variants, seeds, budget: Budget, dataset: Dataset,
                 base: ModelConfig | None = None,
                 on_run: Callable[[RunResult], None] | None = None) -> AblationReport:
    """Train and evaluate every variant under every seed.

    Seed ``s`` fixes both the parameter initialization and the training episode
    stream, so runs with the same seed are paired; all runs share one fixed set
    of test episodes.
    """
    episodes = eval_episodes(dataset, "test", budget.eval_episodes, budget.n_shot, budget.eval_seed)
    report = AblationReport()
    for seed in seeds:
        for v in variants:
            result, _ = run_one(v, seed, dataset, budget, episodes, base)
            report.runs.append(result)
            if on_run is not None:
                on_run(result)
    return report
