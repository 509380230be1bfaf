"""Seed sweeps shared by the acceptance suite and the scripts in ``scripts/``."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import PSEUDO_LABELS, ExperimentConfig
from .federation import evaluate_model, make_data, run_experiment
from .models import SegModel, train_supervised

# capacity heterogeneity used whenever mode is heterogeneous: two shallow and two deeper clients
HETEROGENEOUS_CLIENTS = {"client_depth": (1, 1, 2, 2)}


def scenario(mode: str = "homogeneous", seed: int = 0, **overrides) -> ExperimentConfig:
    """The default toy scenario for ``mode``."""
    changes = dict(HETEROGENEOUS_CLIENTS) if mode == "heterogeneous" else {}
    changes.update(overrides)
    return ExperimentConfig(mode=mode, seed=seed).replace(**changes)


@dataclass
class SweepResult:
    mode: str
    seeds: list
    final_dice: dict = field(default_factory=dict)  # variant -> per-seed final mean Dice
    agreement: dict = field(default_factory=dict)  # seed -> per-round mean agreement (agreement variant)
    seconds: float = 0.0

    def mean(self, variant: str) -> float:
        return float(np.mean(self.final_dice[variant]))


def compare_pseudo_labels(mode: str, seeds: Sequence[int], variants: Sequence[str] = PSEUDO_LABELS,
                          out_root: Optional[Path] = None, caches: Optional[dict] = None,
                          **overrides) -> SweepResult:
    """Run every pseudo-label variant at every seed and collect final test Dice.

    ``caches`` maps seed -> init cache, so teacher and pretrained models are
    built once per seed and reused across variants (and across calls).
    """
    caches = {} if caches is None else caches
    res = SweepResult(mode, list(seeds))
    t0 = time.perf_counter()
    for seed in seeds:
        cache = caches.setdefault(seed, {})
        for variant in variants:
            cfg = scenario(mode, seed, pseudo_label=variant, **overrides)
            out = None if out_root is None else Path(out_root) / f"{mode}_{variant}_s{seed}"
            r = run_experiment(cfg, out, cache)
            res.final_dice.setdefault(variant, []).append(r.reports[-1].means()["dice"])
            if variant == "agreement":
                res.agreement[seed] = [rep.means()["agreement_rate"] for rep in r.reports]
    res.seconds = time.perf_counter() - t0
    return res


def capacity_check(seeds: Sequence[int], **overrides) -> dict:
    """Validation Dice of teacher-sized vs client-sized nets trained identically on the public set."""
    scores = {"teacher": [], "client": []}
    for seed in seeds:
        cfg = scenario("homogeneous", seed, **overrides)
        parts = make_data(cfg)
        val = [item for c in parts.clients for item in c.val]
        for name, net_cfg in (("teacher", cfg.teacher_config), ("client", cfg.client_configs()[0])):
            model = SegModel.build(net_cfg, seed + 20)
            train_supervised(model, parts.public, cfg.pretrain_epochs, cfg.pretrain_lr, seed + 3,
                             cfg.batch_size, cfg.optimizer)
            scores[name].append(evaluate_model(model, val).dice)
    return scores
