"""Ablation ladder: rows A-E plus the affordance / hotspot variants of E."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import ABLATION_ROWS, PipelineConfig, ablation_config
from .evaluator import CRITERIA, evaluate
from .pipeline import build_affordance_db, predict_dataset, train_toy
from .synthetic import SyntheticScenario

log = logging.getLogger(__name__)

ENHANCED_ROWS = ("E+AFF", "E+MH", "E+MH+AFF")
ALL_ROWS = ABLATION_ROWS + ENHANCED_ROWS

# ladder defaults that separate the rows within the runtime budget
LADDER_STEPS = 1700
LADDER_BATCH = 8
LADDER_LR = 2e-3
LADDER_WARMUP = 100


@dataclass
class LadderResult:
    rows: Sequence[str]
    seeds: Sequence[int]
    # scores[row][criterion] -> one mAP per seed
    scores: Dict[str, Dict[str, List[float]]] = field(default_factory=dict)

    def mean(self, row: str, crit: str) -> float:
        return float(np.mean(self.scores[row][crit]))

    def std(self, row: str, crit: str) -> float:
        return float(np.std(self.scores[row][crit]))

    def to_json(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "rows": {
                row: {
                    crit: {"mean": self.mean(row, crit), "std": self.std(row, crit),
                           "per_seed": list(self.scores[row][crit])}
                    for crit in CRITERIA
                }
                for row in self.rows
            },
        }

    def render(self) -> str:
        """Plain-text table of mAP percentages, mean ± sd over seeds."""
        head = f"{'Exp.':<10}" + "".join(f"{c:>16}" for c in CRITERIA)
        lines = [head, "-" * len(head)]
        for row in self.rows:
            cells = "".join(
                f"{100 * self.mean(row, c):>9.2f} ± {100 * self.std(row, c):<4.2f}" for c in CRITERIA
            )
            lines.append(f"{row:<10}{cells}")
        return "\n".join(lines)


def ladder_config(row: str, seed: int, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    cfg = ablation_config(row.split("+")[0], base)
    cfg.seed = seed
    cfg.train.seed = seed
    if base is None:
        cfg.train.steps = LADDER_STEPS
        cfg.train.batch_size = LADDER_BATCH
        cfg.train.lr = LADDER_LR
        cfg.train.schedule = "cosine"
        cfg.train.warmup_steps = LADDER_WARMUP
        # cross-attention starts as the identity, so rows C-E begin where B does
        cfg.fusion.zero_init_out = True
    cfg.affordance.enabled = "AFF" in row
    cfg.hotspot.enabled = "+MH" in row
    return cfg


def run_ablation_ladder(train: Sequence[SyntheticScenario], test: Sequence[SyntheticScenario],
                        seeds: Sequence[int] = (0, 1, 2), rows: Sequence[str] = ALL_ROWS,
                        base: Optional[PipelineConfig] = None) -> LadderResult:
    """Train each base row once per seed and score every requested variant on ``test``."""
    if len(seeds) < 3:
        raise ValueError("the ladder needs at least three seeds")
    unknown = [r for r in rows if r not in ALL_ROWS]
    if unknown:
        raise ValueError(f"unknown ladder rows {unknown}")
    gts = {s.scenario_id: s.gt for s in test}
    result = LadderResult(list(rows), list(seeds), {r: {c: [] for c in CRITERIA} for r in rows})
    base_rows = [r for r in ABLATION_ROWS if any(x.split("+")[0] == r for x in rows)]
    for seed in seeds:
        for base_row in base_rows:
            cfg = ladder_config(base_row, seed, base)
            model = train_toy(train, cfg).build_model()
            db = None
            for row in [r for r in rows if r.split("+")[0] == base_row]:
                rcfg = ladder_config(row, seed, base)
                if rcfg.affordance.enabled and db is None:
                    db = build_affordance_db(model, train, rcfg)
                report = evaluate(predict_dataset(model, test, rcfg, db), gts)
                for crit in CRITERIA:
                    result.scores[row][crit].append(report.mAP(crit))
                log.info("seed %d row %s N %.3f N+V %.3f", seed, row, report.mAP("N"), report.mAP("N+V"))
    return result
