"""Study designs built on the federated and centralized trainers.

Every function here returns plain records (dicts) so results can be written
as JSON lines, averaged over seeds, or reshaped for plotting.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import Corpus, mask_overlapped_entities, subsample
from .federated import CentralTrainer, FederationConfig, allocate_batch_sizes, run_until_converged
from .model import ModelConfig
from .synthetic import BenchmarkSpec, make_benchmark

# Small enough that a 3-platform, 400-round run takes well under a minute.
BENCH_MODEL = ModelConfig(word_dim=16, char_dim=8, char_filters=8, word_filters=16, hidden=16, dropout=0.0)


@dataclass
class StudyConfig:
    rounds: int = 400
    batch_size: int = 48
    lr: float = 0.01
    optimizer: str = "adam"
    model: ModelConfig = BENCH_MODEL
    spec: Optional[BenchmarkSpec] = None
    train_fraction: float = 1.0


def _scores(result: dict) -> dict:
    s, r = result["strict"], result["relax"]
    return {
        "strict_p": s.precision, "strict_r": s.recall, "strict_f1": s.f1,
        "relax_p": r.precision, "relax_r": r.recall, "relax_f1": r.f1,
    }


def prepare(seed: int, study: StudyConfig, mask_ratio: float = 0.0) -> tuple[list[Corpus], list[Corpus]]:
    """Synthetic train/test corpora for one seed, optionally subsampled and masked."""
    bench = make_benchmark(seed, study.spec)
    train = bench.train
    if study.train_fraction < 1.0:
        train = [subsample(c, study.train_fraction, seed=seed + i) for i, c in enumerate(train)]
    if mask_ratio > 0:
        train = mask_overlapped_entities(train, mask_ratio, seed=seed)
    return train, bench.test


def run_single(train: Sequence[Corpus], test: Sequence[Corpus], study: StudyConfig, seed: int) -> list[dict]:
    """Train one model per platform on that platform's data alone.

    Each platform uses the batch size it would receive inside the federation,
    so both settings see the same number of sentences per round.
    """
    alloc = allocate_batch_sizes(study.batch_size, [len(c) for c in train])
    records = []
    for i, (tr, te) in enumerate(zip(train, test)):
        t0 = time.perf_counter()
        trainer = CentralTrainer(tr, study.model, batch_size=alloc[i], lr=study.lr,
                                 optimizer=study.optimizer, seed=seed)
        losses = trainer.run(study.rounds)
        rec = {"setting": "single", "platform": i, "seed": seed, "loss": losses[-1] if losses else None}
        rec.update(_scores(trainer.evaluate(te)))
        rec["wall_time"] = time.perf_counter() - t0
        records.append(rec)
    return records


def run_federated(train: Sequence[Corpus], test: Sequence[Corpus], study: StudyConfig, seed: int,
                  strategy: str = "fedner-default", transport: str = "inproc") -> list[dict]:
    config = FederationConfig(strategy=strategy, batch_size=study.batch_size, lr=study.lr,
                              optimizer=study.optimizer, max_rounds=study.rounds, seed=seed,
                              transport=transport)
    t0 = time.perf_counter()
    result = run_until_converged(train, study.model, config, test=test)
    elapsed = time.perf_counter() - t0
    metrics = result.evaluate()
    loss = result.reports[-1].losses if result.reports else {}
    records = []
    for i in range(len(train)):
        rec = {"setting": strategy, "platform": i, "seed": seed, "loss": loss.get(i)}
        rec.update(_scores(metrics[i]))
        rec["wall_time"] = elapsed
        records.append(rec)
    return records


def run_study(seeds: Sequence[int], settings: Sequence[str], study: Optional[StudyConfig] = None,
              mask_ratios: Sequence[float] = (0.0,)) -> list[dict]:
    """Run every setting (``"single"`` or a strategy name) for every seed and mask ratio."""
    study = study or StudyConfig()
    records = []
    for ratio in mask_ratios:
        for seed in seeds:
            train, test = prepare(seed, study, ratio)
            for setting in settings:
                if setting == "single":
                    recs = run_single(train, test, study, seed)
                else:
                    recs = run_federated(train, test, study, seed, strategy=setting)
                for r in recs:
                    r["mask_ratio"] = ratio
                records += recs
    return records


def mean_f1(records: Sequence[dict], setting: str, mask_ratio: float = 0.0, key: str = "strict_f1") -> np.ndarray:
    """Per-platform F1 averaged over seeds."""
    rows = [r for r in records if r["setting"] == setting and r.get("mask_ratio", 0.0) == mask_ratio]
    n = max(r["platform"] for r in rows) + 1
    return np.array([np.mean([r[key] for r in rows if r["platform"] == p]) for p in range(n)])
