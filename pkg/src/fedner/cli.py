"""Experiment runner.

Subcommands::

    python -m fedner run [--config FILE] [flags]        train and write metrics (JSON lines)
    python -m fedner compare A.conf B.conf --seeds 0,1  paired comparison over seeds
    python -m fedner plot-data METRICS... --kind loss   csv series for plotting

A config file holds one ``key = value`` per line (``#`` starts a comment);
keys are the long flag names with ``-`` or ``_``. Flags given on the
command line override the file. Set ``FEDNER_LOG`` to DEBUG, INFO or
WARNING to control log verbosity (default WARNING).

Every metrics line is a JSON object with the fields listed in
``RECORD_FIELDS``; see the README for their meaning.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import transport
from .data import Corpus, build_vocab, load_conll, load_manifest, load_platform, mask_overlapped_entities
from .data import split_train_test, subsample
from .federated import (
    CentralTrainer,
    FederationConfig,
    accept_platforms,
    allocate_batch_sizes,
    build_federation,
    drive,
    evaluate_model,
    evaluate_platforms,
    run_federation,
    serve_platform,
)
from .evaluate import relax_prf, strict_prf
from .model import PAPER_DIMS, STRATEGIES, ContextualEmbeddings, ModelConfig, flatten, load_pretrained
from .synthetic import make_benchmark, marker_task

log = logging.getLogger("fedner")

RECORD_FIELDS = (
    "config_hash", "config", "seed", "mode", "strategy", "train_fraction", "mask_ratio",
    "round", "platform", "split", "loss",
    "strict_p", "strict_r", "strict_f1", "relax_p", "relax_r", "relax_f1", "wall_time",
)
# fields that may differ between two otherwise identical runs
VOLATILE_FIELDS = ("wall_time",)


class ConfigError(ValueError):
    """A configuration value failed validation; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass
class ExperimentConfig:
    mode: str = "federated"
    manifest: str = "synthetic"  # a JSON manifest path, or "synthetic" / "toy"
    strategy: str = "fedner-default"
    optimizer: str = "adam"
    lr: float = 0.001
    batch: int = 64
    rounds: int = 100
    tolerance: Optional[float] = None  # None: always run `rounds` rounds
    eval_every: int = 0  # 0: evaluate after the last round only
    seed: int = 0
    train_fraction: list = field(default_factory=lambda: [1.0])
    mask_ratio: list = field(default_factory=lambda: [0.0])
    transport: str = "inproc"
    listen: Optional[str] = None
    connect: Optional[str] = None
    platform: Optional[int] = None  # platform index served by a --connect process
    paper_dims: bool = False
    word_dim: int = 50
    char_dim: int = 16
    context_dim: int = 0
    char_filters: int = 32
    word_filters: int = 32
    kernel: int = 3
    hidden: int = 32
    dropout: float = 0.2
    pretrained: Optional[str] = None
    out: str = "metrics.jsonl"

    def model_config(self) -> ModelConfig:
        if self.paper_dims:
            return dataclasses.replace(PAPER_DIMS, context_dim=self.context_dim, dropout=self.dropout)
        return ModelConfig(self.word_dim, self.char_dim, self.context_dim, self.char_filters,
                           self.word_filters, self.kernel, self.hidden, self.dropout)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of every field that can influence the metrics (the output path is excluded)."""
        d = self.as_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> "ExperimentConfig":
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(name, msg)

        need(self.mode in ("central", "federated"), "mode", f"must be central or federated, got {self.mode!r}")
        need(self.strategy in STRATEGIES, "strategy",
             f"unknown strategy {self.strategy!r}; available: {', '.join(sorted(STRATEGIES))}")
        need(self.optimizer in ("plain", "adam"), "optimizer", "must be plain or adam")
        need(self.lr > 0, "lr", "must be positive")
        need(self.batch >= 1, "batch", "must be at least 1")
        need(self.rounds >= 0, "rounds", "must be non-negative")
        need(self.eval_every >= 0, "eval_every", "must be non-negative")
        need(self.train_fraction and all(0 < f <= 1 for f in self.train_fraction), "train_fraction",
             "values must lie in (0, 1]")
        need(self.mask_ratio and all(0 <= r <= 1 for r in self.mask_ratio), "mask_ratio",
             "values must lie in [0, 1]")
        need(self.transport in ("inproc", "socket"), "transport", "must be inproc or socket")
        need(not (self.listen and self.connect), "listen", "--listen and --connect are exclusive")
        if self.listen or self.connect:
            need(self.mode == "federated", "mode", "--listen/--connect need federated mode")
            need(len(self.train_fraction) == 1 and len(self.mask_ratio) == 1, "mask_ratio",
                 "sweeps are not supported across processes")
        if self.connect:
            need(self.platform is not None and self.platform >= 0, "platform",
                 "--connect needs --platform INDEX")
        need(0 <= self.dropout < 1, "dropout", "must lie in [0, 1)")
        for name in ("word_dim", "char_dim", "char_filters", "word_filters", "kernel", "hidden"):
            need(getattr(self, name) >= 1, name, "must be at least 1")
        need(self.context_dim >= 0, "context_dim", "must be non-negative")
        if self.manifest not in ("synthetic", "toy"):
            need(Path(self.manifest).is_file(), "manifest", f"no such file {self.manifest!r}")
        return self


# -- config parsing ----------------------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_LIST_FIELDS = ("train_fraction", "mask_ratio")
_BOOL_WORDS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _convert(name: str, raw):
    if name not in _FIELDS:
        raise ConfigError(name, "unknown setting")
    default = _FIELDS[name].default
    if raw is None or isinstance(raw, (list, bool)) or (not isinstance(raw, str)):
        return raw
    text = raw.strip()
    try:
        if name in _LIST_FIELDS:
            return [float(x) for x in text.split(",") if x.strip()]
        if name == "tolerance":
            return None if text.lower() in ("", "none") else float(text)
        if name in ("listen", "connect", "pretrained"):
            return text or None
        if name == "platform":
            return None if text.lower() in ("", "none") else int(text)
        if isinstance(default, bool):
            if text.lower() not in _BOOL_WORDS:
                raise ValueError(text)
            return _BOOL_WORDS[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r}") from None


def read_config_file(path) -> dict:
    values = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}", "expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        values[key] = _convert(key, value)
    return values


def make_config(file_values: Optional[dict] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    values = {}
    for source in (file_values or {}), (overrides or {}):
        for k, v in source.items():
            if v is not None:
                values[k] = _convert(k, v)
    return ExperimentConfig(**values).validate()


def load_config(path) -> ExperimentConfig:
    return make_config(read_config_file(path))


# -- data -----------------------------------------------------------------------------------


@dataclass
class Dataset:
    train: list
    test: list
    context: Optional[list] = None  # per-platform ContextualEmbeddings or None


def load_data(cfg: ExperimentConfig) -> Dataset:
    if cfg.manifest == "synthetic":
        bench = make_benchmark(cfg.seed)
        return Dataset(bench.train, bench.test)
    if cfg.manifest == "toy":
        return Dataset([marker_task(200, seed=cfg.seed)], [marker_task(100, seed=cfg.seed + 10_000)])
    train, test, context = [], [], []
    for entry in load_manifest(cfg.manifest):
        corpus = load_platform(entry)
        if entry.get("test_path"):
            held_out = load_conll(entry["test_path"], platform=entry["id"])
            held_out.entity_types = list(corpus.entity_types)
        else:
            corpus, held_out = split_train_test(corpus, 0.8, seed=cfg.seed)
        train.append(corpus)
        test.append(held_out)
        context.append(ContextualEmbeddings.load(entry["context_path"]) if entry.get("context_path") else None)
    return Dataset(train, test, context if any(c is not None for c in context) else None)


def prepare(data: Dataset, fraction: float, ratio: float, seed: int) -> list[Corpus]:
    train = data.train
    if fraction < 1.0:
        train = [subsample(c, fraction, seed=seed + i) for i, c in enumerate(train)]
    if ratio > 0:
        train = mask_overlapped_entities(train, ratio, seed=seed)
    return train


# -- records --------------------------------------------------------------------------------


def _prf_fields(result: Optional[dict]) -> dict:
    if result is None:
        return {k: None for k in ("strict_p", "strict_r", "strict_f1", "relax_p", "relax_r", "relax_f1")}
    s, r = result["strict"], result["relax"]
    return {"strict_p": s.precision, "strict_r": s.recall, "strict_f1": s.f1,
            "relax_p": r.precision, "relax_r": r.recall, "relax_f1": r.f1}


class RecordWriter:
    """Collects metrics records for one run, tagging each with the config and sweep point."""

    def __init__(self, cfg: ExperimentConfig, stream=None):
        self.cfg = cfg
        self.base = {"config_hash": cfg.hash(), "config": cfg.as_dict(), "seed": cfg.seed,
                     "mode": cfg.mode, "strategy": cfg.strategy if cfg.mode == "federated" else None}
        self.stream = stream
        self.records: list[dict] = []
        self.start = time.perf_counter()
        self.point = {"train_fraction": 1.0, "mask_ratio": 0.0}

    def emit(self, round_no: int, platform, split: str, loss=None, result=None) -> dict:
        rec = dict(self.base)
        rec.update(self.point)
        rec.update(round=round_no, platform=platform, split=split, loss=loss)
        rec.update(_prf_fields(result))
        rec["wall_time"] = time.perf_counter() - self.start
        self.records.append(rec)
        if self.stream is not None:
            self.stream.write(json.dumps(rec) + "\n")
            self.stream.flush()
        return rec


def _due(cfg: ExperimentConfig, round_no: int) -> bool:
    return round_no == cfg.rounds or bool(cfg.eval_every and round_no % cfg.eval_every == 0)


def _federation_config(cfg: ExperimentConfig) -> FederationConfig:
    return FederationConfig(
        strategy=cfg.strategy, batch_size=cfg.batch, lr=cfg.lr, optimizer=cfg.optimizer,
        max_rounds=cfg.rounds, tolerance=-math.inf if cfg.tolerance is None else cfg.tolerance,
        seed=cfg.seed, eval_every=cfg.eval_every or cfg.rounds, transport=cfg.transport,
    )


def _pretrained(cfg: ExperimentConfig, vocab):
    if not cfg.pretrained:
        return None
    return load_pretrained(cfg.pretrained, vocab, cfg.model_config().word_dim)


def run_central(cfg: ExperimentConfig, data: Dataset, train: list[Corpus], writer: RecordWriter) -> None:
    """One independently trained model per platform, each with its federated batch share."""
    alloc = allocate_batch_sizes(cfg.batch, [len(c) for c in train])
    trainers = []
    for i, corpus in enumerate(train):
        vocab = build_vocab([corpus])
        ctx = data.context[i] if data.context else None
        trainers.append(CentralTrainer(corpus, cfg.model_config(), batch_size=alloc[i], lr=cfg.lr,
                                       optimizer=cfg.optimizer, seed=cfg.seed, vocab=vocab, context=ctx,
                                       pretrained=_pretrained(cfg, vocab)))
    weights = np.array([len(c) for c in train], dtype=float) / sum(len(c) for c in train)
    for r in range(1, cfg.rounds + 1):
        losses = [t.step()[0] for t in trainers]
        for i, loss in enumerate(losses):
            writer.emit(r, i, "train", loss)
        writer.emit(r, "global", "train", float(np.dot(weights, losses)))
        if _due(cfg, r):
            _emit_eval(writer, r, [evaluate_model(t.model, data.test[i]) for i, t in enumerate(trainers)])


def _emit_eval(writer: RecordWriter, round_no: int, results: list[dict]) -> None:
    gold, pred = [], []
    for i, res in enumerate(results):
        writer.emit(round_no, i, "test", None, res)
        gold += res["gold"]
        pred += res["pred"]
    writer.emit(round_no, "global", "test", None, {"strict": strict_prf(gold, pred), "relax": relax_prf(gold, pred)})


def run_federated(cfg: ExperimentConfig, data: Dataset, train: list[Corpus], writer: RecordWriter) -> None:
    fed = _federation_config(cfg)
    vocab = build_vocab(train)
    coordinator, platforms = build_federation(train, cfg.model_config(), fed, test=data.test, vocab=vocab,
                                              context=data.context, pretrained=_pretrained(cfg, vocab))

    def on_round(report):
        for pid, loss in sorted(report.losses.items()):
            writer.emit(report.round, pid, "train", loss)
        writer.emit(report.round, "global", "train", report.global_loss)
        if report.metrics is not None:
            for key in [p.id for p in platforms] + ["global"]:
                writer.emit(report.round, key, "test", None, report.metrics[key])

    if cfg.rounds == 0:
        _emit_eval(writer, 0, [p.evaluate(coordinator.theta) for p in platforms])
        return
    result = run_federation(coordinator, platforms, fed, on_round)
    last = result.reports[-1] if result.reports else None
    if last is not None and last.metrics is None:  # stopped early on the tolerance rule
        metrics = evaluate_platforms(platforms, coordinator.theta)
        for key in [p.id for p in platforms] + ["global"]:
            writer.emit(last.round, key, "test", None, metrics[key])


def run_coordinator(cfg: ExperimentConfig, data: Dataset, train: list[Corpus], writer: RecordWriter) -> None:
    """Coordinator process: wait for every platform to connect, then drive the rounds."""
    fed = _federation_config(cfg)
    vocab = build_vocab(train)
    coordinator, platforms = build_federation(train, cfg.model_config(), fed, vocab=vocab,
                                              context=data.context, pretrained=_pretrained(cfg, vocab))
    listener = transport.socket_listen(cfg.listen)
    log.warning("coordinator listening on %s for %d platforms", listener.address, len(platforms))
    try:
        channels, sizes = accept_platforms(listener, len(platforms), timeout=600)

        def on_round(report):
            for pid, loss in sorted(report.losses.items()):
                writer.emit(report.round, pid, "train", loss)
            writer.emit(report.round, "global", "train", report.global_loss)

        drive(coordinator, channels, sizes, dataclasses.replace(fed, eval_every=0), on_round)
    finally:
        listener.close()


def run_platform_process(cfg: ExperimentConfig, data: Dataset, train: list[Corpus], writer: RecordWriter) -> None:
    """Platform process: serve one platform's updates, then score it on its test split."""
    fed = _federation_config(cfg)
    vocab = build_vocab(train)
    if cfg.platform >= len(train):
        raise ConfigError("platform", f"index {cfg.platform} but the manifest lists {len(train)} platforms")
    _, platforms = build_federation(train, cfg.model_config(), fed, test=data.test, vocab=vocab,
                                    context=data.context, pretrained=_pretrained(cfg, vocab))
    platform = platforms[cfg.platform]
    serve_platform(platform, transport.socket_connect(cfg.connect))
    theta = flatten(platform.model.params, platform.shared_names)
    writer.emit(cfg.rounds, platform.id, "test", None, platform.evaluate(theta))


def run(cfg: ExperimentConfig, stream=None) -> list[dict]:
    """Execute the experiment described by `cfg`; return (and optionally stream) its records."""
    cfg.validate()
    data = load_data(cfg)
    writer = RecordWriter(cfg, stream)
    for fraction in cfg.train_fraction:
        for ratio in cfg.mask_ratio:
            writer.point = {"train_fraction": fraction, "mask_ratio": ratio}
            train = prepare(data, fraction, ratio, cfg.seed)
            log.info("%s run: fraction %.2f, mask ratio %.2f, %s sentences", cfg.mode, fraction, ratio,
                     [len(c) for c in train])
            if cfg.listen:
                run_coordinator(cfg, data, train, writer)
            elif cfg.connect:
                run_platform_process(cfg, data, train, writer)
            elif cfg.mode == "central":
                run_central(cfg, data, train, writer)
            else:
                run_federated(cfg, data, train, writer)
    return writer.records


def validate_metrics_file(path) -> int:
    """Check every line parses and carries the documented fields; return the record count."""
    n = 0
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            rec = json.loads(line)
            missing = [f for f in RECORD_FIELDS if f not in rec]
            if missing:
                raise ValueError(f"{path}:{line_no}: missing fields {missing}")
            if rec["split"] not in ("train", "test"):
                raise ValueError(f"{path}:{line_no}: bad split {rec['split']!r}")
            n += 1
    return n


def read_metrics(paths) -> list[dict]:
    records = []
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            records += [json.loads(line) for line in fh if line.strip()]
    return records


# -- compare ----------------------------------------------------------------------------------


def final_test_records(records: list[dict]) -> dict:
    """Last test-split record per (platform, train_fraction, mask_ratio)."""
    out = {}
    for r in records:
        if r["split"] == "test":
            key = (str(r["platform"]), r["train_fraction"], r["mask_ratio"])
            if key not in out or r["round"] >= out[key]["round"]:
                out[key] = r
    return out


def compare(cfg_a: ExperimentConfig, cfg_b: ExperimentConfig, seeds, runner=run) -> list[dict]:
    """Run both configs for every seed; summarise final strict/relax F1 and paired differences (b - a)."""
    finals = {"a": [], "b": []}
    for seed in seeds:
        for tag, cfg in (("a", cfg_a), ("b", cfg_b)):
            finals[tag].append(final_test_records(runner(dataclasses.replace(cfg, seed=seed))))
    rows = []
    for key in sorted(finals["a"][0], key=lambda k: (k[0] != "global", k)):
        row = {"platform": key[0], "train_fraction": key[1], "mask_ratio": key[2]}
        for metric in ("strict_f1", "relax_f1"):
            a = np.array([f[key][metric] for f in finals["a"]])
            b = np.array([f[key][metric] for f in finals["b"]])
            d = b - a
            row.update({
                f"{metric}_a_mean": float(a.mean()), f"{metric}_a_std": float(a.std()),
                f"{metric}_b_mean": float(b.mean()), f"{metric}_b_std": float(b.std()),
                f"{metric}_diff_mean": float(d.mean()), f"{metric}_diff_std": float(d.std()),
            })
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'platform':>8} {'frac':>5} {'mask':>5} | {'strict A':>15} {'strict B':>15} {'B-A':>15} |"
             f" {'relax A':>15} {'relax B':>15} {'B-A':>15}"]
    for r in rows:
        cells = []
        for m in ("strict_f1", "relax_f1"):
            for part in ("a", "b", "diff"):
                cells.append(f"{100 * r[f'{m}_{part}_mean']:7.2f} ± {100 * r[f'{m}_{part}_std']:5.2f}")
        lines.append(f"{r['platform']:>8} {r['train_fraction']:5.2f} {r['mask_ratio']:5.2f} | "
                     f"{' '.join(cells[:3])} | {' '.join(cells[3:])}")
    return "\n".join(lines)


# -- plot data ----------------------------------------------------------------------------------

PLOT_KINDS = ("loss", "mask-ratio", "train-fraction")


def emit_plot_data(records: list[dict], kind: str = "loss") -> list[dict]:
    """Reshape metrics records into rows for one figure type.

    ``loss``: one row per training record (loss curve points).
    ``mask-ratio`` / ``train-fraction``: final test F1 averaged over seeds,
    one row per (setting, platform, x value).
    """
    if kind == "loss":
        return [
            {"setting": _setting(r), "seed": r["seed"], "train_fraction": r["train_fraction"],
             "mask_ratio": r["mask_ratio"], "platform": r["platform"], "round": r["round"], "loss": r["loss"]}
            for r in records if r["split"] == "train"
        ]
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; choose from {', '.join(PLOT_KINDS)}")
    x = kind.replace("-", "_")
    groups: dict = {}
    by_run: dict = {}
    for r in records:
        if r["split"] != "test":
            continue
        run_key = (r["config_hash"], r["seed"], str(r["platform"]), r["train_fraction"], r["mask_ratio"])
        if run_key not in by_run or r["round"] >= by_run[run_key]["round"]:
            by_run[run_key] = r
    for r in by_run.values():
        groups.setdefault((_setting(r), str(r["platform"]), r[x]), []).append(r)
    rows = []
    for (setting, platform, xv), rs in sorted(groups.items()):
        rows.append({
            "setting": setting, "platform": platform, x: xv, "n_seeds": len(rs),
            "strict_f1": float(np.mean([r["strict_f1"] for r in rs])),
            "strict_f1_std": float(np.std([r["strict_f1"] for r in rs])),
            "relax_f1": float(np.mean([r["relax_f1"] for r in rs])),
            "relax_f1_std": float(np.std([r["relax_f1"] for r in rs])),
        })
    return rows


def _setting(r: dict) -> str:
    return "single" if r["mode"] == "central" else r["strategy"]


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


# -- entry point -----------------------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--mode", choices=["central", "federated"])
    p.add_argument("--manifest", help="JSON manifest of CoNLL corpora, or 'synthetic' / 'toy'")
    p.add_argument("--strategy", help=f"decomposition strategy ({', '.join(sorted(STRATEGIES))})")
    p.add_argument("--optimizer", choices=["plain", "adam"])
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int, help="global batch size N")
    p.add_argument("--rounds", type=int)
    p.add_argument("--tolerance", type=float, help="stop once the 10-round moving loss falls by no more than this")
    p.add_argument("--eval-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-fraction", help="comma-separated fractions for a training-size sweep")
    p.add_argument("--mask-ratio", help="comma-separated ratios for an overlap-masking sweep")
    p.add_argument("--transport", choices=["inproc", "socket"])
    group = p.add_mutually_exclusive_group()
    group.add_argument("--listen", metavar="HOST:PORT", help="run only the coordinator, accepting platforms here")
    group.add_argument("--connect", metavar="HOST:PORT", help="run only platform --platform, joining this coordinator")
    p.add_argument("--platform", type=int, help="platform index for --connect")
    p.add_argument("--paper-dims", action="store_const", const=True, help="use the full-scale dimensions")
    for name in ("word-dim", "char-dim", "context-dim", "char-filters", "word-filters", "kernel", "hidden"):
        p.add_argument(f"--{name}", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--pretrained", help="text file of pretrained word vectors")
    p.add_argument("--out", help="metrics file (JSON lines)")


def _config_from_args(args) -> ExperimentConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {k: v for k, v in vars(args).items()
                 if k in _FIELDS and v is not None}
    return make_config(file_values, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedner", description="Federated NER experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("run", help="train and write a metrics file"))
    cmp = sub.add_parser("compare", help="compare two configs over seeds")
    cmp.add_argument("config_a")
    cmp.add_argument("config_b")
    cmp.add_argument("--seeds", default="0,1,2,3,4")
    cmp.add_argument("--out", help="write the summary rows as JSON lines here")
    plot = sub.add_parser("plot-data", help="reshape metrics files into csv series")
    plot.add_argument("metrics", nargs="+")
    plot.add_argument("--kind", choices=PLOT_KINDS, default="loss")
    plot.add_argument("--out", help="csv path (default: stdout)")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FEDNER_LOG", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = _config_from_args(args)
            Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
            with open(cfg.out, "w", encoding="utf-8") as fh:
                run(cfg, fh)
            n = validate_metrics_file(cfg.out)
            log.info("wrote %d records to %s", n, cfg.out)
        elif args.command == "compare":
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            rows = compare(load_config(args.config_a), load_config(args.config_b), seeds)
            print(format_table(rows))
            if args.out:
                Path(args.out).write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
        else:
            text = to_csv(emit_plot_data(read_metrics(args.metrics), args.kind))
            if args.out:
                Path(args.out).write_text(text, encoding="utf-8")
            else:
                sys.stdout.write(text)
    except ConfigError as exc:
        print(f"fedner: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # any failure means the metrics file cannot be trusted
        log.debug("run failed", exc_info=True)
        print(f"fedner: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0
